//! Tape-based reverse-mode automatic differentiation.

use rand::Rng;

use super::loss::{check_label_set, concurrent_softmax_forward, cross_entropy_forward};
use super::{
    broadcast_offsets, broadcast_shapes, strides, Float, ParamId, ParamStore, Result, Tensor,
    TensorError, MASK_THRESHOLD,
};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: Float,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    /// `src[o]` is the input flat index feeding output index `o`.
    Permute {
        a: Var,
        src: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    MaskedSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<Float>,
        rstd: Vec<Float>,
    },
    Gelu {
        a: Var,
    },
    Dropout {
        a: Var,
        keep: Vec<Float>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    Sum {
        a: Var,
    },
    /// Scalar loss whose gradient w.r.t. `logits` was computed in the forward
    /// pass.
    RowLoss {
        logits: Var,
        dlogits: Vec<Float>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Float>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[Float]> {
        self.grads[v.0].as_deref()
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Float],
    a_trans: bool,
    b: &[Float],
    b_trans: bool,
    c: &mut [Float],
) {
    // logical A is m x k, B is k x n; stored transposed when flagged
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every access made with these strides.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(),
            n as isize, 1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(),
            n as isize, 1,
        );
    }
}

const GELU_C: Float = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Float = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.tensor(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: "add",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let data = if sa == sb {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            x.iter().zip(y).map(|(p, q)| p + q).collect()
        } else {
            let oa = broadcast_offsets(&sa, &out_shape);
            let ob = broadcast_offsets(&sb, &out_shape);
            let (x, y) = (self.value(a).data(), self.value(b).data());
            oa.iter().zip(&ob).map(|(&i, &j)| x[i] + y[j]).collect()
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: Float) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Scale { a, factor }, needs)
    }

    /// Batched matrix product over the last two axes with broadcast batch
    /// axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes(ba, bb).ok_or_else(mismatch)?;
        let oa = broadcast_offsets(ba, &batch);
        let ob = broadcast_offsets(bb, &batch);
        let mut out = vec![0.0; oa.len() * m * n];
        {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            for (bi, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &x[ia * m * k..],
                    false,
                    &y[ib * k * n..],
                    false,
                    &mut out[bi * m * n..],
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, needs))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("axes {axes:?} do not permute shape {shape:?}"),
            });
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let eff: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let total: usize = out_shape.iter().product();
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; out_shape.len()];
        let mut cur = 0usize;
        for _ in 0..total {
            src.push(cur);
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                cur += eff[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                cur -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        let x = self.value(a).data();
        let data = src.iter().map(|&i| x[i]).collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { a, src }, needs))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).len();
        if n < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose_last",
                msg: "need at least 2 axes".into(),
            });
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 1, n - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape { a }, needs))
    }

    /// Softmax over the last axis of `scores + mask`. `mask` broadcasts to
    /// the score shape and holds 0 (visible) or [`super::MASK_NEG`].
    pub fn masked_softmax(&mut self, scores: Var, mask: &Tensor) -> Result<Var> {
        let shape = self.shape(scores).to_vec();
        let bshape = broadcast_shapes(&shape, mask.shape());
        if bshape.as_deref() != Some(&shape[..]) || shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: shape,
                rhs: mask.shape().to_vec(),
            });
        }
        let cols = *shape.last().unwrap();
        let mo = broadcast_offsets(mask.shape(), &shape);
        let md = mask.data();
        let x = self.value(scores).data();
        let mut out = vec![0.0; x.len()];
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let base = r * cols;
            let mut any = false;
            for c in 0..cols {
                let m = md[mo[base + c]];
                any |= m > MASK_THRESHOLD;
                row[c] = x[base + c] + m;
            }
            if !any {
                return Err(TensorError::InvalidMask { row: r });
            }
            super::softmax_in_place(row);
        }
        let needs = self.needs(scores);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MaskedSoftmax { a: scores },
            needs,
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Float) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().ok_or(TensorError::InvalidShape {
            op: "layer_norm",
            msg: "0-d input".into(),
        })?;
        if h == 0 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                msg: "hidden size 0".into(),
            });
        }
        for p in [gain, bias] {
            if self.shape(p) != [h] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / h;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * h..(r + 1) * h];
            let mean = row.iter().sum::<Float>() / h as Float;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / h as Float;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..h {
                let xh = (row[c] - mean) * rs;
                xhat[r * h + c] = xh;
                out[r * h + c] = xh * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Gelu { a }, needs)
    }

    /// Inverted dropout. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: Float, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let scale = 1.0 / (1.0 - p);
        let t = self.value(a);
        let keep: Vec<Float> = (0..t.numel())
            .map(|_| if rng.random::<Float>() < p { 0.0 } else { scale })
            .collect();
        let data = t.data().iter().zip(&keep).map(|(x, k)| x * k).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Dropout { a, keep }, needs)
    }

    /// Looks up rows of a `[vocab, hidden]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                msg: format!("table must be 2-d, got {shape:?}"),
            });
        }
        let (vocab, h) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                size: vocab,
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(&td[i * h..(i + 1) * h]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), h], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Selects rows of a 2-d tensor.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                msg: format!("input must be 2-d, got {shape:?}"),
            });
        }
        let (n, h) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                size: n,
            });
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            out.extend_from_slice(&x[r * h..(r + 1) * h]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![rows.len(), h], out)?,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, needs)
    }

    fn rows_of(&self, logits: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(logits) {
            [c] => Ok((1, *c)),
            [n, c] => Ok((*n, *c)),
            s => Err(TensorError::InvalidShape {
                op,
                msg: format!("logits must be 1-d or 2-d, got {s:?}"),
            }),
        }
    }

    /// `sum_r weights[r] * CE(logits[r], labels[r])`.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[Float],
    ) -> Result<Var> {
        let (n, c) = self.rows_of(logits, "cross_entropy")?;
        if labels.len() != n || weights.len() != n {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{n} rows but {} labels, {} weights", labels.len(), weights.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                size: c,
            });
        }
        let z = self.value(logits).data();
        let mut dlogits = vec![0.0; n * c];
        let mut total = 0.0;
        for r in 0..n {
            let grad = &mut dlogits[r * c..(r + 1) * c];
            total += weights[r] * cross_entropy_forward(&z[r * c..(r + 1) * c], labels[r], Some(grad));
            grad.iter_mut().for_each(|g| *g *= weights[r]);
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::RowLoss { logits, dlogits },
            needs,
        ))
    }

    /// `-log softmax(logits)[label]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.cross_entropy_rows(logits, &[label], &[1.0])
    }

    /// `sum_r weights[r] * concurrent_softmax_loss(logits[r], label_sets[r])`.
    pub fn concurrent_softmax_rows(
        &mut self,
        logits: Var,
        label_sets: &[Vec<usize>],
        weights: &[Float],
    ) -> Result<Var> {
        let (n, c) = self.rows_of(logits, "concurrent_softmax_loss")?;
        if label_sets.len() != n || weights.len() != n {
            return Err(TensorError::InvalidArgument {
                op: "concurrent_softmax_loss",
                msg: format!(
                    "{n} rows but {} label sets, {} weights",
                    label_sets.len(),
                    weights.len()
                ),
            });
        }
        for labels in label_sets {
            check_label_set(labels, c)?;
        }
        let z = self.value(logits).data();
        let mut dlogits = vec![0.0; n * c];
        let mut total = 0.0;
        for r in 0..n {
            let grad = &mut dlogits[r * c..(r + 1) * c];
            total += weights[r]
                * concurrent_softmax_forward(&z[r * c..(r + 1) * c], &label_sets[r], Some(grad));
            grad.iter_mut().for_each(|g| *g *= weights[r]);
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::RowLoss { logits, dlogits },
            needs,
        ))
    }

    /// Concurrent-softmax loss for a single logit vector.
    pub fn concurrent_softmax_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.concurrent_softmax_rows(logits, &[labels.to_vec()], &[1.0])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<Float>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.get_mut(id).tensor.accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [Float])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let out_shape = node.value.shape();
                for v in [*a, *b] {
                    let shape = self.nodes[v.0].value.shape().to_vec();
                    if shape == out_shape {
                        acc(v, &mut |buf| {
                            buf.iter_mut().zip(g).for_each(|(d, s)| *d += s)
                        });
                    } else {
                        let offs = broadcast_offsets(&shape, out_shape);
                        acc(v, &mut |buf| {
                            offs.iter().zip(g).for_each(|(&i, s)| buf[i] += s)
                        });
                    }
                }
            }
            Op::Scale { a, factor } => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += s * factor)
            }),
            Op::MatMul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (sa, sb) = (va.shape(), vb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
                let batch = &node.value.shape()[..node.value.ndim() - 2];
                let oa = broadcast_offsets(ba, batch);
                let ob = broadcast_offsets(bb, batch);
                // dA = dC B^T
                acc(*a, &mut |buf| {
                    for (bi, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            false,
                            &vb.data()[ib * k * n..],
                            true,
                            &mut buf[ia * m * k..],
                        );
                    }
                });
                // dB = A^T dC
                acc(*b, &mut |buf| {
                    for (bi, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                        gemm(
                            k,
                            m,
                            n,
                            &va.data()[ia * m * k..],
                            true,
                            &g[bi * m * n..],
                            false,
                            &mut buf[ib * k * n..],
                        );
                    }
                });
            }
            Op::Permute { a, src } => acc(*a, &mut |buf| {
                src.iter().zip(g).for_each(|(&i, s)| buf[i] += s)
            }),
            Op::Reshape { a } => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += s)
            }),
            Op::MaskedSoftmax { a } => {
                let p = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                acc(*a, &mut |buf| {
                    for r in 0..p.len() / cols {
                        let (pr, gr) = (&p[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: Float = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            buf[r * cols + c] += pr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gd = self.nodes[gain.0].value.data();
                let h = gd.len();
                let rows = xhat.len() / h;
                acc(*x, &mut |buf| {
                    for r in 0..rows {
                        let gr = &g[r * h..(r + 1) * h];
                        let xh = &xhat[r * h..(r + 1) * h];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..h {
                            let d = gr[c] * gd[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d /= h as Float;
                        mean_dx /= h as Float;
                        for c in 0..h {
                            let d = gr[c] * gd[c];
                            buf[r * h + c] += rstd[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for r in 0..rows {
                        for c in 0..h {
                            buf[c] += g[r * h + c] * xhat[r * h + c];
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for r in 0..rows {
                        for c in 0..h {
                            buf[c] += g[r * h + c];
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.nodes[a.0].value.data();
                acc(*a, &mut |buf| {
                    for i in 0..x.len() {
                        let xi = x[i];
                        let t = (GELU_C * (xi + GELU_A * xi * xi * xi)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * xi * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xi * xi);
                        buf[i] += g[i] * d;
                    }
                });
            }
            Op::Dropout { a, keep } => acc(*a, &mut |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * keep[i];
                }
            }),
            Op::Embedding { table, ids } => {
                let h = node.value.shape()[1];
                acc(*table, &mut |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..h {
                            buf[id * h + c] += g[r * h + c];
                        }
                    }
                });
            }
            Op::GatherRows { a, rows } => {
                let h = node.value.shape()[1];
                acc(*a, &mut |buf| {
                    for (r, &src) in rows.iter().enumerate() {
                        for c in 0..h {
                            buf[src * h + c] += g[r * h + c];
                        }
                    }
                });
            }
            Op::Sum { a } => acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::RowLoss { logits, dlogits } => acc(*logits, &mut |buf| {
                buf.iter_mut()
                    .zip(dlogits)
                    .for_each(|(d, s)| *d += g[0] * s)
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn t2(rows: &[&[Float]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let x = t2(&[&[1.5, -2.0, 3.0], &[0.25, 4.0, -1.0]]);
        let i = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(t2(&[&[1.0, 2.0]]));
        let b = g.constant(t2(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = store.add("a", randn(&[3, 4], &mut rng));
        let b = store.add("b", randn(&[4, 2], &mut rng));
        let w = randn(&[3, 2], &mut rng);
        let report = grad_check(&mut store, |g, s| {
            let (va, vb) = (g.param(s, a), g.param(s, b));
            let c = g.matmul(va, vb)?;
            let wv = g.constant(w.clone());
            let prod = elementwise_dot(g, c, wv)?;
            Ok(prod)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn batched_matmul_broadcasts_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let a = store.add("a", randn(&[2, 3, 4], &mut rng));
        let b = store.add("b", randn(&[4, 5], &mut rng));
        let w = randn(&[2, 3, 5], &mut rng);
        let report = grad_check(&mut store, |g, s| {
            let (va, vb) = (g.param(s, a), g.param(s, b));
            let c = g.matmul(va, vb)?;
            let wv = g.constant(w.clone());
            elementwise_dot(g, c, wv)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    /// sum(a * w) via matmul against a flattened w, so only tested ops are
    /// involved.
    fn elementwise_dot(g: &mut Graph, a: Var, w: Var) -> Result<Var> {
        let n = g.value(a).numel();
        let af = g.reshape(a, &[1, n])?;
        let wf = g.reshape(w, &[n, 1])?;
        let d = g.matmul(af, wf)?;
        Ok(g.sum(d))
    }

    #[test]
    fn masked_softmax_uniform() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[1, 4]));
        let p = g.masked_softmax(s, &Tensor::zeros(&[1, 4])).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn masked_softmax_single_visible_key() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[2]));
        let mask = Tensor::from_vec(vec![0.0, crate::tensor::MASK_NEG]);
        let p = g.masked_softmax(s, &mask).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_partial() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let mask = Tensor::from_vec(vec![0.0, 0.0, crate::tensor::MASK_NEG]);
        let p = g.masked_softmax(s, &mask).unwrap();
        let (e1, e2) = ((1.0 as Float).exp(), (2.0 as Float).exp());
        let d = g.value(p).data();
        assert!((d[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((d[1] - e2 / (e1 + e2)).abs() < 1e-15);
        assert!(d[2] < 1e-30);
    }

    #[test]
    fn masked_softmax_rejects_fully_masked_row() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[2, 2]));
        let mask = Tensor::new(vec![2, 2], vec![0.0, -1e9, -1e9, -1e9]).unwrap();
        assert_eq!(
            g.masked_softmax(s, &mask).unwrap_err(),
            TensorError::InvalidMask { row: 1 }
        );
    }

    #[test]
    fn layer_norm_constant_input_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3], 4.2));
        let gain = g.constant(Tensor::from_vec(vec![2.0, 3.0, 4.0]));
        let bias = g.constant(Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert!((row[0] - 0.1).abs() < 1e-12);
            assert!((row[1] - 0.2).abs() < 1e-12);
            assert!((row[2] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_values() {
        // mean 0, var 1 => (x - 0) / sqrt(1 + eps)
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, -1.0]));
        let gain = g.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let bias = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let expect = 1.0 / (1.0 + 1e-5 as Float).sqrt();
        let d = g.value(y).data();
        assert!((d[0] - expect).abs() < 1e-12 && (d[1] + expect).abs() < 1e-12);
        assert!((d[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let x = store.add("x", randn(&[3, 5], &mut rng));
        let gain = store.add("g", randn(&[5], &mut rng));
        let bias = store.add("b", randn(&[5], &mut rng));
        let w = randn(&[3, 5], &mut rng);
        let report = grad_check(&mut store, |g, s| {
            let (xv, gv, bv) = (g.param(s, x), g.param(s, gain), g.param(s, bias));
            let y = g.layer_norm(xv, gv, bv, 1e-5)?;
            let wv = g.constant(w.clone());
            elementwise_dot(g, y, wv)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g.variable(Tensor::from_vec(vec![0.2, -0.7, 1.3, 0.0]));
        let loss = g.cross_entropy(z, 2).unwrap();
        let grads = g.backward(loss).unwrap();
        let p = crate::tensor::softmax(g.value(z).data());
        for (i, d) in grads.get(z).unwrap().iter().enumerate() {
            let expect = p[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((d - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_ops_gradient() {
        // permute, masked softmax, gelu, embedding, gather, add-broadcast, scale
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let table = store.add("table", randn(&[5, 4], &mut rng));
        let bias = store.add("bias", randn(&[4], &mut rng));
        let w = store.add("w", randn(&[2, 3, 4], &mut rng));
        let mask = Tensor::new(
            vec![3, 3],
            vec![0.0, -1e9, -1e9, 0.0, 0.0, -1e9, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let report = grad_check(&mut store, |g, s| {
            let t = g.param(s, table);
            let e = g.embedding(t, &[1, 4, 2])?;
            let b = g.param(s, bias);
            let e = g.add(e, b)?;
            let e = g.gelu(e);
            let wv = g.param(s, w);
            let wt = g.permute(wv, &[0, 2, 1])?; // [2,4,3]
            let sc = g.matmul(e, wt)?; // [3,4] x [2,4,3] -> [2,3,3]
            let sc = g.scale(sc, 0.5);
            let p = g.masked_softmax(sc, &mask)?;
            let v = g.matmul(p, e)?; // [2,3,4]
            let flat = g.reshape(v, &[6, 4])?;
            let picked = g.gather_rows(flat, &[0, 5, 3])?;
            g.concurrent_softmax_rows(picked, &[vec![0, 1], vec![3], vec![1, 2, 3]], &[0.5, 1.0, 0.25])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn dropout_zero_is_identity() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.constant(Tensor::full(&[3], 1.0));
        assert_eq!(g.dropout(x, 0.0, &mut rng), x);
        let y = g.dropout(x, 0.5, &mut rng);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn index_errors() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            g.embedding(t, &[3]),
            Err(TensorError::IndexOutOfRange { index: 3, size: 3, .. })
        ));
        let z = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(
            g.cross_entropy(z, 4),
            Err(TensorError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            g.concurrent_softmax_loss(z, &[]),
            Err(TensorError::InvalidArgument { .. })
        ));
    }
}
