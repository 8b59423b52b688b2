//! The symptom attention network: summed token/state/type embeddings, a
//! stack of pre-LN transformer blocks under the symptom mask, and the
//! inquiry (`[S]`) and disease (`[D]`) heads.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, ModelInput, NetError, StateId, TrainingSequence, TypeId};
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var, MASK_NEG};

pub const INIT_STD: Float = 0.02;

#[derive(Debug, Clone)]
struct BlockIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w_q: ParamId,
    b_q: ParamId,
    w_k: ParamId,
    b_k: ParamId,
    w_v: ParamId,
    b_v: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w_ff1: ParamId,
    b_ff1: ParamId,
    w_ff2: ParamId,
    b_ff2: ParamId,
}

#[derive(Debug, Clone)]
struct ParamIds {
    token_emb: ParamId,
    state_emb: ParamId,
    type_emb: ParamId,
    blocks: Vec<BlockIds>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
    w_sym: ParamId,
    b_sym: ParamId,
    w_dis: ParamId,
    b_dis: ParamId,
}

/// Network weights and the configuration they were built from.
#[derive(Debug, Clone)]
pub struct Diaformer {
    config: ModelConfig,
    params: ParamStore,
    ids: ParamIds,
}

/// Output handles of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[total [S] count, C_inq]`, rows grouped by batch item in
    /// `s_positions` order.
    pub s_logits: Option<Var>,
    /// Batch index of each row of `s_logits`.
    pub s_owner: Vec<usize>,
    /// `[items with a [D], C_dis]`.
    pub d_logits: Option<Var>,
    pub d_owner: Vec<usize>,
}

/// Loss node plus the two component values, averaged over the batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub l_dis: Float,
    pub l_sym: Float,
}

/// Truncated at two standard deviations.
fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: Float, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break (z as Float) * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl Diaformer {
    /// Fresh weights: truncated normal (std 0.02) for matrices and
    /// embeddings, zero biases, unit layer-norm gains.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, NetError> {
        config.validate()?;
        let h = config.hidden;
        let f = config.ffn_dim();
        let mut p = ParamStore::new();
        let mat = |p: &mut ParamStore, name: String, shape: &[usize], rng: &mut R| {
            p.add(name, trunc_normal(shape, INIT_STD, rng))
        };
        let token_emb = mat(&mut p, "token_emb".into(), &[config.token_table_size(), h], rng);
        let state_emb = mat(&mut p, "state_emb".into(), &[config.state_table_size(), h], rng);
        let type_emb = mat(&mut p, "type_emb".into(), &[config.type_table_size(), h], rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("block{l}.{s}");
            blocks.push(BlockIds {
                ln1_gain: p.add(n("ln1.gain"), Tensor::full(&[h], 1.0)),
                ln1_bias: p.add(n("ln1.bias"), Tensor::zeros(&[h])),
                w_q: mat(&mut p, n("attn.w_q"), &[h, h], rng),
                b_q: p.add(n("attn.b_q"), Tensor::zeros(&[h])),
                w_k: mat(&mut p, n("attn.w_k"), &[h, h], rng),
                b_k: p.add(n("attn.b_k"), Tensor::zeros(&[h])),
                w_v: mat(&mut p, n("attn.w_v"), &[h, h], rng),
                b_v: p.add(n("attn.b_v"), Tensor::zeros(&[h])),
                w_o: mat(&mut p, n("attn.w_o"), &[h, h], rng),
                b_o: p.add(n("attn.b_o"), Tensor::zeros(&[h])),
                ln2_gain: p.add(n("ln2.gain"), Tensor::full(&[h], 1.0)),
                ln2_bias: p.add(n("ln2.bias"), Tensor::zeros(&[h])),
                w_ff1: mat(&mut p, n("ffn.w1"), &[h, f], rng),
                b_ff1: p.add(n("ffn.b1"), Tensor::zeros(&[f])),
                w_ff2: mat(&mut p, n("ffn.w2"), &[f, h], rng),
                b_ff2: p.add(n("ffn.b2"), Tensor::zeros(&[h])),
            });
        }
        let lnf_gain = p.add("ln_f.gain", Tensor::full(&[h], 1.0));
        let lnf_bias = p.add("ln_f.bias", Tensor::zeros(&[h]));
        let w_sym = mat(&mut p, "head.w_sym".into(), &[h, config.c_inq()], rng);
        let b_sym = p.add("head.b_sym", Tensor::zeros(&[config.c_inq()]));
        let w_dis = mat(&mut p, "head.w_dis".into(), &[h, config.c_dis()], rng);
        let b_dis = p.add("head.b_dis", Tensor::zeros(&[config.c_dis()]));
        Ok(Self {
            config,
            params: p,
            ids: ParamIds {
                token_emb,
                state_emb,
                type_emb,
                blocks,
                lnf_gain,
                lnf_bias,
                w_sym,
                b_sym,
                w_dis,
                b_dis,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the parameter store. Names and shapes must match.
    pub fn set_params(&mut self, params: ParamStore) -> Result<(), NetError> {
        if params.len() != self.params.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(params.iter()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(NetError::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    b.name,
                    b.tensor.shape(),
                    a.name,
                    a.tensor.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn symptom_head_weight(&self) -> ParamId {
        self.ids.w_sym
    }

    fn linear(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        w: ParamId,
        b: ParamId,
    ) -> Result<Var, NetError> {
        let wv = g.param(store, w);
        let bv = g.param(store, b);
        let y = g.matmul(x, wv)?;
        Ok(g.add(y, bv)?)
    }

    /// Batched forward pass using this model's own parameters.
    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: &[&ModelInput],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput, NetError> {
        self.forward_with(g, &self.params, inputs, rng)
    }

    /// Forward pass reading weights from `store`, which must share this
    /// model's layout. Dropout is applied only when `rng` is given.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[&ModelInput],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput, NetError> {
        let cfg = &self.config;
        let batch = inputs.len();
        if batch == 0 {
            return Err(NetError::Layout("empty batch".into()));
        }
        let t = inputs.iter().map(|i| i.len()).max().unwrap_or(0);
        if t == 0 {
            return Err(NetError::Layout("empty sequence".into()));
        }
        let (h, a, d) = (cfg.hidden, cfg.heads, cfg.head_dim());
        let p_drop = if rng.is_some() { cfg.dropout } else { 0.0 };

        let mut tokens = vec![0usize; batch * t];
        let mut states = vec![StateId::None as usize; batch * t];
        let mut types = vec![TypeId::Spec as usize; batch * t];
        let mut mask = vec![MASK_NEG; batch * t * t];
        for (b, inp) in inputs.iter().enumerate() {
            let n = inp.len();
            if let Some(&bad) = inp.token_ids.iter().find(|&&id| id >= cfg.token_table_size()) {
                return Err(NetError::Index(format!(
                    "token id {bad} outside table of {}",
                    cfg.token_table_size()
                )));
            }
            for i in 0..n {
                tokens[b * t + i] = inp.token_ids[i];
                states[b * t + i] = inp.state_ids[i] as usize;
                types[b * t + i] = inp.type_ids[i] as usize;
            }
            let base = b * t * t;
            for q in 0..t {
                for k in 0..t {
                    let visible = if q < n && k < n {
                        inp.visible(q, k)
                    } else {
                        q == k
                    };
                    if visible {
                        mask[base + q * t + k] = 0.0;
                    }
                }
            }
        }
        let mask = Tensor::new(vec![batch, 1, t, t], mask).expect("mask shape");

        let tok = g.param(store, self.ids.token_emb);
        let st = g.param(store, self.ids.state_emb);
        let ty = g.param(store, self.ids.type_emb);
        let e_tok = g.embedding(tok, &tokens)?;
        let e_st = g.embedding(st, &states)?;
        let e_ty = g.embedding(ty, &types)?;
        let x = g.add(e_tok, e_st)?;
        let mut x = g.add(x, e_ty)?;

        let scale = 1.0 / (d as Float).sqrt();
        let eps = cfg.layer_norm_eps;
        for blk in &self.ids.blocks {
            let (lg, lb) = (g.param(store, blk.ln1_gain), g.param(store, blk.ln1_bias));
            let hn = g.layer_norm(x, lg, lb, eps)?;
            let q = self.linear(g, store, hn, blk.w_q, blk.b_q)?;
            let k = self.linear(g, store, hn, blk.w_k, blk.b_k)?;
            let v = self.linear(g, store, hn, blk.w_v, blk.b_v)?;
            let q = g.reshape(q, &[batch, t, a, d])?;
            let q = g.permute(q, &[0, 2, 1, 3])?;
            let k = g.reshape(k, &[batch, t, a, d])?;
            let k_t = g.permute(k, &[0, 2, 3, 1])?;
            let v = g.reshape(v, &[batch, t, a, d])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            let scores = g.matmul(q, k_t)?;
            let scores = g.scale(scores, scale);
            let attn = g.masked_softmax(scores, &mask)?;
            let attn = match rng.as_deref_mut() {
                Some(r) => g.dropout(attn, p_drop, r),
                None => attn,
            };
            let ctx = g.matmul(attn, v)?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[batch * t, h])?;
            let out = self.linear(g, store, ctx, blk.w_o, blk.b_o)?;
            x = g.add(x, out)?;

            let (lg, lb) = (g.param(store, blk.ln2_gain), g.param(store, blk.ln2_bias));
            let hn = g.layer_norm(x, lg, lb, eps)?;
            let f = self.linear(g, store, hn, blk.w_ff1, blk.b_ff1)?;
            let f = g.gelu(f);
            let f = self.linear(g, store, f, blk.w_ff2, blk.b_ff2)?;
            let f = match rng.as_deref_mut() {
                Some(r) => g.dropout(f, p_drop, r),
                None => f,
            };
            x = g.add(x, f)?;
        }
        let (lg, lb) = (g.param(store, self.ids.lnf_gain), g.param(store, self.ids.lnf_bias));
        let x = g.layer_norm(x, lg, lb, eps)?;

        let mut s_rows = Vec::new();
        let mut s_owner = Vec::new();
        let mut d_rows = Vec::new();
        let mut d_owner = Vec::new();
        for (b, inp) in inputs.iter().enumerate() {
            for &p in &inp.s_positions {
                s_rows.push(b * t + p);
                s_owner.push(b);
            }
            if let Some(p) = inp.d_position {
                d_rows.push(b * t + p);
                d_owner.push(b);
            }
        }
        let s_logits = if s_rows.is_empty() {
            None
        } else {
            let s = g.gather_rows(x, &s_rows)?;
            Some(self.linear(g, store, s, self.ids.w_sym, self.ids.b_sym)?)
        };
        let d_logits = if d_rows.is_empty() {
            None
        } else {
            let dv = g.gather_rows(x, &d_rows)?;
            Some(self.linear(g, store, dv, self.ids.w_dis, self.ids.b_dis)?)
        };
        Ok(ForwardOutput {
            s_logits,
            s_owner,
            d_logits,
            d_owner,
        })
    }

    /// `L_dis + L_sym` per sequence, averaged over the batch. `L_sym` is
    /// itself the mean over that sequence's `[S]` tokens.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &ForwardOutput,
        seqs: &[&TrainingSequence],
    ) -> Result<LossParts, NetError> {
        let batch = seqs.len() as Float;
        let s_logits = out
            .s_logits
            .ok_or_else(|| NetError::Layout("no [S] positions in batch".into()))?;
        let d_logits = out
            .d_logits
            .ok_or_else(|| NetError::Layout("no [D] position in batch".into()))?;
        if out.d_owner.len() != seqs.len() {
            return Err(NetError::Layout("every training sequence needs a [D]".into()));
        }
        let mut label_sets = Vec::with_capacity(out.s_owner.len());
        let mut s_weights = Vec::with_capacity(out.s_owner.len());
        for seq in seqs {
            if seq.s_labels.len() != seq.input.s_positions.len() {
                return Err(NetError::Layout(format!(
                    "{} label sets for {} [S] tokens",
                    seq.s_labels.len(),
                    seq.input.s_positions.len()
                )));
            }
            let w = 1.0 / (batch * seq.s_labels.len() as Float);
            for labels in &seq.s_labels {
                label_sets.push(labels.clone());
                s_weights.push(w);
            }
        }
        let l_sym = g.concurrent_softmax_rows(s_logits, &label_sets, &s_weights)?;
        let labels: Vec<usize> = seqs.iter().map(|s| s.disease_label).collect();
        let l_dis = g.cross_entropy_rows(d_logits, &labels, &vec![1.0 / batch; seqs.len()])?;
        let total = g.add(l_dis, l_sym)?;
        Ok(LossParts {
            total,
            l_dis: g.value(l_dis).item(),
            l_sym: g.value(l_sym).item(),
        })
    }

    /// Logits for one input without dropout: one row per `[S]`, plus the
    /// `[D]` row when present.
    pub fn logits(&self, input: &ModelInput) -> Result<(Vec<Vec<Float>>, Option<Vec<Float>>), NetError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, &[input], None)?;
        let rows = |v: Option<Var>| -> Vec<Vec<Float>> {
            v.map(|v| {
                let t = g.value(v);
                let cols = t.shape()[1];
                t.data().chunks(cols).map(<[Float]>::to_vec).collect()
            })
            .unwrap_or_default()
        };
        let s = rows(out.s_logits);
        let d = rows(out.d_logits).into_iter().next();
        Ok((s, d))
    }
}
