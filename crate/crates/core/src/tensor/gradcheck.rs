use super::{Float, Graph, ParamStore, Result, Var};

/// Central-difference step.
#[cfg(not(feature = "f32"))]
pub const FD_STEP: Float = 1e-5;
#[cfg(feature = "f32")]
pub const FD_STEP: Float = 1e-2;

/// Gradients smaller than this are compared in absolute terms.
#[cfg(not(feature = "f32"))]
pub const REL_ERROR_FLOOR: Float = 1e-5;
#[cfg(feature = "f32")]
pub const REL_ERROR_FLOOR: Float = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: Float,
    pub checked: usize,
    /// (parameter, flat index, analytic, numeric) at the worst entry.
    pub worst: Option<(String, usize, Float, Float)>,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn rel_error(analytic: Float, numeric: Float) -> Float {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central finite differences for every weight in `store`.
///
/// `f` must be deterministic. The store's values are restored afterwards and
/// its gradient buffers are left untouched.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, &analytic_store)?;
        g.backward_into(loss, &mut analytic_store)?;
    }
    let mut eval = |s: &ParamStore| -> Result<Float> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.tensor(id).numel();
        let zeros = vec![0.0; n];
        let analytic = analytic_store
            .tensor(id)
            .grad()
            .map(<[Float]>::to_vec)
            .unwrap_or(zeros);
        for i in 0..n {
            let orig = store.tensor(id).data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + FD_STEP;
            let plus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - FD_STEP;
            let minus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = rel_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.get(id).name.clone(), i, analytic[i], numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(&mut store, |g, s| {
            let xv = g.constant(x.clone());
            let wv = g.param(s, w);
            let y = g.matmul(xv, wv)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(store.tensor(w).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn concurrent_softmax_two_labels() {
        let mut store = ParamStore::new();
        let z = store.add("z", Tensor::from_vec(vec![0.3, -1.1, 0.8, 2.0, -0.4]));
        let report = grad_check(&mut store, |g, s| {
            let zv = g.param(s, z);
            g.concurrent_softmax_loss(zv, &[1, 3])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
