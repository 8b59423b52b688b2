use serde::{Deserialize, Serialize};

use super::{Float, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A trainable tensor plus its Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub adam_m: Vec<Float>,
    pub adam_v: Vec<Float>,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let n = tensor.numel();
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }
}

/// Owns every trainable parameter of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, tensor));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Euclidean norm over all populated gradients.
    pub fn grad_norm(&self) -> Float {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<Float>()
            .sqrt()
    }
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: Float) -> Float {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment state lives on each [`Parameter`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Adam {
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config }
    }

    pub fn with_lr(lr: Float) -> Self {
        Self::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    /// Applies one update to every parameter that has a gradient, then zeroes
    /// the gradients.
    pub fn step(&self, store: &mut ParamStore) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for p in store.iter_mut() {
            let Some(grad) = p.tensor.grad.as_mut() else {
                continue;
            };
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let data = &mut p.tensor.data;
            for i in 0..data.len() {
                let g = grad[i];
                p.adam_m[i] = beta1 * p.adam_m[i] + (1.0 - beta1) * g;
                p.adam_v[i] = beta2 * p.adam_v[i] + (1.0 - beta2) * g * g;
                let m_hat = p.adam_m[i] / bc1;
                let v_hat = p.adam_v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            grad.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_store(w: &[Float]) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(w.to_vec()));
        (store, id)
    }

    #[test]
    fn moments_start_at_zero() {
        let (store, id) = quad_store(&[1.0, 2.0]);
        let p = store.get(id);
        assert_eq!(p.adam_m, vec![0.0, 0.0]);
        assert_eq!(p.adam_v.len(), p.tensor.numel());
        assert_eq!(p.step_count, 0);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let (mut store, id) = quad_store(&[1.0, -3.0]);
        store.get_mut(id).tensor.accumulate_grad(&[0.0, 0.0]);
        Adam::with_lr(0.1).step(&mut store);
        assert_eq!(store.tensor(id).data(), &[1.0, -3.0]);
    }

    #[test]
    fn one_step_descends_on_square() {
        let (mut store, id) = quad_store(&[1.0]);
        // d/dw w^2 = 2w
        store.get_mut(id).tensor.accumulate_grad(&[2.0]);
        Adam::with_lr(0.1).step(&mut store);
        let w = store.tensor(id).data()[0];
        assert!(w < 1.0, "w = {w}");
        assert_eq!(store.get(id).tensor.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // f(w) = 3 w0^2 + 0.5 w1^2
        let (mut store, id) = quad_store(&[1.0, -2.0]);
        let f = |w: &[Float]| 3.0 * w[0] * w[0] + 0.5 * w[1] * w[1];
        let adam = Adam::with_lr(0.05);
        let mut prev = f(store.tensor(id).data());
        for _ in 0..10 {
            let w = store.tensor(id).data().to_vec();
            store
                .get_mut(id)
                .tensor
                .accumulate_grad(&[6.0 * w[0], 1.0 * w[1]]);
            adam.step(&mut store);
            let cur = f(store.tensor(id).data());
            assert!(cur < prev, "{cur} !< {prev}");
            prev = cur;
        }
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let (mut store, id) = quad_store(&[0.3, 0.7, -1.1]);
            for k in 0..5 {
                let g = [0.1 * k as Float, -0.2, 0.05];
                store.get_mut(id).tensor.accumulate_grad(&g);
                Adam::with_lr(0.01).step(&mut store);
            }
            store
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let (mut store, id) = quad_store(&[0.0, 0.0]);
        store.get_mut(id).tensor.accumulate_grad(&[3.0, 4.0]);
        let before = clip_grad_norm(&mut store, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }
}
