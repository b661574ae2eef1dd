//! Named parameter tensors with paired gradient buffers.

use super::tensor::Tensor;
use crate::error::{RaemepcError, Result};

/// Handle to one parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Owns every learnable tensor of a model, keyed by insertion order.
/// Gradients accumulate across windows of a batch and are consumed by the
/// optimizer step.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; value.len()];
        self.entries.push(Entry { name, value, grad });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[f64]) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.grad.len() != g.len() {
            return Err(RaemepcError::Shape(format!(
                "gradient length {} does not match parameter {} ({})",
                g.len(),
                e.name,
                e.grad.len()
            )));
        }
        for (d, s) in e.grad.iter_mut().zip(g) {
            *d += s;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    /// Euclidean norm over all gradients jointly.
    pub fn global_grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so the global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn any_grad_nonfinite(&self) -> bool {
        self.entries
            .iter()
            .any(|e| e.grad.iter().any(|g| !g.is_finite()))
    }

    /// Copies of all parameter values, for early-stopping snapshots.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.entries.len(), "snapshot size mismatch");
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            assert_eq!(e.value.shape(), s.shape(), "snapshot shape mismatch");
            e.value = s.clone();
        }
    }
}

/// Adam optimizer state: per-parameter first and second moment buffers plus
/// the shared step counter.
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64, store: &ParamStore) -> Self {
        let m = store.entries.iter().map(|e| vec![0.0; e.value.len()]).collect();
        let v = store.entries.iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update using the store's current gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, e) in store.entries.iter_mut().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = e.value.data_mut();
            for k in 0..p.len() {
                let g = e.grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_step_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![1.0, -2.0]));
        let mut adam = AdamState::new(0.001, &store);
        adam.step(&mut store);
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluated_adam() {
        // One step, g = 1, lr = 0.001:
        //   m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
        //   p -= lr * 1 / (1 + 1e-8)
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.5]));
        store.add_grad(id, &[1.0]).unwrap();
        let mut adam = AdamState::new(0.001, &store);
        adam.step(&mut store);
        let expected = 0.5 - 0.001 / (1.0 + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.3]));
        let b = store.add("b", Tensor::vector(vec![0.3]));
        store.add_grad(a, &[0.7]).unwrap();
        store.add_grad(b, &[0.7]).unwrap();
        let mut adam = AdamState::new(0.01, &store);
        adam.step(&mut store);
        assert_eq!(store.value(a).data(), store.value(b).data());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.0, 0.0]));
        store.add_grad(id, &[3.0, 4.0]).unwrap();
        let before = store.clip_global_grad_norm(1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((store.global_grad_norm() - 1.0).abs() < 1e-12);
        // Direction preserved.
        assert!((store.grad(id)[0] - 0.6).abs() < 1e-12);
        assert!((store.grad(id)[1] - 0.8).abs() < 1e-12);
    }
}
