//! Recurrent gated cells and dense layers on top of the graph.
//!
//! Weight layout for the gated cell packs the four gates along the first
//! axis in the order input, forget, candidate, output:
//!
//! - `w_x`: `[4h, d]`, applied to the step input
//! - `w_h`: `[4h, h]`, applied to the previous hidden state
//! - `bias`: `[4h]`
//!
//! The forget-gate bias section starts at 1.0; the rest of the weights are
//! drawn uniformly from `(-1/sqrt(h), 1/sqrt(h))` (dense layers use
//! `1/sqrt(in_dim)`).

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{RaemepcError, Result};

/// Parameters of one standard long short-term memory cell.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(input_dim > 0 && hidden_dim > 0);
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let w_x = store.add(
            format!("{prefix}.w_x"),
            uniform_tensor(vec![4 * hidden_dim, input_dim], bound, rng),
        );
        let w_h = store.add(
            format!("{prefix}.w_h"),
            uniform_tensor(vec![4 * hidden_dim, hidden_dim], bound, rng),
        );
        let mut b = uniform_tensor(vec![4 * hidden_dim], bound, rng);
        // Forget gate bias starts at 1.0.
        for v in &mut b.data_mut()[hidden_dim..2 * hidden_dim] {
            *v = 1.0;
        }
        let bias = store.add(format!("{prefix}.bias"), b);
        Self {
            input_dim,
            hidden_dim,
            w_x,
            w_h,
            bias,
        }
    }

    /// Creates the graph leaves for this cell's parameters, to be reused by
    /// every step recorded on `g`.
    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundLstm {
        BoundLstm {
            w_x: g.param(store, self.w_x),
            w_h: g.param(store, self.w_h),
            bias: g.param(store, self.bias),
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

/// An [`LstmCell`] bound to one graph.
pub struct BoundLstm {
    w_x: Var,
    w_h: Var,
    bias: Var,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl BoundLstm {
    /// One recurrence step: returns the new hidden and cell states.
    pub fn step(&self, g: &mut Graph, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let h = self.hidden_dim;
        if g.value(x).len() != self.input_dim {
            return Err(RaemepcError::Shape(format!(
                "cell input has length {}, expected {}",
                g.value(x).len(),
                self.input_dim
            )));
        }
        if g.value(h_prev).len() != h || g.value(c_prev).len() != h {
            return Err(RaemepcError::Shape(format!(
                "cell state has length {}/{}, expected {}",
                g.value(h_prev).len(),
                g.value(c_prev).len(),
                h
            )));
        }
        let from_x = g.matvec(self.w_x, x);
        let from_h = g.matvec(self.w_h, h_prev);
        let pre = g.add(from_x, from_h);
        let pre = g.add(pre, self.bias);

        let i_pre = g.slice(pre, 0, h);
        let f_pre = g.slice(pre, h, h);
        let g_pre = g.slice(pre, 2 * h, h);
        let o_pre = g.slice(pre, 3 * h, h);
        let i_gate = g.sigmoid(i_pre);
        let f_gate = g.sigmoid(f_pre);
        let g_gate = g.tanh(g_pre);
        let o_gate = g.sigmoid(o_pre);

        let keep = g.mul(f_gate, c_prev);
        let write = g.mul(i_gate, g_gate);
        let c = g.add(keep, write);
        let c_act = g.tanh(c);
        let h_new = g.mul(o_gate, c_act);
        Ok((h_new, c))
    }
}

/// Parameters of a dense layer `y = W x + b` (no activation; the heads of
/// this model emit unbounded values).
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(in_dim > 0 && out_dim > 0);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(
            format!("{prefix}.w"),
            uniform_tensor(vec![out_dim, in_dim], bound, rng),
        );
        let b = store.add(
            format!("{prefix}.b"),
            uniform_tensor(vec![out_dim], bound, rng),
        );
        Self {
            in_dim,
            out_dim,
            w,
            b,
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundDense {
        BoundDense {
            w: g.param(store, self.w),
            b: g.param(store, self.b),
            in_dim: self.in_dim,
        }
    }
}

/// A [`DenseLayer`] bound to one graph.
pub struct BoundDense {
    w: Var,
    b: Var,
    in_dim: usize,
}

impl BoundDense {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.value(x).len() != self.in_dim {
            return Err(RaemepcError::Shape(format!(
                "dense input has length {}, expected {}",
                g.value(x).len(),
                self.in_dim
            )));
        }
        let wx = g.matvec(self.w, x);
        Ok(g.add(wx, self.b))
    }
}

fn uniform_tensor<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::stable_sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn zeroed_cell(store: &mut ParamStore, d: usize, h: usize) -> LstmCell {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let cell = LstmCell::new(store, "cell", d, h, &mut rng);
        for id in [cell.w_x, cell.w_h, cell.bias] {
            store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        cell
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let mut store = ParamStore::new();
        let cell = zeroed_cell(&mut store, 3, 2);
        let mut g = Graph::new();
        let bound = cell.bind(&mut g, &store);
        let x = g.constant(Tensor::vector(vec![5.0, -1.0, 2.0]));
        let h0 = g.constant(Tensor::zeros(vec![2]));
        let c0 = g.constant(Tensor::zeros(vec![2]));
        let (h, c) = bound.step(&mut g, x, h0, c0).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 0.0]);
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_step_matches_hand_calculation() {
        // hidden_dim = 1, input_dim = 1, hand-set weights. Gate order is
        // [input, forget, candidate, output].
        let mut store = ParamStore::new();
        let cell = zeroed_cell(&mut store, 1, 1);
        store.value_mut(cell.w_x).data_mut().copy_from_slice(&[0.5, -0.3, 0.8, 0.2]);
        store.value_mut(cell.w_h).data_mut().copy_from_slice(&[0.1, 0.4, -0.6, 0.7]);
        store.value_mut(cell.bias).data_mut().copy_from_slice(&[0.05, 1.0, -0.1, 0.3]);

        let (x, h_prev, c_prev) = (0.7, -0.2, 0.4);
        let mut g = Graph::new();
        let bound = cell.bind(&mut g, &store);
        let xv = g.constant(Tensor::vector(vec![x]));
        let hv = g.constant(Tensor::vector(vec![h_prev]));
        let cv = g.constant(Tensor::vector(vec![c_prev]));
        let (h, c) = bound.step(&mut g, xv, hv, cv).unwrap();

        // Hand evaluation of the four gate equations.
        let i = stable_sigmoid(0.5 * x + 0.1 * h_prev + 0.05);
        let f = stable_sigmoid(-0.3 * x + 0.4 * h_prev + 1.0);
        let cand = (0.8 * x + -0.6 * h_prev + -0.1).tanh();
        let o = stable_sigmoid(0.2 * x + 0.7 * h_prev + 0.3);
        let c_exp = f * c_prev + i * cand;
        let h_exp = o * c_exp.tanh();

        assert!((g.value(c).data()[0] - c_exp).abs() < 1e-15);
        assert!((g.value(h).data()[0] - h_exp).abs() < 1e-15);
    }

    #[test]
    fn hidden_state_is_bounded_by_tanh() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "cell", 4, 6, &mut rng);
        let mut g = Graph::new();
        let bound = cell.bind(&mut g, &store);
        let x = g.constant(Tensor::vector(vec![10.0, -10.0, 3.0, 100.0]));
        let h0 = g.constant(Tensor::vector(vec![0.9; 6]));
        let c0 = g.constant(Tensor::vector(vec![-5.0; 6]));
        let (h, _) = bound.step(&mut g, x, h0, c0).unwrap();
        assert!(g.value(h).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn dense_identity_and_bias_cases() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, "d", 2, 2, &mut rng);
        store
            .value_mut(layer.w)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        store.value_mut(layer.b).data_mut().copy_from_slice(&[0.0, 0.0]);
        let mut g = Graph::new();
        let bound = layer.bind(&mut g, &store);
        let x = g.constant(Tensor::vector(vec![3.5, -1.25]));
        let y = bound.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.5, -1.25]);

        store.value_mut(layer.w).data_mut().copy_from_slice(&[0.0; 4]);
        store.value_mut(layer.b).data_mut().copy_from_slice(&[0.7, -0.2]);
        let mut g = Graph::new();
        let bound = layer.bind(&mut g, &store);
        let x = g.constant(Tensor::vector(vec![9.0, 9.0]));
        let y = bound.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.7, -0.2]);
    }

    #[test]
    fn dense_matches_hand_matrix_product() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, "d", 2, 3, &mut rng);
        store
            .value_mut(layer.w)
            .data_mut()
            .copy_from_slice(&[1.0, -2.0, 0.5, 0.25, -1.5, 3.0]);
        store
            .value_mut(layer.b)
            .data_mut()
            .copy_from_slice(&[0.1, 0.2, 0.3]);
        let mut g = Graph::new();
        let bound = layer.bind(&mut g, &store);
        let x = g.constant(Tensor::vector(vec![2.0, -1.0]));
        let y = bound.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[4.1, 0.95, -5.7]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "cell", 2, 3, &mut rng);
        let mut g = Graph::new();
        let bound = cell.bind(&mut g, &store);
        let x = g.constant(Tensor::vector(vec![1.0; 5]));
        let h0 = g.constant(Tensor::zeros(vec![3]));
        let c0 = g.constant(Tensor::zeros(vec![3]));
        assert!(bound.step(&mut g, x, h0, c0).is_err());
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "cell", 2, 3, &mut rng);
        let b = store.value(cell.bias).data();
        assert_eq!(&b[3..6], &[1.0, 1.0, 1.0]);
        // Non-forget sections stay within the init bound.
        let bound = 1.0 / (3f64).sqrt();
        assert!(b[..3].iter().chain(&b[6..]).all(|v| v.abs() < bound));
    }
}
