//! Tape-based reverse-mode differentiation over tensor values.
//!
//! A [`Graph`] records tensor operations during a forward pass. Each
//! operation appends a node holding its output value; [`Graph::backward`]
//! then walks the tape in reverse, accumulating the partial derivative of
//! the loss into every node. Leaves created from a [`ParamStore`] remember
//! their parameter id so accumulated gradients can be flushed back with
//! [`Graph::accumulate_param_grads`].
//!
//! The op set is deliberately small: exactly what gated recurrent cells,
//! dense heads, and the training losses need. Inputs of an op are always
//! created before the op itself, so a single reverse sweep is a valid
//! topological order.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{RaemepcError, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<ParamId> },
    /// `w [m,n] * x [n] -> [m]`
    MatVec { w: Var, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    /// Contiguous slice of a vector.
    Slice { x: Var, start: usize },
    Concat(Var, Var),
    /// Stacks k vectors of length d into a `[k, d]` matrix.
    StackRows(Vec<Var>),
    /// `sum((a - b)^2)` over all elements, scalar output.
    SumSquaredDiff(Var, Var),
    /// Elementwise sum of same-shaped inputs.
    AddN(Vec<Var>),
    /// Scalar whose gradients w.r.t. its inputs were computed at forward
    /// time (used for losses with bespoke backward passes such as sDTW).
    PrecomputedScalar { inputs: Vec<(Var, Vec<f64>)> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The recording tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all recorded nodes so the graph can record a fresh pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Result<&[f64]> {
        if !self.backward_done {
            return Err(RaemepcError::GraphState(
                "gradient requested before backward".into(),
            ));
        }
        Ok(&self.grads[v.0])
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf with no parameter attached; gradients are still computed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// A leaf bound to a parameter; its value is copied from the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.push(value, Op::Leaf { param: Some(id) })
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (wm, xv) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        let (m, n) = (wm.rows(), wm.cols());
        assert_eq!(n, xv.len(), "matvec: {}x{} with vector {}", m, n, xv.len());
        let wd = wm.data();
        let xd = xv.data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * xd[j];
            }
            out[i] = acc;
        }
        self.push(Tensor::vector(out), Op::MatVec { w, x })
    }

    fn zip_shapes(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "{}: shape mismatch",
            what
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_shapes(a, b, "add");
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_shapes(a, b, "sub");
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_shapes(a, b, "mul");
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].value.data().iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Scale(x, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| stable_sigmoid(v))
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].value.data().iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Tanh(x))
    }

    /// Slice `[start, start+len)` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xd = &self.nodes[x.0].value;
        assert!(start + len <= xd.len(), "slice out of range");
        let out = xd.data()[start..start + len].to_vec();
        self.push(Tensor::vector(out), Op::Slice { x, start })
    }

    /// Concatenates two vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.nodes[a.0].value.data().to_vec();
        out.extend_from_slice(self.nodes[b.0].value.data());
        self.push(Tensor::vector(out), Op::Concat(a, b))
    }

    /// Stacks vectors of equal length into a matrix, one row per input.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows: empty input");
        let d = self.nodes[rows[0].0].value.len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let v = self.nodes[r.0].value.data();
            assert_eq!(v.len(), d, "stack_rows: ragged rows");
            out.extend_from_slice(v);
        }
        self.push(
            Tensor::matrix(rows.len(), d, out).unwrap(),
            Op::StackRows(rows.to_vec()),
        )
    }

    /// `sum((a-b)^2)` over all elements; the squared-error workhorse.
    pub fn sum_squared_diff(&mut self, a: Var, b: Var) -> Var {
        self.zip_shapes(a, b, "sum_squared_diff");
        let s: f64 = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s), Op::SumSquaredDiff(a, b))
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n: empty input");
        let shape = self.nodes[xs[0].0].value.shape().to_vec();
        let mut out = vec![0.0; self.nodes[xs[0].0].value.len()];
        for x in xs {
            let v = &self.nodes[x.0].value;
            assert_eq!(v.shape(), shape.as_slice(), "add_n: shape mismatch");
            for (o, s) in out.iter_mut().zip(v.data()) {
                *o += s;
            }
        }
        self.push(Tensor::new(shape, out).unwrap(), Op::AddN(xs.to_vec()))
    }

    /// Registers a scalar whose input gradients were already computed.
    /// Each entry pairs an input with d(out)/d(input), flattened.
    pub fn precomputed_scalar(&mut self, value: f64, inputs: Vec<(Var, Vec<f64>)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(
                self.nodes[v.0].value.len(),
                g.len(),
                "precomputed_scalar: gradient length mismatch"
            );
        }
        self.push(Tensor::scalar(value), Op::PrecomputedScalar { inputs })
    }

    /// True when every node value is finite.
    pub fn all_values_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.all_finite())
    }

    /// True when every accumulated gradient is finite.
    pub fn all_grads_finite(&self) -> bool {
        self.grads
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Reverse sweep from a scalar loss node. Seeds d(loss)/d(loss) = 1 and
    /// accumulates gradients into every node on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(RaemepcError::GraphState("backward on empty graph".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(RaemepcError::Shape(format!(
                "backward target must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(RaemepcError::Numerical(format!(
                "backward on non-finite loss {}",
                lv.item()
            )));
        }

        self.grads.clear();
        self.grads
            .extend(self.nodes.iter().map(|n| vec![0.0; n.value.len()]));
        self.grads[loss.0][0] = 1.0;
        self.backward_done = true;

        for i in (0..self.nodes.len()).rev() {
            // Take this node's gradient out so the borrow checker lets us
            // write into earlier nodes' gradients.
            let g = std::mem::take(&mut self.grads[i]);
            if g.iter().all(|&v| v == 0.0) {
                self.grads[i] = g;
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::MatVec { w, x } => {
                    let (wm, xv) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
                    let (m, n) = (wm.rows(), wm.cols());
                    let wd = wm.data();
                    let xd = xv.data();
                    // Split per-destination to appease the borrow checker:
                    // gradients live in self.grads, values in self.nodes.
                    {
                        let gw = &mut self.grads[w.0];
                        for r in 0..m {
                            let gr = g[r];
                            if gr == 0.0 {
                                continue;
                            }
                            let row = &mut gw[r * n..(r + 1) * n];
                            for j in 0..n {
                                row[j] += gr * xd[j];
                            }
                        }
                    }
                    {
                        let gx = &mut self.grads[x.0];
                        for r in 0..m {
                            let gr = g[r];
                            if gr == 0.0 {
                                continue;
                            }
                            let row = &wd[r * n..(r + 1) * n];
                            for j in 0..n {
                                gx[j] += gr * row[j];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    axpy(&mut self.grads[a.0], &g, 1.0);
                    axpy(&mut self.grads[b.0], &g, 1.0);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    axpy(&mut self.grads[a.0], &g, 1.0);
                    axpy(&mut self.grads[b.0], &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    {
                        let bv = self.nodes[b.0].value.data();
                        let ga = &mut self.grads[a.0];
                        for k in 0..g.len() {
                            ga[k] += g[k] * bv[k];
                        }
                    }
                    {
                        let av = self.nodes[a.0].value.data();
                        let gb = &mut self.grads[b.0];
                        for k in 0..g.len() {
                            gb[k] += g[k] * av[k];
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    axpy(&mut self.grads[x.0], &g, c);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let y = self.nodes[i].value.data();
                    let gx = &mut self.grads[x.0];
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let y = self.nodes[i].value.data();
                    let gx = &mut self.grads[x.0];
                    for k in 0..g.len() {
                        gx[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Slice { x, start } => {
                    let (x, start) = (*x, *start);
                    let gx = &mut self.grads[x.0];
                    for k in 0..g.len() {
                        gx[start + k] += g[k];
                    }
                }
                Op::Concat(a, b) => {
                    let (a, b) = (*a, *b);
                    let la = self.nodes[a.0].value.len();
                    axpy(&mut self.grads[a.0], &g[..la], 1.0);
                    axpy(&mut self.grads[b.0], &g[la..], 1.0);
                }
                Op::StackRows(rows) => {
                    let rows = rows.clone();
                    let d = self.nodes[rows[0].0].value.len();
                    for (r, var) in rows.iter().enumerate() {
                        axpy(&mut self.grads[var.0], &g[r * d..(r + 1) * d], 1.0);
                    }
                }
                Op::SumSquaredDiff(a, b) => {
                    let (a, b) = (*a, *b);
                    let g0 = g[0];
                    {
                        let av = self.nodes[a.0].value.data();
                        let bv = self.nodes[b.0].value.data();
                        let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| x - y).collect();
                        let ga = &mut self.grads[a.0];
                        for k in 0..diff.len() {
                            ga[k] += 2.0 * g0 * diff[k];
                        }
                        let gb = &mut self.grads[b.0];
                        for k in 0..diff.len() {
                            gb[k] -= 2.0 * g0 * diff[k];
                        }
                    }
                }
                Op::AddN(xs) => {
                    let xs = xs.clone();
                    for x in xs {
                        axpy(&mut self.grads[x.0], &g, 1.0);
                    }
                }
                Op::PrecomputedScalar { inputs } => {
                    let inputs: Vec<(Var, Vec<f64>)> = inputs.clone();
                    let g0 = g[0];
                    for (v, dg) in inputs {
                        axpy_scaled(&mut self.grads[v.0], &dg, g0);
                    }
                }
            }
            self.grads[i] = g;
        }
        Ok(())
    }

    /// Adds this graph's leaf gradients into the parameter store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(RaemepcError::GraphState(
                "accumulate_param_grads before backward".into(),
            ));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                store.add_grad(id, &self.grads[i])?;
            }
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn axpy_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    axpy(dst, src, c)
}

/// Overflow-safe logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
