//! Minimal differentiable-computation substrate: tensors, a recording
//! graph with reverse-mode gradients, gated recurrent cells, dense layers,
//! and the Adam update rule. Everything above this module is expressed in
//! these primitives.

pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{stable_sigmoid, Graph, Var};
pub use layers::{BoundDense, BoundLstm, DenseLayer, LstmCell};
pub use params::{AdamState, ParamId, ParamStore};
pub use tensor::Tensor;
