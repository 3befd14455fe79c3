//! Minimal differentiable computation layer: a tape over 2-D tensors, a
//! fused GRU kernel, parameter storage, Adam, and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod params;

pub use adam::{AdamConfig, AdamState, RowMask};
pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, GradMap, Param, ParameterSet};

use crate::error::Result;
use crate::tensor::Tensor;

/// Unit-length copy of a single vector, as a differentiable op.
pub fn l2_normalize(g: &mut Graph, v: Var) -> Result<Var> {
    g.normalize_rows(v)
}

/// Plain (non-graph) unit normalization of a `1 × D` tensor.
pub fn l2_normalize_tensor(v: &Tensor) -> Result<Tensor> {
    Ok(Tensor::row_vector(crate::tensor::normalized(v.data())?))
}

/// `x·W + b`.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}
