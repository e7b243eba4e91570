//! Minimal differentiable compute core: a flat autodiff tape over dense
//! f64 tensors, a named parameter store with Adam, binary checkpoints, and
//! finite-difference gradient verification.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use gradcheck::{backprop_gradients, finite_diff, grad_check, relative_error};
pub use graph::{Grad, Gradients, Graph, Var};
pub use params::{AdamConfig, ParamStore};
pub use tensor::{gemm, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {what}")]
    ShapeMismatch { what: String },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("unknown parameter {name}")]
    UnknownParam { name: String },
    #[error("duplicate parameter {name}")]
    DuplicateParam { name: String },
    #[error("missing gradient for parameter {name}")]
    MissingGradient { name: String },
    #[error("loss is not deterministic: {first} vs {second}")]
    NonDeterministicLoss { first: f64, second: f64 },
    #[error("numerical overflow in {0}")]
    NumericalOverflow(String),
}

/// Symmetric Chamfer value with the exact-search strategy optionally
/// pinned (`Some(false)` brute force, `Some(true)` kd-tree).
pub fn chamfer_value(xs: &[[f64; 3]], ts: &[[f64; 3]], force_kd: Option<bool>) -> f64 {
    graph::chamfer_parts_forced(xs, ts, force_kd).0
}

/// Applies the gradients collected on a graph's parameter leaves to the
/// store's accumulators.
pub fn accumulate_param_grads(
    graph: &Graph,
    grads: &Gradients,
    store: &mut ParamStore,
) -> Result<(), NnError> {
    for (name, var) in graph.param_vars() {
        store.accumulate_grad(name, &grads.dense(graph, var))?;
    }
    Ok(())
}
