//! Dense tensors, differentiable computation graphs and gradient checking.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, InputCheck};
pub use graph::{Bindings, Gradients, Graph, NodeId, Values};
pub use tensor::Tensor;

/// Slope of the leaky rectifier for negative inputs.
pub const LEAKY_SLOPE: f64 = 0.01;

use crate::error::Result;

/// Builds a throwaway graph from constants and returns its scalar output.
pub fn evaluate(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    g.set_output(out);
    g.eval_output(&Bindings::new())
}

/// Builds a throwaway graph from constants and returns the value of the
/// node produced by `build`.
pub fn evaluate_tensor(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    let values = g.forward(&Bindings::new())?;
    Ok(values.get(out).clone())
}
