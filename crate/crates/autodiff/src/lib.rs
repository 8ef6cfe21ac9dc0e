//! Minimal dense-tensor computation with reverse-mode differentiation.
//!
//! The operation set is deliberately small: elementwise arithmetic, matrix
//! products, ReLU, softmax / log-softmax / L1 normalization along an axis,
//! row gather and scatter-add, reductions, concatenation and reshape. Shapes
//! must match exactly; the only broadcast is a bias added along the last axis.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod params;
mod session;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Precision, Var};
pub use params::{Linear, Mlp2, ParamId, ParamStore};
pub use session::{SelectionTape, Session};
pub use tensor::Tensor;

/// Evaluates `x · Wᵀ + b` for a standalone weight/bias pair.
pub fn linear_forward(weight: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (w, b, x) = (g.constant(weight.clone()), g.constant(bias.clone()), g.constant(x.clone()));
    let y = g.linear(x, w, b)?;
    Ok(g.value(y).clone())
}
