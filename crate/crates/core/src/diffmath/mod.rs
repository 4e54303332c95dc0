//! Differentiable numerical core: dense matrices, a recording tape for
//! reverse-mode gradients, thin SVD, Adam and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
pub mod rng;
mod svd;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport, RELATIVE_FLOOR};
pub use graph::{softmax_rows, BackwardFn, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use svd::{singular_values, svd, SvdResult, CONVERGENCE_TOL, MAX_SWEEPS};
pub use tensor::Tensor;
