//! Dense matrices, a reverse-mode autodiff tape, and the parameter store used
//! by the numerical branch and the fusion strategies.

mod graph;
mod matrix;
mod params;

pub mod gradcheck;

pub use graph::{AttnGroup, Gradients, Graph, Var};
pub use matrix::{dot, norm, Matrix};
pub use params::{normal_matrix, xavier, Adam, ParamId, ParamStore};
