//! Dense `f64` tensors with a reverse-mode autodiff tape.

mod dense;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;

pub use dense::Tensor;
pub use gradcheck::{finite_diff_check, GradCheck};
pub use graph::{Graph, Var};
pub use params::{fnv1a, mix, Init, ParamId, ParamSpec, ParamStore};
