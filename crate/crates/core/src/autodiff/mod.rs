//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it executes (a Wengert list); node
//! insertion order is therefore already a topological order, and
//! [`Graph::backward`] is a single reverse sweep over it. Values are dense
//! row-major [`Tensor`]s over a [`Real`] scalar — `f32` for training, `f64`
//! for gradient verification, selected by instantiating the same graph code
//! at a different element type.

mod check;
mod graph;
pub mod kernels;
mod tensor;

pub use check::{check_gradients, finite_diff_grad, registered_op_checks, GradCheckReport, OpCheck};
pub use graph::{GradMap, Graph, NodeId, PadMode, PadSpec, Padding};
pub use tensor::{Real, Tensor};

/// Row-major orthonormal 8-point DCT-II basis matrix.
pub fn dct8_basis_matrix() -> [f64; 64] {
    kernels::dct8_basis()
}
