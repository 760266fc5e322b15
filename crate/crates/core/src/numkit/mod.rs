//! Dense linear algebra and deterministic randomness.

mod eig;
mod matrix;
mod rng;

pub use eig::{gram, quad_form, spd_solve, sym_eig, sym_expm_action, SymEig, SYMMETRY_TOL};
pub(crate) use eig::symmetrize;
pub use matrix::{axpy, dot, norm, norm_sq, Matrix};
pub(crate) use matrix::{gemm, View};
pub use rng::Rng;
