//! Dense real linear algebra: matrices, symmetric eigendecomposition, SPD solves.

mod cholesky;
mod eigh;
mod matrix;

pub use cholesky::{spd_solve, Cholesky};
pub use eigh::{sym_eigh, sym_eigh_topk, EigenPairs, SYMMETRY_TOLERANCE};
pub use matrix::{dot, norm, Matrix};
