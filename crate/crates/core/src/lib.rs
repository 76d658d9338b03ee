//! Neural eigenfunctions for positive-definite kernels.
//!
//! The crate learns the top-k eigenfunctions of a kernel with k small
//! networks trained under an asymmetric, EigenGame-style objective, checks
//! them against a Nyström oracle, and uses them to build cheap linearised
//! Laplace posteriors from empirical neural tangent kernels.
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`linalg`] | dense matrices, symmetric eigensolver, SPD solves |
//! | [`kernels`] | closed-form and sample-estimated Gram matrices |
//! | [`net`] | MLPs with a terminal L2BN layer, reverse-mode gradients, Adam |
//! | [`neuralef`] | the eigenfunction training engine |
//! | [`nystrom`] | Nyström eigendecomposition and out-of-sample extension |
//! | [`lla`] | linearised Laplace posteriors on top of learned eigenfunctions |
//! | [`data`] | datasets and synthetic generators |
//! | [`io`] | model persistence and CSV output |
//!
//! With the default `parallel` feature, Monte-Carlo estimators and the k
//! networks run on the rayon pool. Results are bit-identical with the
//! feature disabled.

pub mod cli;
pub mod data;
pub mod eigen;
pub mod error;
pub mod exec;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod lla;
pub mod net;
pub mod neuralef;
pub mod nystrom;
pub mod rng;

pub use data::Dataset;
pub use error::{Error, Result};
pub use kernels::KernelSpec;
pub use linalg::Matrix;
