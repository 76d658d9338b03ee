//! Common surface of learned and oracle eigen-expansions.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// A truncated Mercer expansion `κ(x, y) ≈ Σ_j μ_j ψ_j(x) ψ_j(y)ᵀ`.
pub trait Eigenfunctions {
    /// `μ_1, …, μ_k` in the order the functions are stored.
    fn eigenvalues(&self) -> &[f64];

    /// Output dimension of each eigenfunction (1 for scalar kernels).
    fn output_dim(&self) -> usize;

    /// `(|x|·N_out) × k` matrix whose column `j` is `ψ_j(x)`, sample-major.
    fn eigenfunction_values(&self, x: &Dataset) -> Result<Matrix>;

    fn num_eigenpairs(&self) -> usize {
        self.eigenvalues().len()
    }
}

/// `Σ_j μ_j ψ_j(x) ψ_j(y)ᵀ`, block-structured for matrix-valued kernels.
pub fn mercer_reconstruct<E: Eigenfunctions + ?Sized>(e: &E, x: &Dataset, y: &Dataset) -> Result<Matrix> {
    let px = e.eigenfunction_values(x)?;
    let py = if x == y {
        px.clone()
    } else {
        e.eigenfunction_values(y)?
    };
    let mu = e.eigenvalues();
    let weighted = Matrix::from_fn(px.rows(), px.cols(), |i, j| px[(i, j)] * mu[j]);
    weighted.matmul_transposed(&py)
}

/// `|⟨a, b⟩| / (‖a‖‖b‖)`: cosine similarity up to sign.
pub fn sign_corrected_alignment(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b).abs() / (na * nb)
}

/// `(1/n) Ψᵀ Ψ` for a `(n·N_out) × k` value matrix: the empirical
/// inner-product matrix of the eigenfunctions (identity when orthonormal).
pub fn empirical_inner_products(values: &Matrix, n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::invalid("no points"));
    }
    Ok(values.transpose().matmul(values)?.scale(1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_ignores_sign_and_scale() {
        assert!((sign_corrected_alignment(&[1.0, 2.0], &[-2.0, -4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(sign_corrected_alignment(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(sign_corrected_alignment(&[0.0, 0.0], &[0.0, 3.0]), 0.0);
    }
}
