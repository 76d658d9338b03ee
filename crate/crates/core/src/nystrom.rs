//! Nyström eigendecomposition of a training Gram and its out-of-sample extension.
//!
//! With `K = κ(X, X)` eigendecomposed as `K u_j = λ_j u_j`, the empirical
//! eigenfunctions are `μ̂_j = λ_j / N` and `ψ̂_j(x_n) = √N u_{j,n}`, and a new
//! point is mapped by `ψ̂_j(x) = Σ_n κ(x, x_n) ψ̂_j(x_n) / (N μ̂_j)`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::eigen::Eigenfunctions;
use crate::error::{Error, Result};
use crate::kernels::{gram, KernelSpec};
use crate::linalg::{sym_eigh_topk, Matrix};

/// Relative eigenvalue floor below which extension is refused.
pub const EXTENSION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NystromModel {
    pub mu_hat: Vec<f64>,
    /// `(N·N_out) × k`; column `j` holds `ψ̂_j` at the training points.
    pub train_values: Matrix,
    pub points: Dataset,
    pub kernel_spec: KernelSpec,
}

pub fn nystrom_fit(spec: &KernelSpec, x_tr: &Dataset, k: usize) -> Result<NystromModel> {
    let gram_tr = gram(spec, x_tr, x_tr)?;
    nystrom_fit_with_gram(spec, x_tr, &gram_tr, k)
}

/// As [`nystrom_fit`], with the training Gram supplied by the caller.
pub fn nystrom_fit_with_gram(
    spec: &KernelSpec,
    x_tr: &Dataset,
    gram_tr: &Matrix,
    k: usize,
) -> Result<NystromModel> {
    let n = x_tr.len();
    let dim = n * spec.output_dim();
    if gram_tr.shape() != (dim, dim) {
        return Err(Error::invalid(format!(
            "training Gram is {:?}, expected {dim}x{dim}",
            gram_tr.shape()
        )));
    }
    if k == 0 || k > dim {
        return Err(Error::invalid(format!("k must lie in 1..={dim}, got {k}")));
    }
    let eig = sym_eigh_topk(gram_tr, k)?;
    let nf = n as f64;
    Ok(NystromModel {
        mu_hat: eig.values.iter().map(|l| l / nf).collect(),
        train_values: eig.vectors.scale(nf.sqrt()),
        points: x_tr.clone(),
        kernel_spec: spec.clone(),
    })
}

/// Out-of-sample values, `(|x|·N_out) × k`.
pub fn nystrom_extend(model: &NystromModel, x: &Dataset) -> Result<Matrix> {
    let top = model.mu_hat.first().copied().unwrap_or(0.0);
    for (j, &mu) in model.mu_hat.iter().enumerate() {
        if !(mu > EXTENSION_FLOOR * top) {
            return Err(Error::IllConditioned(format!(
                "eigenvalue {j} ({mu:e}) is below {EXTENSION_FLOOR:e} of the leading one; refusing to extend"
            )));
        }
    }
    let cross = gram(&model.kernel_spec, x, &model.points)?;
    let n = model.points.len() as f64;
    let mut out = cross.matmul(&model.train_values)?;
    for r in 0..out.rows() {
        for (v, mu) in out.row_mut(r).iter_mut().zip(&model.mu_hat) {
            *v /= n * mu;
        }
    }
    Ok(out)
}

impl NystromModel {
    pub fn k(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn extend(&self, x: &Dataset) -> Result<Matrix> {
        nystrom_extend(self, x)
    }

    pub fn reconstruct(&self, x: &Dataset, y: &Dataset) -> Result<Matrix> {
        crate::eigen::mercer_reconstruct(self, x, y)
    }
}

impl Eigenfunctions for NystromModel {
    fn eigenvalues(&self) -> &[f64] {
        &self.mu_hat
    }

    fn output_dim(&self) -> usize {
        self.kernel_spec.output_dim()
    }

    /// Stored values at training points, the extension formula elsewhere.
    fn eigenfunction_values(&self, x: &Dataset) -> Result<Matrix> {
        let n_out = self.output_dim();
        let k = self.k();
        let mut out = Matrix::zeros(x.len() * n_out, k);
        let mut missing = Vec::new();
        for i in 0..x.len() {
            match self.points.find(x.point(i)) {
                Some(p) => {
                    for o in 0..n_out {
                        out.row_mut(i * n_out + o)
                            .copy_from_slice(self.train_values.row(p * n_out + o));
                    }
                }
                None => missing.push(i),
            }
        }
        if !missing.is_empty() {
            let ext = nystrom_extend(self, &x.subset(&missing))?;
            for (m, &i) in missing.iter().enumerate() {
                for o in 0..n_out {
                    out.row_mut(i * n_out + o).copy_from_slice(ext.row(m * n_out + o));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigen::empirical_inner_products;

    #[test]
    fn diagonal_gram() {
        let pts = Dataset::from_scalars(&[0.0, 1.0]);
        let spec = KernelSpec::precomputed(Matrix::from_diag(&[2.0, 1.0]), pts.clone(), 1).unwrap();
        let m = nystrom_fit(&spec, &pts, 2).unwrap();
        assert!((m.mu_hat[0] - 1.0).abs() < 1e-15 && (m.mu_hat[1] - 0.5).abs() < 1e-15);
        let s2 = 2f64.sqrt();
        assert!((m.train_values[(0, 0)].abs() - s2).abs() < 1e-14);
        assert!((m.train_values[(1, 1)].abs() - s2).abs() < 1e-14);
        assert!(m.train_values[(1, 0)].abs() < 1e-14);
    }

    #[test]
    fn isotropic_gram() {
        let pts = Dataset::from_scalars(&[0.0, 1.0, 2.0, 3.0]);
        let spec = KernelSpec::precomputed(Matrix::identity(4).scale(3.0), pts.clone(), 1).unwrap();
        let m = nystrom_fit(&spec, &pts, 4).unwrap();
        assert!(m.mu_hat.iter().all(|&v| (v - 0.75).abs() < 1e-14));
    }

    #[test]
    fn extension_is_a_fixed_point_at_training_points() {
        let pts = Dataset::from_scalars(&[-1.0, -0.3, 0.2, 0.9, 1.4]);
        let spec = KernelSpec::rbf(1.0);
        let m = nystrom_fit(&spec, &pts, 3).unwrap();
        let ext = nystrom_extend(&m, &pts).unwrap();
        assert!(ext.sub(&m.train_values).unwrap().max_abs() < 1e-10);
        let ip = empirical_inner_products(&m.train_values, 5).unwrap();
        assert!(ip.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn rank_one_extension_formula() {
        let pts = Dataset::from_scalars(&[1.0, 2.0, -0.5]);
        let spec = KernelSpec::Linear;
        let m = nystrom_fit(&spec, &pts, 1).unwrap();
        let y = Dataset::from_scalars(&[0.7]);
        let ext = nystrom_extend(&m, &y).unwrap();
        let mut s = 0.0;
        for n in 0..3 {
            s += 0.7 * pts.point(n)[0] * m.train_values[(n, 0)];
        }
        assert!((ext[(0, 0)] - s / (3.0 * m.mu_hat[0])).abs() < 1e-14);
    }

    #[test]
    fn near_null_extension_is_refused() {
        let pts = Dataset::from_scalars(&[1.0, 2.0]);
        let m = nystrom_fit(&KernelSpec::Linear, &pts, 2).unwrap();
        assert!(matches!(
            nystrom_extend(&m, &Dataset::from_scalars(&[0.5])),
            Err(Error::IllConditioned(_))
        ));
        // but lookup at training points still works
        assert!(m.eigenfunction_values(&pts).is_ok());
    }

    #[test]
    fn k_out_of_range() {
        let pts = Dataset::from_scalars(&[1.0, 2.0]);
        assert!(nystrom_fit(&KernelSpec::Linear, &pts, 3).is_err());
        assert!(nystrom_fit(&KernelSpec::Linear, &pts, 0).is_err());
    }
}
