//! Kernels and Gram-matrix construction.
//!
//! Closed-form kernels are evaluated directly. Network-induced kernels are
//! estimated by sampling: the NN-GP kernel averages output outer products
//! over prior draws, the empirical NTK averages outer products of
//! finite-difference directional derivatives along Rademacher probes, and
//! the trajectory kernel is the centered covariance of a list of output
//! snapshots.
//!
//! Matrix-valued kernels use a sample-major block layout: entry block
//! `(i, j)` of a Gram is the `N_out × N_out` matrix `κ(x_i, y_j)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{dot, Matrix};
use crate::net::{FeedForwardNet, NetArch, PriorSpec};
use crate::rng::{stream, Stream};

/// Tolerance for the symmetry/PSD check of user-supplied Grams.
const PRECOMPUTED_TOLERANCE: f64 = 1e-8;

/// Default finite-difference step for probe-based NTK estimation.
pub const DEFAULT_NTK_STEP: f64 = 1e-5;

fn one() -> usize {
    1
}

fn default_step() -> f64 {
    DEFAULT_NTK_STEP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `(xᵀy + offset)^degree`
    Polynomial { offset: f64, degree: u32 },
    /// `exp(−‖x − y‖² / (2·lengthscale_sq))`
    Rbf { lengthscale_sq: f64 },
    /// `xᵀy`
    Linear,
    /// Fixed Gram over a fixed point set; only those points may be queried.
    PrecomputedGram {
        gram: Matrix,
        points: Dataset,
        #[serde(default = "one")]
        output_dim: usize,
    },
    /// NN-GP kernel estimated from `samples` prior draws of a finite network.
    NngpMonteCarlo {
        arch: NetArch,
        #[serde(default)]
        prior: PriorSpec,
        samples: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Empirical NTK of `network` estimated from `probes` Rademacher probes.
    EmpiricalNtk {
        network: FeedForwardNet,
        probes: usize,
        #[serde(default = "default_step")]
        step: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Centered covariance of output snapshots `g(points, θ_i)`.
    TrajectoryCovariance { evals: Vec<Matrix>, points: Dataset },
}

impl KernelSpec {
    pub fn polynomial(offset: f64, degree: u32) -> Self {
        KernelSpec::Polynomial { offset, degree }
    }

    pub fn rbf(lengthscale_sq: f64) -> Self {
        KernelSpec::Rbf { lengthscale_sq }
    }

    /// Validates a precomputed Gram (square, symmetric, PSD within tolerance) on construction.
    pub fn precomputed(gram: Matrix, points: Dataset, output_dim: usize) -> Result<Self> {
        let spec = KernelSpec::PrecomputedGram {
            gram,
            points,
            output_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn output_dim(&self) -> usize {
        match self {
            KernelSpec::Polynomial { .. } | KernelSpec::Rbf { .. } | KernelSpec::Linear => 1,
            KernelSpec::PrecomputedGram { output_dim, .. } => *output_dim,
            KernelSpec::NngpMonteCarlo { arch, .. } => arch.output_dim(),
            KernelSpec::EmpiricalNtk { network, .. } => network.arch().output_dim(),
            KernelSpec::TrajectoryCovariance { evals, .. } => evals.first().map_or(1, Matrix::cols),
        }
    }

    /// Returns a copy whose sampling seed (if any) is replaced.
    pub fn with_seed(mut self, new_seed: u64) -> Self {
        match &mut self {
            KernelSpec::NngpMonteCarlo { seed, .. } | KernelSpec::EmpiricalNtk { seed, .. } => {
                *seed = new_seed
            }
            _ => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Polynomial { offset, degree } => {
                if !offset.is_finite() || *degree == 0 {
                    return Err(Error::invalid("polynomial kernel needs finite offset and degree ≥ 1"));
                }
            }
            KernelSpec::Rbf { lengthscale_sq } => {
                if !(*lengthscale_sq > 0.0 && lengthscale_sq.is_finite()) {
                    return Err(Error::invalid("RBF squared lengthscale must be positive"));
                }
            }
            KernelSpec::Linear => {}
            KernelSpec::PrecomputedGram {
                gram,
                points,
                output_dim,
            } => {
                let n = points.len() * output_dim;
                if *output_dim == 0 || gram.shape() != (n, n) {
                    return Err(Error::invalid(format!(
                        "precomputed Gram is {}x{}, expected {n}x{n}",
                        gram.rows(),
                        gram.cols()
                    )));
                }
                if gram.asymmetry() > PRECOMPUTED_TOLERANCE {
                    return Err(Error::invalid("precomputed Gram is not symmetric"));
                }
                if n > 0 {
                    let min = crate::linalg::sym_eigh(gram)?.values[n - 1];
                    if min < -PRECOMPUTED_TOLERANCE * gram.frobenius_norm().max(1.0) {
                        return Err(Error::invalid(format!(
                            "precomputed Gram is not PSD (smallest eigenvalue {min:e})"
                        )));
                    }
                }
            }
            KernelSpec::NngpMonteCarlo {
                arch,
                prior,
                samples,
                ..
            } => {
                arch.validate()?;
                prior.validate()?;
                if *samples == 0 {
                    return Err(Error::invalid("NN-GP estimator needs at least one sample"));
                }
            }
            KernelSpec::EmpiricalNtk { probes, step, .. } => {
                if *probes == 0 {
                    return Err(Error::invalid("NTK estimator needs at least one probe"));
                }
                if !(*step > 0.0) {
                    return Err(Error::invalid("finite-difference step must be positive"));
                }
            }
            KernelSpec::TrajectoryCovariance { evals, points } => {
                check_trajectory(evals)?;
                if evals[0].rows() != points.len() {
                    return Err(Error::invalid(format!(
                        "trajectory evals have {} rows for {} points",
                        evals[0].rows(),
                        points.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Gram matrix `κ(x, y)` of shape `(|x|·N_out) × (|y|·N_out)`.
pub fn gram(spec: &KernelSpec, x: &Dataset, y: &Dataset) -> Result<Matrix> {
    spec.validate()?;
    if x.dim() != y.dim() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    match spec {
        KernelSpec::Polynomial { offset, degree } => {
            let (o, d) = (*offset, *degree as i32);
            Ok(closed_form(x, y, |a, b| (dot(a, b) + o).powi(d)))
        }
        KernelSpec::Rbf { lengthscale_sq } => {
            let l2 = *lengthscale_sq;
            Ok(closed_form(x, y, |a, b| {
                let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
                (-d2 / (2.0 * l2)).exp()
            }))
        }
        KernelSpec::Linear => Ok(closed_form(x, y, dot)),
        KernelSpec::PrecomputedGram {
            gram,
            points,
            output_dim,
        } => {
            let rows = block_indices(points, x, *output_dim)?;
            let cols = block_indices(points, y, *output_dim)?;
            Ok(gram.select(&rows, &cols))
        }
        KernelSpec::NngpMonteCarlo {
            arch,
            prior,
            samples,
            seed,
        } => {
            let same = x == y;
            let feats = exec::map_range(*samples, |s| -> Result<(Vec<f64>, Vec<f64>)> {
                let mut rng = stream(*seed, Stream::Prior, s as u64);
                let net = FeedForwardNet::sample_prior(arch, prior, &mut rng)?;
                let fx = net.forward_eval(x.points())?.into_vec();
                let fy = if same {
                    Vec::new()
                } else {
                    net.forward_eval(y.points())?.into_vec()
                };
                Ok((fx, fy))
            });
            let (fx, fy) = unzip_features(feats)?;
            Ok(mean_outer(&fx, if same { None } else { Some(&fy) }))
        }
        KernelSpec::EmpiricalNtk {
            network,
            probes,
            step,
            seed,
        } => {
            let same = x == y;
            let base_x = network.forward_eval(x.points())?;
            let base_y = if same {
                base_x.clone()
            } else {
                network.forward_eval(y.points())?
            };
            let feats = exec::map_range(*probes, |s| -> Result<(Vec<f64>, Vec<f64>)> {
                let v = rademacher(network.num_params(), *seed, s as u64);
                let moved = network.perturbed(&v, *step)?;
                let dx = finite_difference(&moved.forward_eval(x.points())?, &base_x, *step);
                let dy = if same {
                    Vec::new()
                } else {
                    finite_difference(&moved.forward_eval(y.points())?, &base_y, *step)
                };
                Ok((dx, dy))
            });
            let (fx, fy) = unzip_features(feats)?;
            Ok(mean_outer(&fx, if same { None } else { Some(&fy) }))
        }
        KernelSpec::TrajectoryCovariance { evals, points } => {
            let n_out = evals[0].cols();
            let full = trajectory_gram(evals)?;
            let rows = block_indices(points, x, n_out)?;
            let cols = block_indices(points, y, n_out)?;
            Ok(full.select(&rows, &cols))
        }
    }
}

/// `(1/S) Σ_s g(x, θ_s) g(x, θ_s)ᵀ` with `θ_s` drawn from `prior`.
pub fn nngp_mc_gram(
    arch: &NetArch,
    prior: &PriorSpec,
    x: &Dataset,
    samples: usize,
    seed: u64,
) -> Result<Matrix> {
    let spec = KernelSpec::NngpMonteCarlo {
        arch: arch.clone(),
        prior: *prior,
        samples,
        seed,
    };
    gram(&spec, x, x)
}

/// Probe estimate `(1/S) Σ_s Δ_s Δ_sᵀ` of the empirical NTK, where
/// `Δ_s = (g(x, θ + ε v_s) − g(x, θ)) / ε` and `v_s` is Rademacher.
pub fn ntk_probe_gram(
    net: &FeedForwardNet,
    x: &Dataset,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<Matrix> {
    let spec = KernelSpec::EmpiricalNtk {
        network: net.clone(),
        probes,
        step,
        seed,
    };
    gram(&spec, x, x)
}

/// Exact empirical NTK `J Jᵀ` from explicitly assembled Jacobians.
pub fn ntk_exact_gram(net: &FeedForwardNet, x: &Dataset) -> Result<Matrix> {
    let jac = net.jacobian(x.points())?;
    let n = jac.rows();
    let mut k = Matrix::zeros(n, n);
    exec::fill_rows(k.as_mut_slice(), n, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = dot(jac.row(i), jac.row(j));
        }
    });
    Ok(k)
}

/// Centered covariance `(1/M) Σ_i (g_i − ḡ)(g_i − ḡ)ᵀ` of `M ≥ 2` output
/// snapshots, each `|X| × N_out`, flattened sample-major.
pub fn trajectory_gram(evals: &[Matrix]) -> Result<Matrix> {
    check_trajectory(evals)?;
    let m = evals.len();
    let len = evals[0].as_slice().len();
    let mut mean = vec![0.0; len];
    for e in evals {
        for (a, b) in mean.iter_mut().zip(e.as_slice()) {
            *a += b;
        }
    }
    for a in &mut mean {
        *a /= m as f64;
    }
    let centered: Vec<Vec<f64>> = evals
        .iter()
        .map(|e| e.as_slice().iter().zip(&mean).map(|(v, mu)| v - mu).collect())
        .collect();
    Ok(mean_outer(&centered, None))
}

fn check_trajectory(evals: &[Matrix]) -> Result<()> {
    if evals.len() < 2 {
        return Err(Error::invalid(format!(
            "trajectory covariance needs at least 2 snapshots, got {}",
            evals.len()
        )));
    }
    let shape = evals[0].shape();
    if evals.iter().any(|e| e.shape() != shape) {
        return Err(Error::invalid("trajectory snapshots have differing shapes"));
    }
    Ok(())
}

fn closed_form(x: &Dataset, y: &Dataset, k: impl Fn(&[f64], &[f64]) -> f64 + Sync + Send) -> Matrix {
    let (nx, ny) = (x.len(), y.len());
    let mut out = Matrix::zeros(nx, ny);
    exec::fill_rows(out.as_mut_slice(), ny, |i, row| {
        let xi = x.point(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = k(xi, y.point(j));
        }
    });
    out
}

/// Gram row/column indices of every block of `query` inside `points`.
fn block_indices(points: &Dataset, query: &Dataset, n_out: usize) -> Result<Vec<usize>> {
    let mut idx = Vec::with_capacity(query.len() * n_out);
    for q in 0..query.len() {
        let p = points.find(query.point(q)).ok_or_else(|| {
            Error::UnsupportedExtension(format!("query point {q} is not a stored training point"))
        })?;
        idx.extend((0..n_out).map(|o| p * n_out + o));
    }
    Ok(idx)
}

pub(crate) fn rademacher(len: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = stream(seed, Stream::Probes, index);
    (0..len)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

fn finite_difference(moved: &Matrix, base: &Matrix, step: f64) -> Vec<f64> {
    moved
        .as_slice()
        .iter()
        .zip(base.as_slice())
        .map(|(a, b)| (a - b) / step)
        .collect()
}

type FeaturePairs = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn unzip_features(feats: Vec<Result<(Vec<f64>, Vec<f64>)>>) -> Result<FeaturePairs> {
    let mut fx = Vec::with_capacity(feats.len());
    let mut fy = Vec::with_capacity(feats.len());
    for f in feats {
        let (a, b) = f?;
        fx.push(a);
        fy.push(b);
    }
    Ok((fx, fy))
}

/// `(1/S) Σ_s f_s g_sᵀ`, with `g = f` when `gy` is `None`. Each entry is a dot
/// product over `s` in index order, so the result does not depend on the
/// number of threads, and the symmetric case is exactly symmetric.
fn mean_outer(fx: &[Vec<f64>], gy: Option<&[Vec<f64>]>) -> Matrix {
    let s = fx.len();
    let transpose = |f: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let n = f.first().map_or(0, Vec::len);
        (0..n).map(|i| f.iter().map(|row| row[i]).collect()).collect()
    };
    let tx = transpose(fx);
    let ty = gy.map(transpose);
    let ty_ref = ty.as_ref().unwrap_or(&tx);
    let (nx, ny) = (tx.len(), ty_ref.len());
    let mut out = Matrix::zeros(nx, ny);
    let inv = 1.0 / s as f64;
    exec::fill_rows(out.as_mut_slice(), ny, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = dot(&tx[i], &ty_ref[j]) * inv;
        }
    });
    out
}
