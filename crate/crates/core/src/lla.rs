//! Linearised Laplace approximation from truncated NTK eigenfunctions.
//!
//! Linearising a trained network around `θ_MAP` gives a Gaussian-process
//! posterior whose covariance involves the `dim(θ) × dim(θ)` Gauss–Newton
//! matrix. Replacing the Jacobian inner products by the eigen-expansion
//! `Ψ̃(x) = [√μ̂_1 ψ̂_1(x), …, √μ̂_k ψ̂_k(x)]` of the NTK and applying the
//! Woodbury identity reduces the problem to a `k × k` precision
//!
//! ```text
//! P = Σ_i Ψ̃(x_i)ᵀ Λ_i Ψ̃(x_i) + I / σ₀²,    cov(x, y) = Ψ̃(x) P⁻¹ Ψ̃(y)ᵀ
//! ```
//!
//! with `Λ_i` the output-space Hessian of the negative log-likelihood.

use log::warn;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::eigen::Eigenfunctions;
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{spd_solve, sym_eigh, Cholesky, Matrix};
use crate::net::{adam_step, AdamState, FeedForwardNet, NetArch};
use crate::neuralef::NeuralEfModel;
use crate::nystrom::NystromModel;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LikelihoodSpec {
    Categorical,
    GaussianRegression { noise_variance: f64 },
}

impl LikelihoodSpec {
    pub fn validate(&self) -> Result<()> {
        if let LikelihoodSpec::GaussianRegression { noise_variance } = self {
            if !(*noise_variance > 0.0) {
                return Err(Error::invalid("Gaussian noise variance must be positive"));
            }
        }
        Ok(())
    }
}

/// Either kind of eigen-expansion, so posteriors can be persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EigenModel {
    Neuralef(NeuralEfModel),
    Nystrom(NystromModel),
}

impl Eigenfunctions for EigenModel {
    fn eigenvalues(&self) -> &[f64] {
        match self {
            EigenModel::Neuralef(m) => m.eigenvalues(),
            EigenModel::Nystrom(m) => m.eigenvalues(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            EigenModel::Neuralef(m) => m.output_dim(),
            EigenModel::Nystrom(m) => m.output_dim(),
        }
    }

    fn eigenfunction_values(&self, x: &Dataset) -> Result<Matrix> {
        match self {
            EigenModel::Neuralef(m) => m.eigenfunction_values(x),
            EigenModel::Nystrom(m) => m.eigenfunction_values(x),
        }
    }
}

impl From<NeuralEfModel> for EigenModel {
    fn from(m: NeuralEfModel) -> Self {
        EigenModel::Neuralef(m)
    }
}

impl From<NystromModel> for EigenModel {
    fn from(m: NystromModel) -> Self {
        EigenModel::Nystrom(m)
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlaPosterior {
    pub map_net: FeedForwardNet,
    pub eigen: EigenModel,
    pub likelihood: LikelihoodSpec,
    /// `k × k` posterior precision.
    pub precision: Matrix,
    pub prior_variance: f64,
    /// Multiplier on sampled function noise in [`predictive_probs`].
    #[serde(default = "one")]
    pub noise_scale: f64,
}

/// Prior variance implied by weight decay `wd` on `n` training points: `1/(n·wd)`.
pub fn prior_variance_from_weight_decay(n: usize, weight_decay: f64) -> Result<f64> {
    if n == 0 || !(weight_decay > 0.0) {
        return Err(Error::invalid("need n ≥ 1 and positive weight decay"));
    }
    Ok(1.0 / (n as f64 * weight_decay))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Output-space Hessian `Λ = −∂²_g log p(y | g)`.
pub fn lambda_matrix(logits: &[f64], lik: &LikelihoodSpec) -> Result<Matrix> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logits"));
    }
    let c = logits.len();
    Ok(match lik {
        LikelihoodSpec::Categorical => {
            let p = softmax(logits);
            Matrix::from_fn(c, c, |i, j| if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] })
        }
        LikelihoodSpec::GaussianRegression { noise_variance } => {
            lik.validate()?;
            Matrix::identity(c).scale(1.0 / noise_variance)
        }
    })
}

/// `Ψ̃(x)`: `(|x|·N_out) × k`, column `j` equal to `√μ̂_j ψ̂_j(x)`.
pub fn feature_map<E: Eigenfunctions + ?Sized>(eigen: &E, x: &Dataset) -> Result<Matrix> {
    let mut values = eigen.eigenfunction_values(x)?;
    let scales: Vec<f64> = eigen
        .eigenvalues()
        .iter()
        .enumerate()
        .map(|(j, &mu)| {
            if mu < 0.0 {
                warn!("eigenvalue {j} = {mu:e} is negative; clipping to 0");
            }
            mu.max(0.0).sqrt()
        })
        .collect();
    for r in 0..values.rows() {
        for (v, s) in values.row_mut(r).iter_mut().zip(&scales) {
            *v *= s;
        }
    }
    Ok(values)
}

/// Accumulates the `k × k` precision in one sequential pass over the training set.
pub fn lla_fit(
    map_net: &FeedForwardNet,
    eigen: EigenModel,
    train: &Dataset,
    lik: LikelihoodSpec,
    prior_variance: f64,
) -> Result<LlaPosterior> {
    lik.validate()?;
    if !(prior_variance > 0.0) {
        return Err(Error::invalid("prior variance must be positive"));
    }
    let n_out = map_net.arch().output_dim();
    if eigen.output_dim() != n_out {
        return Err(Error::invalid(format!(
            "eigenfunctions have {} outputs, network has {n_out}",
            eigen.output_dim()
        )));
    }
    let k = eigen.num_eigenpairs();
    let features = feature_map(&eigen, train)?;
    let logits = map_net.forward_eval(train.points())?;
    let mut precision = Matrix::identity(k).scale(1.0 / prior_variance);
    for i in 0..train.len() {
        let lam = lambda_matrix(logits.row(i), &lik)?;
        let rows: Vec<usize> = (i * n_out..(i + 1) * n_out).collect();
        let psi = features.select_rows(&rows);
        let contrib = psi.transpose().matmul(&lam.matmul(&psi)?)?;
        precision = precision.add(&contrib)?;
    }
    precision.symmetrize();
    Cholesky::factor(&precision).map_err(|e| {
        Error::Numeric(format!("accumulated precision is not SPD: {e}"))
    })?;
    Ok(LlaPosterior {
        map_net: map_net.clone(),
        eigen,
        likelihood: lik,
        precision,
        prior_variance,
        noise_scale: 1.0,
    })
}

/// Predictive mean `g(x, θ_MAP)` (`|x| × N_out`) and covariance
/// `Ψ̃(x) P⁻¹ Ψ̃(y)ᵀ` (`(|x|·N_out) × (|y|·N_out)`).
pub fn lla_predict(post: &LlaPosterior, x: &Dataset, y: &Dataset) -> Result<(Matrix, Matrix)> {
    let mean = post.map_net.forward_eval(x.points())?;
    let px = feature_map(&post.eigen, x)?;
    let py = if x == y { px.clone() } else { feature_map(&post.eigen, y)? };
    let solved = spd_solve(&post.precision, &py.transpose())?;
    Ok((mean, px.matmul(&solved)?))
}

/// Exact linearised-Laplace covariance from explicit Jacobians and the full
/// `dim(θ) × dim(θ)` Gauss–Newton precision. Test oracle for small networks.
pub fn lla_naive_covariance(
    map_net: &FeedForwardNet,
    train: &Dataset,
    lik: &LikelihoodSpec,
    prior_variance: f64,
    x: &Dataset,
    y: &Dataset,
) -> Result<Matrix> {
    lik.validate()?;
    let p = map_net.num_params();
    let n_out = map_net.arch().output_dim();
    let j_tr = map_net.jacobian(train.points())?;
    let logits = map_net.forward_eval(train.points())?;
    let mut precision = Matrix::identity(p).scale(1.0 / prior_variance);
    for i in 0..train.len() {
        let lam = lambda_matrix(logits.row(i), lik)?;
        let rows: Vec<usize> = (i * n_out..(i + 1) * n_out).collect();
        let ji = j_tr.select_rows(&rows);
        let contrib = ji.transpose().matmul(&lam.matmul(&ji)?)?;
        precision = precision.add(&contrib)?;
    }
    precision.symmetrize();
    let jx = map_net.jacobian(x.points())?;
    let jy = if x == y { jx.clone() } else { map_net.jacobian(y.points())? };
    let solved = spd_solve(&precision, &jy.transpose())?;
    jx.matmul(&solved)
}

/// Monte-Carlo predictive class probabilities, `|x| × N_out`.
pub fn predictive_probs(post: &LlaPosterior, x: &Dataset, mc: usize, seed: u64) -> Result<Matrix> {
    if post.likelihood != LikelihoodSpec::Categorical {
        return Err(Error::invalid("predictive probabilities need a categorical likelihood"));
    }
    if mc == 0 {
        return Err(Error::invalid("need at least one Monte-Carlo sample"));
    }
    let c = post.map_net.arch().output_dim();
    let mean = post.map_net.forward_eval(x.points())?;
    let features = feature_map(&post.eigen, x)?;
    let solved = spd_solve(&post.precision, &features.transpose())?;
    let rows = exec::map_range(x.len(), |i| -> Result<Vec<f64>> {
        let block: Vec<usize> = (i * c..(i + 1) * c).collect();
        let psi = features.select_rows(&block);
        let all: Vec<usize> = (0..solved.rows()).collect();
        let cov = psi.matmul(&solved.select(&all, &block))?;
        let factor = sampling_factor(&cov, post.noise_scale, i)?;
        let m = mean.row(i);
        if factor.max_abs() == 0.0 {
            return Ok(softmax(m));
        }
        let mut rng = stream(seed, Stream::Posterior, i as u64);
        let mut acc = vec![0.0; c];
        let mut z = vec![0.0; c];
        for _ in 0..mc {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let noise = factor.matvec(&z)?;
            let f: Vec<f64> = m.iter().zip(&noise).map(|(a, b)| a + b).collect();
            for (a, p) in acc.iter_mut().zip(softmax(&f)) {
                *a += p;
            }
        }
        Ok(acc.into_iter().map(|a| a / mc as f64).collect())
    });
    let mut out = Matrix::zeros(x.len(), c);
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&r?);
    }
    Ok(out)
}

/// `scale · U diag(√max(λ, 0))` for the covariance block `U diag(λ) Uᵀ`.
fn sampling_factor(cov: &Matrix, scale: f64, point: usize) -> Result<Matrix> {
    let mut sym = cov.clone();
    sym.symmetrize();
    let eig = sym_eigh(&sym)?;
    let c = cov.rows();
    let mut f = Matrix::zeros(c, c);
    for (j, &lam) in eig.values.iter().enumerate() {
        if lam < -1e-12 * cov.max_abs().max(1e-300) {
            warn!("predictive covariance at point {point} has eigenvalue {lam:e}; clipping to 0");
        }
        let s = scale * lam.max(0.0).sqrt();
        for i in 0..c {
            f[(i, j)] = eig.vectors[(i, j)] * s;
        }
    }
    Ok(f)
}

/// Settings for fitting a MAP classifier with full-batch Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub arch: NetArch,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

/// Minimizes `mean cross-entropy + (wd/2)‖θ‖²`, which is the MAP objective
/// under the prior `N(0, 1/(N·wd))` scaled by `1/N`.
pub fn train_map_classifier(cfg: &MapConfig, data: &Dataset, seed: u64) -> Result<FeedForwardNet> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::invalid("classifier training needs labels"))?;
    if cfg.arch.l2bn {
        return Err(Error::invalid("the MAP classifier must not use L2BN"));
    }
    let c = cfg.arch.output_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let mut net = FeedForwardNet::init(cfg.arch.clone(), 0.99, &mut stream(seed, Stream::Init, u64::MAX))?;
    let mut adam = AdamState::new(net.num_params());
    let n = data.len() as f64;
    for _ in 0..cfg.iterations {
        let logits = net.forward_train(data.points())?;
        let mut cot = Matrix::zeros(data.len(), c);
        for (i, &label) in labels.iter().enumerate() {
            let p = softmax(logits.row(i));
            for (o, &pv) in p.iter().enumerate() {
                cot[(i, o)] = (pv - if o == label { 1.0 } else { 0.0 }) / n;
            }
        }
        let mut grads = net.vjp(data.points(), &cot)?;
        for (g, &w) in grads.iter_mut().zip(net.params()) {
            *g += cfg.weight_decay * w;
        }
        adam_step(net.params_mut(), &grads, &mut adam, cfg.lr)?;
    }
    Ok(net)
}
