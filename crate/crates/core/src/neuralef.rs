//! Training engine for neural eigenfunctions.
//!
//! `k` networks `ψ̂_1 … ψ̂_k` are trained simultaneously. On a mini-batch `X`
//! with Gram `K = κ(X, X)` and outputs `ψ̂_j` (each L2BN-normalized so that
//! `‖ψ̂_j‖² = B`), the batch estimates
//!
//! ```text
//! R̃_ij = ψ̂_iᵀ K ψ̂_j / B²
//! ```
//!
//! drive the loss
//!
//! ```text
//! ℓ = −Σ_j ( R̃_jj − Σ_{i<j} R̃_ij² / sg(R̃_ii) )
//! ```
//!
//! where the `i < j` factors are held constant when differentiating w.r.t.
//! network `j`. Its gradient w.r.t. the outputs of network `j` is available in
//! closed form and is pulled back through the network with one
//! vector-Jacobian product. The diagonal `R̃_jj` is tracked by EMA as the
//! eigenvalue estimate `μ̂_j`.

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::eigen::Eigenfunctions;
use crate::error::{Error, Result};
use crate::exec;
use crate::kernels::{gram, KernelSpec};
use crate::linalg::{dot, Matrix};
use crate::net::{adam_step, Activation, AdamState, FeedForwardNet, NetArch};
use crate::rng::{stream, Stream};

/// `R̃_ii` at or below this value disables the penalties that divide by it.
pub const DEGENERATE_RAYLEIGH: f64 = 1e-12;

fn default_batch() -> usize {
    256
}
fn default_iterations() -> usize {
    2000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_mu_decay() -> f64 {
    0.9
}
fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_activation() -> Activation {
    Activation::SinCosMix
}
fn default_l2bn_decay() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// EMA decay of the eigenvalue estimates.
    #[serde(default = "default_mu_decay")]
    pub mu_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Hidden widths of every eigenfunction network.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// EMA decay of the L2BN statistic.
    #[serde(default = "default_l2bn_decay")]
    pub l2bn_decay: f64,
}

impl TrainConfig {
    pub fn new(k: usize) -> Self {
        TrainConfig {
            k,
            batch_size: default_batch(),
            iterations: default_iterations(),
            lr: default_lr(),
            mu_decay: default_mu_decay(),
            seed: 0,
            hidden: default_hidden(),
            activation: default_activation(),
            l2bn_decay: default_l2bn_decay(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.mu_decay) {
            return Err(Error::invalid("mu_decay must lie in [0, 1)"));
        }
        if !(self.l2bn_decay > 0.0 && self.l2bn_decay < 1.0) {
            return Err(Error::invalid("l2bn_decay must lie in (0, 1)"));
        }
        Ok(())
    }

    fn arch(&self, input_dim: usize, output_dim: usize) -> NetArch {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(&self.hidden);
        widths.push(output_dim);
        NetArch::new(widths, self.activation).with_l2bn(true)
    }
}

/// Trained eigenfunction networks with their eigenvalue estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralEfModel {
    pub nets: Vec<FeedForwardNet>,
    pub mu_hat: Vec<f64>,
    pub kernel_spec: KernelSpec,
    pub config: TrainConfig,
    /// Number of optimization steps taken; zero means untrained.
    pub iterations_done: usize,
}

/// `k × k` matrix `R̃_ij = ψ̂_iᵀ K ψ̂_j / B²`.
pub fn batch_quadratic_forms(outputs: &[Vec<f64>], k: &Matrix, batch_size: usize) -> Result<Matrix> {
    let kpsi = kernel_products(outputs, k)?;
    Ok(forms_from_products(outputs, &kpsi, batch_size))
}

fn kernel_products(outputs: &[Vec<f64>], k: &Matrix) -> Result<Vec<Vec<f64>>> {
    if !k.is_square() {
        return Err(Error::invalid("batch Gram must be square"));
    }
    outputs
        .iter()
        .map(|psi| {
            if psi.len() != k.rows() {
                return Err(Error::invalid(format!(
                    "output vector of length {} against a {}x{} Gram",
                    psi.len(),
                    k.rows(),
                    k.cols()
                )));
            }
            k.matvec(psi)
        })
        .collect()
}

fn forms_from_products(outputs: &[Vec<f64>], kpsi: &[Vec<f64>], batch_size: usize) -> Matrix {
    let n = outputs.len();
    let b2 = (batch_size * batch_size) as f64;
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        r[(i, i)] = dot(&outputs[i], &kpsi[i]) / b2;
        for j in (i + 1)..n {
            let v = 0.5 * (dot(&outputs[i], &kpsi[j]) + dot(&outputs[j], &kpsi[i])) / b2;
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

fn loss_from_forms(r: &Matrix) -> f64 {
    let k = r.rows();
    let mut total = 0.0;
    for j in 0..k {
        let mut term = r[(j, j)];
        for i in 0..j {
            if r[(i, i)] > DEGENERATE_RAYLEIGH {
                term -= r[(i, j)] * r[(i, j)] / r[(i, i)];
            }
        }
        total += term;
    }
    -total
}

fn warn_degenerate(r: &Matrix) {
    let k = r.rows();
    for i in 0..k.saturating_sub(1) {
        if r[(i, i)] <= DEGENERATE_RAYLEIGH {
            warn!(
                "R̃_{i}{i} = {:e} is degenerate; skipping the penalties it normalizes",
                r[(i, i)]
            );
        }
    }
}

/// The training loss `ℓ` on one batch.
pub fn loss(outputs: &[Vec<f64>], k: &Matrix, batch_size: usize) -> Result<f64> {
    let r = batch_quadratic_forms(outputs, k, batch_size)?;
    warn_degenerate(&r);
    Ok(loss_from_forms(&r))
}

/// `−(2/B²) K (ψ̂_j − Σ_{i<j} (ψ̂_iᵀKψ̂_j / ψ̂_iᵀKψ̂_i) ψ̂_i)` for every `j`.
/// Feeding cotangent `j` to network `j`'s vector-Jacobian product yields
/// `∇_{w_j} ℓ`.
pub fn surrogate_cotangents(outputs: &[Vec<f64>], k: &Matrix, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let kpsi = kernel_products(outputs, k)?;
    let r = forms_from_products(outputs, &kpsi, batch_size);
    warn_degenerate(&r);
    Ok(cotangents_from_products(&kpsi, &r, batch_size))
}

fn cotangents_from_products(kpsi: &[Vec<f64>], r: &Matrix, batch_size: usize) -> Vec<Vec<f64>> {
    let scale = -2.0 / (batch_size * batch_size) as f64;
    (0..kpsi.len())
        .map(|j| {
            // K is linear, so K(ψ_j − Σ c_i ψ_i) = Kψ_j − Σ c_i Kψ_i
            let mut c = kpsi[j].clone();
            for i in 0..j {
                if r[(i, i)] > DEGENERATE_RAYLEIGH {
                    let coef = r[(i, j)] / r[(i, i)];
                    for (cv, kv) in c.iter_mut().zip(&kpsi[i]) {
                        *cv -= coef * kv;
                    }
                }
            }
            c.iter_mut().for_each(|v| *v *= scale);
            c
        })
        .collect()
}

struct Player {
    net: FeedForwardNet,
    adam: AdamState,
}

/// Gram row/column indices for the blocks of the given sample indices.
fn block_index(idx: &[usize], n_out: usize) -> Vec<usize> {
    idx.iter()
        .flat_map(|&i| (0..n_out).map(move |o| i * n_out + o))
        .collect()
}

/// Epoch-shuffled batch sampler drawing without replacement.
struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order
            .shuffle(&mut stream(self.seed, Stream::Batches, self.epoch));
        self.epoch += 1;
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.n {
            self.reshuffle();
        }
        let b = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        b
    }
}

/// Runs the full training loop and returns the trained model.
pub fn train(spec: &KernelSpec, x_tr: &Dataset, cfg: &TrainConfig) -> Result<NeuralEfModel> {
    cfg.validate()?;
    spec.validate()?;
    let k_full = gram(spec, x_tr, x_tr)?;
    train_with_gram(spec, x_tr, &k_full, cfg)
}

/// As [`train`], with the training Gram supplied by the caller.
pub fn train_with_gram(
    spec: &KernelSpec,
    x_tr: &Dataset,
    k_full: &Matrix,
    cfg: &TrainConfig,
) -> Result<NeuralEfModel> {
    cfg.validate()?;
    let n = x_tr.len();
    if n < 2 {
        return Err(Error::invalid("training needs at least two points"));
    }
    let n_out = spec.output_dim();
    if k_full.shape() != (n * n_out, n * n_out) {
        return Err(Error::invalid(format!(
            "training Gram is {:?}, expected {}x{}",
            k_full.shape(),
            n * n_out,
            n * n_out
        )));
    }
    let batch = cfg.batch_size.min(n);
    let arch = cfg.arch(x_tr.dim(), n_out);

    let mut players = (0..cfg.k)
        .map(|j| {
            let net = FeedForwardNet::init(
                arch.clone(),
                cfg.l2bn_decay,
                &mut stream(cfg.seed, Stream::Init, j as u64),
            )?;
            let adam = AdamState::new(net.num_params());
            Ok(Player { net, adam })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sampler = BatchSampler::new(n, batch, cfg.seed);
    let mut mu_hat = vec![0.0; cfg.k];

    for t in 0..cfg.iterations {
        let idx = sampler.next_batch();
        let xb = x_tr.subset(&idx);
        let blocks = block_index(&idx, n_out);
        let kb = k_full.select(&blocks, &blocks);

        let outputs = exec::map_mut(&mut players, |_, p| p.net.forward_train(xb.points()))
            .into_iter()
            .map(|o| o.map(Matrix::into_vec))
            .collect::<Result<Vec<_>>>()?;

        let kpsi = kernel_products(&outputs, &kb)?;
        let r = forms_from_products(&outputs, &kpsi, batch);
        let l = loss_from_forms(&r);
        if !l.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {t}; R̃ diagonal {:?}",
                (0..cfg.k).map(|j| r[(j, j)]).collect::<Vec<_>>()
            )));
        }
        if t == 0 {
            warn_degenerate(&r);
        }
        for (j, mu) in mu_hat.iter_mut().enumerate() {
            let rjj = r[(j, j)];
            if rjj < -1e-10 {
                warn!("negative Rayleigh estimate R̃_{j}{j} = {rjj:e}; is the kernel PSD?");
            }
            *mu = if t == 0 {
                rjj
            } else {
                cfg.mu_decay * *mu + (1.0 - cfg.mu_decay) * rjj
            };
        }

        let cots = cotangents_from_products(&kpsi, &r, batch);
        let lr = cfg.lr;
        exec::map_mut(&mut players, |j, p| -> Result<()> {
            let cot = Matrix::from_vec(batch, n_out, cots[j].clone())?;
            let grads = p.net.vjp(xb.points(), &cot)?;
            adam_step(p.net.params_mut(), &grads, &mut p.adam, lr)
        })
        .into_iter()
        .collect::<Result<()>>()?;
    }

    Ok(NeuralEfModel {
        nets: players.into_iter().map(|p| p.net).collect(),
        mu_hat,
        kernel_spec: spec.clone(),
        config: TrainConfig {
            batch_size: batch,
            ..cfg.clone()
        },
        iterations_done: cfg.iterations,
    })
}

impl NeuralEfModel {
    pub fn k(&self) -> usize {
        self.nets.len()
    }

    fn check_trained(&self) -> Result<()> {
        if self.iterations_done == 0 {
            return Err(Error::Contract("model has not been trained".into()));
        }
        if self.nets.len() != self.mu_hat.len() {
            return Err(Error::Contract(format!(
                "{} networks but {} eigenvalues",
                self.nets.len(),
                self.mu_hat.len()
            )));
        }
        Ok(())
    }

    /// Eval-mode outputs, `|x| × (k·N_out)`: row `i` holds `ψ̂_1(x_i), …, ψ̂_k(x_i)`.
    pub fn evaluate(&self, x: &Dataset) -> Result<Matrix> {
        self.check_trained()?;
        let n_out = self.output_dim();
        let k = self.k();
        let per_net = exec::map_range(k, |j| self.nets[j].forward_eval(x.points()))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut out = Matrix::zeros(x.len(), k * n_out);
        for (j, vals) in per_net.iter().enumerate() {
            for i in 0..x.len() {
                out.row_mut(i)[j * n_out..(j + 1) * n_out].copy_from_slice(vals.row(i));
            }
        }
        Ok(out)
    }

    /// `Σ_j μ̂_j ψ̂_j(x) ψ̂_j(y)ᵀ`.
    pub fn reconstruct(&self, x: &Dataset, y: &Dataset) -> Result<Matrix> {
        crate::eigen::mercer_reconstruct(self, x, y)
    }
}

impl Eigenfunctions for NeuralEfModel {
    fn eigenvalues(&self) -> &[f64] {
        &self.mu_hat
    }

    fn output_dim(&self) -> usize {
        self.nets.first().map_or(1, |n| n.arch().output_dim())
    }

    fn eigenfunction_values(&self, x: &Dataset) -> Result<Matrix> {
        let eval = self.evaluate(x)?;
        let n_out = self.output_dim();
        let k = self.k();
        Ok(Matrix::from_fn(x.len() * n_out, k, |r, j| {
            eval[(r / n_out, j * n_out + r % n_out)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng;

    fn random_vecs(k: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, Stream::Data, 0);
        (0..k)
            .map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    fn random_psd(n: usize, seed: u64) -> Matrix {
        let mut rng = stream(seed, Stream::Data, 1);
        let g = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        g.matmul_transposed(&g).unwrap()
    }

    #[test]
    fn orthogonal_vectors_identity_kernel() {
        let outs = vec![vec![1.0, 1.0], vec![1.0, -1.0]];
        let r = batch_quadratic_forms(&outs, &Matrix::identity(2), 2).unwrap();
        assert_eq!(r, Matrix::identity(2).scale(0.5));
    }

    #[test]
    fn isotropic_kernel_normalized_outputs() {
        let c = 3.0;
        let b = 4;
        let outs = vec![vec![1.0, -1.0, 1.0, 1.0]]; // ‖ψ‖² = B
        let r = batch_quadratic_forms(&outs, &Matrix::identity(b).scale(c), b).unwrap();
        assert!((r[(0, 0)] - c / b as f64).abs() < 1e-15);
    }

    #[test]
    fn quadratic_forms_match_double_sum() {
        let b = 5;
        let outs = random_vecs(3, b, 2);
        let k = random_psd(b, 2);
        let r = batch_quadratic_forms(&outs, &k, b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..b {
                    for q in 0..b {
                        s += outs[i][p] * k[(p, q)] * outs[j][q];
                    }
                }
                assert!((r[(i, j)] - s / (b * b) as f64).abs() < 1e-13);
            }
        }
        assert!(batch_quadratic_forms(&outs, &Matrix::identity(4), b).is_err());
    }

    #[test]
    fn loss_small_cases() {
        let l = loss(&[vec![1.0, 1.0]], &Matrix::identity(2), 2).unwrap();
        assert!((l + 0.5).abs() < 1e-15);
        // K-orthogonal pair: no penalty
        let outs = vec![vec![1.0, 1.0], vec![1.0, -1.0]];
        let r = batch_quadratic_forms(&outs, &Matrix::identity(2), 2).unwrap();
        let l = loss(&outs, &Matrix::identity(2), 2).unwrap();
        assert!((l + r[(0, 0)] + r[(1, 1)]).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_forms_formula() {
        let b = 6;
        let outs = random_vecs(3, b, 5);
        let k = random_psd(b, 5);
        let r = batch_quadratic_forms(&outs, &k, b).unwrap();
        let mut expected = 0.0;
        for j in 0..3 {
            expected += r[(j, j)];
            for i in 0..j {
                expected -= r[(i, j)].powi(2) / r[(i, i)];
            }
        }
        assert!((loss(&outs, &k, b).unwrap() + expected).abs() < 1e-12);
    }

    #[test]
    fn cotangent_small_cases() {
        let c = surrogate_cotangents(&[vec![1.0, 1.0]], &Matrix::identity(2), 2).unwrap();
        assert_eq!(c[0], vec![-0.5, -0.5]);
        let outs = vec![vec![1.0, 1.0], vec![1.0, -1.0]];
        let c = surrogate_cotangents(&outs, &Matrix::identity(2), 2).unwrap();
        assert_eq!(c[1], vec![-0.5, 0.5]);
    }

    #[test]
    fn degenerate_first_function_skips_penalty() {
        let outs = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let l = loss(&outs, &Matrix::identity(2), 2).unwrap();
        assert!((l + 0.5).abs() < 1e-15);
        let c = surrogate_cotangents(&outs, &Matrix::identity(2), 2).unwrap();
        assert!(c.iter().flatten().all(|v| v.is_finite()));
    }

    /// Loss of player `j` with every `i < j` output frozen.
    fn frozen_player_loss(outs: &[Vec<f64>], k: &Matrix, b: usize, j: usize, psi_j: &[f64]) -> f64 {
        let b2 = (b * b) as f64;
        let kpsi = k.matvec(psi_j).unwrap();
        let mut v = dot(psi_j, &kpsi) / b2;
        for psi_i in outs.iter().take(j) {
            let rij = dot(psi_i, &kpsi) / b2;
            let rii = dot(psi_i, &k.matvec(psi_i).unwrap()) / b2;
            v -= rij * rij / rii;
        }
        -v
    }

    #[test]
    fn cotangents_are_output_gradients_with_frozen_stop_gradients() {
        let b = 5;
        let outs = random_vecs(3, b, 8);
        let k = random_psd(b, 8);
        let cots = surrogate_cotangents(&outs, &k, b).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            for p in 0..b {
                let mut up = outs[j].clone();
                up[p] += h;
                let mut dn = outs[j].clone();
                dn[p] -= h;
                let fd = (frozen_player_loss(&outs, &k, b, j, &up) - frozen_player_loss(&outs, &k, b, j, &dn)) / (2.0 * h);
                assert!((fd - cots[j][p]).abs() < 1e-7 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 3, 4);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn untrained_model_refuses_evaluation() {
        let cfg = TrainConfig::new(1);
        let arch = cfg.arch(1, 1);
        let net = FeedForwardNet::init(arch, 0.99, &mut stream(0, Stream::Init, 0)).unwrap();
        let model = NeuralEfModel {
            nets: vec![net],
            mu_hat: vec![1.0],
            kernel_spec: KernelSpec::Linear,
            config: cfg,
            iterations_done: 0,
        };
        assert!(matches!(
            model.evaluate(&Dataset::from_scalars(&[0.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(0).validate().is_err());
        let mut c = TrainConfig::new(2);
        c.batch_size = 1;
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"k":2,"oops":1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"k":2}"#).unwrap();
        assert_eq!(c, TrainConfig::new(2));
    }
}
