//! Numerical results checked against independently computed references.

mod common;

use common::{jacobi_eigh, rel_frob, uniform};
use neuralef::data::{DatasetKind, GeneratorSpec};
use neuralef::eigen::{empirical_inner_products, mercer_reconstruct, Eigenfunctions};
use neuralef::io::{load_model, matrix_to_csv, save_model, Model};
use neuralef::kernels::{gram, nngp_mc_gram, ntk_exact_gram, ntk_probe_gram, KernelSpec};
use neuralef::lla::{
    lla_fit, lla_naive_covariance, lla_predict, predictive_probs, train_map_classifier, LikelihoodSpec, MapConfig,
};
use neuralef::net::{Activation, FeedForwardNet, NetArch, PriorSpec};
use neuralef::neuralef::{train, TrainConfig};
use neuralef::nystrom::nystrom_fit;
use neuralef::rng::{stream, Stream};
use neuralef::{Dataset, Matrix, Result};

#[test]
fn nngp_estimate_approaches_large_sample_reference() {
    let x = uniform(12, -1.0, 1.0, 2, 21);
    let arch = NetArch::new(vec![2, 16, 16, 1], Activation::Relu);
    let prior = PriorSpec::default();
    let reference = nngp_mc_gram(&arch, &prior, &x, 200_000, 1).unwrap();
    let err = |s: usize| rel_frob(&nngp_mc_gram(&arch, &prior, &x, s, 2).unwrap(), &reference);
    let (e100, e10k) = (err(100), err(10_000));
    assert!(e10k < e100, "S=10000 error {e10k} not below S=100 error {e100}");
}

#[test]
fn mean_of_ntk_probe_estimates_matches_exact_ntk() {
    let arch = NetArch::new(vec![2, 8, 8, 2], Activation::Erf);
    let net = FeedForwardNet::init(arch, 0.99, &mut stream(3, Stream::Init, 0)).unwrap();
    let x = uniform(10, -1.0, 1.0, 2, 3);
    let exact = ntk_exact_gram(&net, &x).unwrap();
    let mut mean = Matrix::zeros(exact.rows(), exact.cols());
    for seed in 0..50 {
        mean = mean.add(&ntk_probe_gram(&net, &x, 1000, 1e-5, seed).unwrap()).unwrap();
    }
    let err = rel_frob(&mean.scale(1.0 / 50.0), &exact);
    assert!(err <= 0.02, "relative error {err}");
}

#[test]
fn rbf_nystrom_eigenvalues_match_full_solve() {
    let x = uniform(64, -2.0, 2.0, 1, 4);
    let spec = KernelSpec::rbf(1.0);
    let k = gram(&spec, &x, &x).unwrap();
    let (lam, _) = jacobi_eigh(&k);
    let m = nystrom_fit(&spec, &x, 10).unwrap();
    for j in 0..10 {
        assert!((m.mu_hat[j] - lam[j] / 64.0).abs() <= 1e-8, "pair {j}");
    }
}

#[test]
fn nystrom_reconstructs_test_gram() {
    let x = uniform(64, -1.0, 1.0, 1, 5);
    let y = uniform(32, -1.0, 1.0, 1, 6);
    let spec = KernelSpec::polynomial(1.5, 4);
    let k = gram(&spec, &x, &x).unwrap();
    let trace: f64 = (0..64).map(|i| k[(i, i)]).sum();
    let all = nystrom_fit(&spec, &x, 64).unwrap();
    let mut captured = 0.0;
    let mut r = 0;
    while captured < 0.99 * trace / 64.0 {
        captured += all.mu_hat[r];
        r += 1;
    }
    let m = nystrom_fit(&spec, &x, r).unwrap();
    let truth = gram(&spec, &y, &y).unwrap();
    let err = rel_frob(&m.reconstruct(&y, &y).unwrap(), &truth);
    assert!(err <= 0.02, "k={r}: relative error {err}");
}

/// Exact eigenfunctions known only at the training points.
struct Injected {
    mu: Vec<f64>,
    values: Matrix,
}

impl Eigenfunctions for Injected {
    fn eigenvalues(&self) -> &[f64] {
        &self.mu
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn eigenfunction_values(&self, _x: &Dataset) -> Result<Matrix> {
        Ok(self.values.clone())
    }
}

#[test]
fn full_rank_injected_eigenfunctions_reconstruct_the_gram() {
    let x = uniform(24, -2.0, 2.0, 1, 7);
    let spec = KernelSpec::rbf(1.0);
    let k = gram(&spec, &x, &x).unwrap();
    let (lam, u) = jacobi_eigh(&k);
    let n = x.len() as f64;
    let injected = Injected {
        mu: lam.iter().map(|l| l / n).collect(),
        values: u.scale(n.sqrt()),
    };
    let err = rel_frob(&mercer_reconstruct(&injected, &x, &x).unwrap(), &k);
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn trained_functions_are_orthonormal_on_held_out_batch_and_ordered() {
    let x = uniform(256, -2.0, 2.0, 1, 0);
    let spec = KernelSpec::rbf(1.0);
    let cfg = TrainConfig {
        batch_size: 256,
        iterations: 2000,
        ..TrainConfig::new(3)
    };
    let model = train(&spec, &x, &cfg).unwrap();
    // Large batch so the check measures the functions rather than batch noise.
    let held_out = uniform(4096, -2.0, 2.0, 1, 9);
    let ip = empirical_inner_products(&model.eigenfunction_values(&held_out).unwrap(), 4096).unwrap();
    for i in 0..3 {
        assert!((0.9..=1.1).contains(&ip[(i, i)]), "diag {i}: {}", ip[(i, i)]);
        for j in 0..3 {
            if i != j {
                assert!(ip[(i, j)].abs() <= 0.1, "off {i},{j}: {}", ip[(i, j)]);
            }
        }
    }
    for w in model.mu_hat.windows(2) {
        assert!(w[0] >= 0.95 * w[1]);
    }
}

fn linear_model(d: usize) -> FeedForwardNet {
    let params = (0..d).map(|i| 0.5 - 0.2 * i as f64).collect();
    FeedForwardNet::from_params(NetArch::new(vec![d, 1], Activation::Relu).with_bias(false), params, None).unwrap()
}

#[test]
fn gaussian_woodbury_matches_naive_at_train_test_pairs() {
    let d = 6;
    let train_x = Dataset::new(common::random_matrix(4, d, 10));
    let test_x = Dataset::new(common::random_matrix(5, d, 11));
    let net = linear_model(d);
    let lik = LikelihoodSpec::GaussianRegression { noise_variance: 0.3 };
    let eigen = nystrom_fit(&KernelSpec::Linear, &train_x, 4).unwrap();
    let post = lla_fit(&net, eigen.into(), &train_x, lik, 2.0).unwrap();
    let (_, cov) = lla_predict(&post, &train_x, &test_x).unwrap();
    let naive = lla_naive_covariance(&net, &train_x, &lik, 2.0, &train_x, &test_x).unwrap();
    assert!(rel_frob(&cov, &naive) <= 1e-6);
}

#[test]
fn stronger_likelihood_shrinks_variances() {
    let d = 3;
    let train_x = Dataset::new(common::random_matrix(3, d, 12));
    let grid = Dataset::new(common::random_matrix(6, d, 13));
    let net = linear_model(d);
    let diag = |noise: f64| {
        let lik = LikelihoodSpec::GaussianRegression { noise_variance: noise };
        let eigen = nystrom_fit(&KernelSpec::Linear, &train_x, 3).unwrap();
        let post = lla_fit(&net, eigen.into(), &train_x, lik, 1.0).unwrap();
        let (_, cov) = lla_predict(&post, &grid, &grid).unwrap();
        (0..grid.len()).map(|i| cov[(i, i)]).collect::<Vec<_>>()
    };
    let (weak, strong) = (diag(1.0), diag(0.01));
    for (s, w) in strong.iter().zip(&weak) {
        assert!(s <= w);
    }
}

#[test]
fn predictive_probabilities_are_reproducible() {
    let x = GeneratorSpec::new(DatasetKind::TwoMoons, 40).generate(14).unwrap();
    let map = MapConfig {
        arch: NetArch::new(vec![2, 8, 2], Activation::Relu),
        iterations: 100,
        lr: 0.01,
        weight_decay: 0.01,
    };
    let net = train_map_classifier(&map, &x, 14).unwrap();
    let spec = KernelSpec::EmpiricalNtk {
        network: net.clone(),
        probes: 64,
        step: 1e-5,
        seed: 14,
    };
    let eigen = nystrom_fit(&spec, &x, 5).unwrap();
    let post = lla_fit(&net, eigen.into(), &x, LikelihoodSpec::Categorical, 1.0).unwrap();
    let grid = uniform(10, -1.0, 2.0, 2, 15);
    let a = predictive_probs(&post, &grid, 256, 3).unwrap();
    let b = predictive_probs(&post, &grid, 256, 3).unwrap();
    assert_eq!(a, b);
    for i in 0..grid.len() {
        assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn saved_models_evaluate_to_identical_csv() {
    let x = uniform(32, -1.0, 1.0, 1, 16);
    let spec = KernelSpec::polynomial(1.5, 4);
    let cfg = TrainConfig {
        iterations: 50,
        ..TrainConfig::new(2)
    };
    let probe = uniform(10, -1.0, 1.0, 1, 17);
    let dir = tempfile::tempdir().unwrap();
    let models = [
        Model::Neuralef(train(&spec, &x, &cfg).unwrap()),
        Model::Nystrom(nystrom_fit(&spec, &x, 2).unwrap()),
    ];
    for (i, m) in models.iter().enumerate() {
        let path = dir.path().join(format!("m{i}.json"));
        save_model(m, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let eval = |m: &Model| match m {
            Model::Neuralef(n) => n.eigenfunction_values(&probe).unwrap(),
            Model::Nystrom(n) => n.eigenfunction_values(&probe).unwrap(),
            Model::LlaPosterior(p) => p.eigen.eigenfunction_values(&probe).unwrap(),
        };
        assert_eq!(matrix_to_csv(&eval(m)), matrix_to_csv(&eval(&loaded)));
    }
}
