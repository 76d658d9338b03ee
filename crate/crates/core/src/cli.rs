//! Command-line experiments.
//!
//! Every command reads a JSON [`ExperimentConfig`], derives all randomness
//! from one seed, and writes CSV/JSON files into an output directory:
//!
//! | command     | outputs                                                        |
//! |-------------|----------------------------------------------------------------|
//! | `decompose` | `model.json`, `eigenvalues.csv`, `eigenfunctions.csv`, `report.json` |
//! | `nystrom`   | `model.json`, `eigenvalues.csv`, `eigenfunctions.csv`          |
//! | `compare`   | `report.json`, `curves.csv`, `scaling.csv` (if `sample_sizes`) |
//! | `project`   | `projections.csv`                                              |
//! | `ntk-check` | `ntk_check.csv`                                                |
//! | `lla`       | `posterior.json`, `covariance.csv`, `probs.csv`, `report.json` |
//!
//! Wall-clock timings are only written when the config sets `"timings": true`,
//! so default outputs are byte-identical across runs with the same seed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GeneratorSpec};
use crate::eigen::{empirical_inner_products, sign_corrected_alignment, Eigenfunctions};
use crate::error::{Error, Result};
use crate::io::{self, Model};
use crate::kernels::{gram, ntk_exact_gram, ntk_probe_gram, KernelSpec, DEFAULT_NTK_STEP};
use crate::linalg::{dot, Matrix};
use crate::lla::{
    lla_fit, lla_predict, predictive_probs, prior_variance_from_weight_decay, softmax,
    train_map_classifier, EigenModel, LikelihoodSpec, MapConfig,
};
use crate::net::{FeedForwardNet, NetArch};
use crate::neuralef::{train_with_gram, NeuralEfModel, TrainConfig};
use crate::nystrom::{nystrom_fit_with_gram, NystromModel};
use crate::rng::{derive_seed, stream, Stream};

#[derive(Debug, Parser)]
#[command(name = "neuralef", version, about = "Kernel eigenfunction experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train neural eigenfunctions for a kernel.
    Decompose(RunArgs),
    /// Fit the Nyström eigendecomposition.
    Nystrom(RunArgs),
    /// Run both methods and report eigenvalues, alignments and orthonormality.
    Compare(RunArgs),
    /// Evaluate a saved model on a dataset.
    Project(RunArgs),
    /// Probe-estimated versus exact empirical NTK.
    NtkCheck(RunArgs),
    /// Linearised Laplace posterior for a small classifier.
    Lla(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Where points come from. Relative file paths resolve against the config's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Generate(GeneratorSpec),
    File {
        path: PathBuf,
        /// Last CSV column holds integer class labels.
        #[serde(default)]
        labels: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtkCheckConfig {
    pub arch: NetArch,
    pub probes: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_step")]
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenMethod {
    Nystrom,
    Neuralef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlaConfig {
    pub map: MapConfig,
    pub method: EigenMethod,
    pub k: usize,
    /// Rademacher probes for the NTK estimate.
    #[serde(default = "default_lla_probes")]
    pub probes: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    /// NeuralEF settings when `method` is `neuralef`; `k` is taken from above.
    pub train: Option<TrainConfig>,
}

fn default_replicates() -> usize {
    10
}
fn default_step() -> f64 {
    DEFAULT_NTK_STEP
}
fn default_lla_probes() -> usize {
    1000
}
fn default_mc() -> usize {
    1000
}

/// One JSON document drives every command; each command reads the sections it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub timings: bool,
    pub dataset: Option<DatasetSource>,
    /// Points at which eigenfunctions are reported; defaults to the training set.
    pub eval: Option<DatasetSource>,
    pub kernel: Option<KernelSpec>,
    pub train: Option<TrainConfig>,
    /// Number of Nyström eigenpairs.
    pub k: Option<usize>,
    /// Saved model for `project`.
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub sample_sizes: Vec<usize>,
    pub ntk_check: Option<NtkCheckConfig>,
    pub lla: Option<LlaConfig>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timings {
    pub phases: Vec<Phase>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub n_train: usize,
    pub eigenvalues: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_eigenvalues: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignments: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orthonormality: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl RunReport {
    fn new(command: &str, seed: u64, dataset: &DatasetSource, n_train: usize) -> Self {
        RunReport {
            command: command.into(),
            seed,
            dataset: dataset.clone(),
            n_train,
            eigenvalues: Vec::new(),
            oracle_eigenvalues: None,
            alignments: None,
            orthonormality: None,
            metrics: BTreeMap::new(),
            timings: None,
        }
    }

    fn check_finite(&self) -> Result<()> {
        let mut all: Vec<f64> = self.eigenvalues.clone();
        all.extend(self.oracle_eigenvalues.iter().flatten());
        all.extend(self.alignments.iter().flatten());
        all.extend(self.orthonormality.iter().flatten().flatten());
        all.extend(self.metrics.values());
        if let Some(t) = &self.timings {
            all.extend(t.phases.iter().map(|p| p.seconds));
        }
        if all.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("report contains non-finite values".into()))
        }
    }
}

struct Clock {
    enabled: bool,
    start: Instant,
    phases: Vec<Phase>,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Clock {
            enabled,
            start: Instant::now(),
            phases: Vec::new(),
        }
    }

    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.phases.push(Phase {
            name: name.into(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        out
    }

    fn finish(self) -> Option<Timings> {
        self.enabled.then(|| Timings {
            total_seconds: self.start.elapsed().as_secs_f64(),
            phases: self.phases,
        })
    }
}

/// Resolved command inputs.
struct Ctx {
    cfg: ExperimentConfig,
    base: PathBuf,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn load(&self, src: &DatasetSource, seed: u64) -> Result<Dataset> {
        match src {
            DatasetSource::Generate(g) => g.generate(seed),
            DatasetSource::File { path, labels } => io::read_dataset_csv(&self.resolve(path), *labels),
        }
    }

    fn dataset(&self, cmd: &str) -> Result<(&DatasetSource, Dataset)> {
        let src = need(&self.cfg.dataset, "dataset", cmd)?;
        Ok((src, self.load(src, self.seed)?))
    }

    fn eval_or(&self, train: &Dataset) -> Result<Dataset> {
        match &self.cfg.eval {
            Some(src) => self.load(src, derive_seed(self.seed, Stream::Data)),
            None => Ok(train.clone()),
        }
    }

    fn kernel(&self, cmd: &str) -> Result<KernelSpec> {
        let spec = need(&self.cfg.kernel, "kernel", cmd)?
            .clone()
            .with_seed(derive_seed(self.seed, Stream::Kernel));
        spec.validate().map_err(as_config)?;
        Ok(spec)
    }

    fn train_config(&self, cmd: &str) -> Result<TrainConfig> {
        let mut t = need(&self.cfg.train, "train", cmd)?.clone();
        t.seed = self.seed;
        t.validate().map_err(as_config)?;
        Ok(t)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn need<'a, T>(v: &'a Option<T>, field: &str, cmd: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("`{cmd}` needs the `{field}` section")))
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::Config(m),
        other => other,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 3 for numerical failures, 2 for everything else (config, input, IO).
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    let (name, args) = match cmd {
        Command::Decompose(a) => ("decompose", a),
        Command::Nystrom(a) => ("nystrom", a),
        Command::Compare(a) => ("compare", a),
        Command::Project(a) => ("project", a),
        Command::NtkCheck(a) => ("ntk-check", a),
        Command::Lla(a) => ("lla", a),
    };
    let cfg = ExperimentConfig::load(&args.config)?;
    let base = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let ctx = Ctx {
        seed: args.seed.unwrap_or(cfg.seed),
        out: args
            .out
            .clone()
            .or_else(|| cfg.out.as_ref().map(|o| base.join(o)))
            .unwrap_or_else(|| PathBuf::from("out")),
        cfg,
        base,
    };
    info!("{name}: seed {} -> {}", ctx.seed, ctx.out.display());
    match cmd {
        Command::Decompose(_) => decompose(&ctx),
        Command::Nystrom(_) => nystrom(&ctx),
        Command::Compare(_) => compare(&ctx),
        Command::Project(_) => project(&ctx),
        Command::NtkCheck(_) => ntk_check(&ctx),
        Command::Lla(_) => lla(&ctx),
    }
}

fn eigenvalue_table(mu: &[f64]) -> Matrix {
    Matrix::from_fn(mu.len(), 2, |j, c| if c == 0 { (j + 1) as f64 } else { mu[j] })
}

/// Header and rows `[x..., (output), ψ_1..ψ_k]` for sample-major eigenfunction values.
fn function_table(x: &Dataset, values: &Matrix, n_out: usize, prefix: &str) -> (Vec<String>, Matrix) {
    let d = x.dim();
    let k = values.cols();
    let extra = usize::from(n_out > 1);
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    if extra == 1 {
        header.push("output".into());
    }
    header.extend((1..=k).map(|j| format!("{prefix}{j}")));
    let table = Matrix::from_fn(values.rows(), d + extra + k, |r, c| {
        let p = r / n_out;
        if c < d {
            x.point(p)[c]
        } else if c < d + extra {
            (r % n_out) as f64
        } else {
            values[(r, c - d - extra)]
        }
    });
    (header, table)
}

fn write_table(path: &Path, header: &[String], m: &Matrix) -> Result<()> {
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_table_csv(path, &h, m)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn fit_neuralef(spec: &KernelSpec, x: &Dataset, cfg: &TrainConfig, clock: &mut Clock) -> Result<NeuralEfModel> {
    let k_full = clock.time("gram", || gram(spec, x, x))?;
    clock.time("neuralef", || train_with_gram(spec, x, &k_full, cfg))
}

fn decompose(ctx: &Ctx) -> Result<()> {
    let mut clock = Clock::new(ctx.cfg.timings);
    let (src, x) = ctx.dataset("decompose")?;
    let spec = ctx.kernel("decompose")?;
    let tc = ctx.train_config("decompose")?;
    let model = fit_neuralef(&spec, &x, &tc, &mut clock)?;

    let train_vals = model.eigenfunction_values(&x)?;
    let eval = ctx.eval_or(&x)?;
    let vals = model.eigenfunction_values(&eval)?;
    let (header, table) = function_table(&eval, &vals, model.output_dim(), "psi");

    io::save_model(&Model::Neuralef(model.clone()), &ctx.path("model.json"))?;
    io::write_table_csv(&ctx.path("eigenvalues.csv"), &["j", "mu_hat"], &eigenvalue_table(&model.mu_hat))?;
    write_table(&ctx.path("eigenfunctions.csv"), &header, &table)?;

    let mut report = RunReport::new("decompose", ctx.seed, src, x.len());
    report.eigenvalues = model.mu_hat.clone();
    report.orthonormality = Some(to_rows(&empirical_inner_products(&train_vals, x.len())?));
    report.timings = clock.finish();
    report.check_finite()?;
    io::write_json(&ctx.path("report.json"), &report)
}

fn nystrom_k(ctx: &Ctx, cmd: &str) -> Result<usize> {
    need(&ctx.cfg.k, "k", cmd).copied()
}

fn nystrom(ctx: &Ctx) -> Result<()> {
    let (_, x) = ctx.dataset("nystrom")?;
    let spec = ctx.kernel("nystrom")?;
    let k = nystrom_k(ctx, "nystrom")?;
    let kx = gram(&spec, &x, &x)?;
    let model = nystrom_fit_with_gram(&spec, &x, &kx, k).map_err(as_config)?;
    let eval = ctx.eval_or(&x)?;
    let vals = model.eigenfunction_values(&eval)?;
    let (header, table) = function_table(&eval, &vals, model.output_dim(), "psi");

    io::save_model(&Model::Nystrom(model.clone()), &ctx.path("model.json"))?;
    io::write_table_csv(&ctx.path("eigenvalues.csv"), &["j", "mu_hat"], &eigenvalue_table(&model.mu_hat))?;
    write_table(&ctx.path("eigenfunctions.csv"), &header, &table)
}

struct Comparison {
    ours: NeuralEfModel,
    oracle: NystromModel,
    alignments: Vec<f64>,
    train_values: Matrix,
}

fn run_comparison(spec: &KernelSpec, x: &Dataset, tc: &TrainConfig, clock: &mut Clock) -> Result<Comparison> {
    let k_full = clock.time("gram", || gram(spec, x, x))?;
    let oracle = clock.time("nystrom", || nystrom_fit_with_gram(spec, x, &k_full, tc.k))?;
    let ours = clock.time("neuralef", || train_with_gram(spec, x, &k_full, tc))?;
    let train_values = ours.eigenfunction_values(x)?;
    let alignments = (0..tc.k)
        .map(|j| sign_corrected_alignment(&train_values.column(j), &oracle.train_values.column(j)))
        .collect();
    Ok(Comparison {
        ours,
        oracle,
        alignments,
        train_values,
    })
}

fn max_relative_error(ours: &[f64], oracle: &[f64]) -> f64 {
    ours.iter()
        .zip(oracle)
        .map(|(a, b)| (a / b - 1.0).abs())
        .fold(0.0, f64::max)
}

fn compare(ctx: &Ctx) -> Result<()> {
    let mut clock = Clock::new(ctx.cfg.timings);
    let (src, x) = ctx.dataset("compare")?;
    let spec = ctx.kernel("compare")?;
    let tc = ctx.train_config("compare")?;
    if tc.k > x.len() * spec.output_dim() {
        return Err(Error::Config(format!("k = {} exceeds the Gram size", tc.k)));
    }
    let cmp = run_comparison(&spec, &x, &tc, &mut clock)?;

    // curves on the eval points, with our signs matched to the oracle's
    let eval = ctx.eval_or(&x)?;
    let ours_eval = cmp.ours.eigenfunction_values(&eval)?;
    let oracle_eval = cmp.oracle.eigenfunction_values(&eval)?;
    let signs: Vec<f64> = (0..tc.k)
        .map(|j| {
            let d = dot(&cmp.train_values.column(j), &cmp.oracle.train_values.column(j));
            if d < 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    let n_out = spec.output_dim();
    let both = Matrix::from_fn(ours_eval.rows(), 2 * tc.k, |r, c| {
        if c < tc.k {
            oracle_eval[(r, c)]
        } else {
            signs[c - tc.k] * ours_eval[(r, c - tc.k)]
        }
    });
    let (mut header, table) = function_table(&eval, &both, n_out, "nystrom_");
    let first = header.len() - 2 * tc.k;
    for j in 0..tc.k {
        header[first + tc.k + j] = format!("neuralef_{}", j + 1);
    }
    write_table(&ctx.path("curves.csv"), &header, &table)?;

    let mut report = RunReport::new("compare", ctx.seed, src, x.len());
    report.eigenvalues = cmp.ours.mu_hat.clone();
    report.oracle_eigenvalues = Some(cmp.oracle.mu_hat.clone());
    report.alignments = Some(cmp.alignments.clone());
    report.orthonormality = Some(to_rows(&empirical_inner_products(&cmp.train_values, x.len())?));
    report.metrics.insert(
        "max_relative_eigenvalue_error".into(),
        max_relative_error(&cmp.ours.mu_hat, &cmp.oracle.mu_hat),
    );

    if !ctx.cfg.sample_sizes.is_empty() {
        let DatasetSource::Generate(g) = src else {
            return Err(Error::Config("`sample_sizes` needs a generated dataset".into()));
        };
        let mut header = vec!["n", "max_relative_eigenvalue_error", "min_alignment"];
        if ctx.cfg.timings {
            header.extend(["nystrom_seconds", "neuralef_seconds"]);
        }
        let mut rows = Vec::new();
        for &n in &ctx.cfg.sample_sizes {
            let xs = GeneratorSpec { n, ..g.clone() }.generate(ctx.seed)?;
            let tcn = TrainConfig {
                batch_size: tc.batch_size.min(n),
                ..tc.clone()
            };
            let mut c = Clock::new(true);
            let r = run_comparison(&spec, &xs, &tcn, &mut c)?;
            let mut row = vec![
                n as f64,
                max_relative_error(&r.ours.mu_hat, &r.oracle.mu_hat),
                r.alignments.iter().copied().fold(f64::INFINITY, f64::min),
            ];
            if ctx.cfg.timings {
                let secs = |name: &str| c.phases.iter().filter(|p| p.name == name).map(|p| p.seconds).sum::<f64>();
                row.push(secs("gram") + secs("nystrom"));
                row.push(secs("gram") + secs("neuralef"));
            }
            rows.push(row);
        }
        io::write_table_csv(&ctx.path("scaling.csv"), &header, &Matrix::from_rows(&rows)?)?;
    }
    report.timings = clock.finish();
    report.check_finite()?;
    io::write_json(&ctx.path("report.json"), &report)
}

fn project(ctx: &Ctx) -> Result<()> {
    let model_path = ctx.resolve(need(&ctx.cfg.model, "model", "project")?);
    let (_, x) = ctx.dataset("project")?;
    let model = io::load_model(&model_path)?;
    let eigen: &dyn Eigenfunctions = match &model {
        Model::Neuralef(m) => m,
        Model::Nystrom(m) => m,
        Model::LlaPosterior(p) => &p.eigen,
    };
    let vals = eigen.eigenfunction_values(&x)?;
    let n_out = eigen.output_dim();
    let (mut header, mut table) = function_table(&x, &vals, n_out, "psi");
    if let Some(labels) = x.labels() {
        let d = x.dim();
        header.insert(d, "label".into());
        table = Matrix::from_fn(table.rows(), table.cols() + 1, |r, c| match c {
            c if c < d => table[(r, c)],
            c if c == d => labels[r / n_out] as f64,
            c => table[(r, c - 1)],
        });
    }
    write_table(&ctx.path("projections.csv"), &header, &table)
}

fn relative_frobenius(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.sub(b)?.frobenius_norm() / b.frobenius_norm())
}

fn ntk_check(ctx: &Ctx) -> Result<()> {
    let nc = need(&ctx.cfg.ntk_check, "ntk_check", "ntk-check")?;
    nc.arch.validate().map_err(as_config)?;
    if nc.probes.is_empty() || nc.probes.contains(&0) || nc.replicates == 0 {
        return Err(Error::Config("ntk_check needs positive probe counts and replicates".into()));
    }
    let (_, x) = ctx.dataset("ntk-check")?;
    let net = FeedForwardNet::init(nc.arch.clone(), 0.99, &mut stream(ctx.seed, Stream::Init, 0))?;
    let exact = ntk_exact_gram(&net, &x)?;
    // seeds exceed the exactly representable f64 integers, so format rows directly
    let mut text = String::from("probes,seed,relative_error\n");
    for &s in &nc.probes {
        for r in 0..nc.replicates {
            let seed = derive_seed(ctx.seed, Stream::Probes).wrapping_add(r as u64);
            let est = ntk_probe_gram(&net, &x, s, nc.step, seed)?;
            text.push_str(&format!("{s},{seed},{}\n", relative_frobenius(&est, &exact)?));
        }
    }
    io::write_string(&ctx.path("ntk_check.csv"), &text)
}

fn lla(ctx: &Ctx) -> Result<()> {
    let mut clock = Clock::new(ctx.cfg.timings);
    let lc = need(&ctx.cfg.lla, "lla", "lla")?;
    let (src, x) = ctx.dataset("lla")?;
    if x.labels().is_none() {
        return Err(Error::Config("`lla` needs a labelled dataset".into()));
    }
    let map_net = clock.time("map", || train_map_classifier(&lc.map, &x, ctx.seed))?;
    let spec = KernelSpec::EmpiricalNtk {
        network: map_net.clone(),
        probes: lc.probes,
        step: lc.step,
        seed: derive_seed(ctx.seed, Stream::Kernel),
    };
    spec.validate().map_err(as_config)?;
    let k_full = clock.time("gram", || gram(&spec, &x, &x))?;
    let eigen: EigenModel = match lc.method {
        EigenMethod::Nystrom => clock
            .time("eigen", || nystrom_fit_with_gram(&spec, &x, &k_full, lc.k))?
            .into(),
        EigenMethod::Neuralef => {
            let mut tc = lc.train.clone().unwrap_or_else(|| TrainConfig::new(lc.k));
            tc.k = lc.k;
            tc.seed = ctx.seed;
            tc.validate().map_err(as_config)?;
            clock.time("eigen", || train_with_gram(&spec, &x, &k_full, &tc))?.into()
        }
    };
    let prior = prior_variance_from_weight_decay(x.len(), lc.map.weight_decay).map_err(as_config)?;
    let post = clock.time("fit", || lla_fit(&map_net, eigen, &x, LikelihoodSpec::Categorical, prior))?;

    let eval = ctx.eval_or(&x)?;
    let c = map_net.arch().output_dim();
    let blocks = clock.time("predict", || predictive_blocks(&post, &eval))?;
    let probs = clock.time("sample", || {
        predictive_probs(&post, &eval, lc.mc_samples, derive_seed(ctx.seed, Stream::Posterior))
    })?;
    let logits = map_net.forward_eval(eval.points())?;

    let d = eval.dim();
    let mut cov_header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    for a in 0..c {
        for b in 0..c {
            cov_header.push(format!("cov_{a}_{b}"));
        }
    }
    let cov_table = Matrix::from_fn(eval.len(), d + c * c, |i, col| {
        if col < d {
            eval.point(i)[col]
        } else {
            blocks[i][col - d]
        }
    });
    write_table(&ctx.path("covariance.csv"), &cov_header, &cov_table)?;

    let mut prob_header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    prob_header.extend((0..c).map(|o| format!("p{o}")));
    prob_header.extend((0..c).map(|o| format!("map_p{o}")));
    let map_probs: Vec<Vec<f64>> = (0..eval.len()).map(|i| softmax(logits.row(i))).collect();
    let prob_table = Matrix::from_fn(eval.len(), d + 2 * c, |i, col| {
        if col < d {
            eval.point(i)[col]
        } else if col < d + c {
            probs[(i, col - d)]
        } else {
            map_probs[i][col - d - c]
        }
    });
    write_table(&ctx.path("probs.csv"), &prob_header, &prob_table)?;

    let train_logits = map_net.forward_eval(x.points())?;
    let labels = x.labels().unwrap_or_default();
    let correct = (0..x.len())
        .filter(|&i| argmax(train_logits.row(i)) == labels[i])
        .count();
    let mut report = RunReport::new("lla", ctx.seed, src, x.len());
    report.eigenvalues = post.eigen.eigenvalues().to_vec();
    report.metrics.insert("map_train_accuracy".into(), correct as f64 / x.len() as f64);
    report.metrics.insert("prior_variance".into(), prior);
    report.timings = clock.finish();
    report.check_finite()?;
    io::save_model(&Model::LlaPosterior(post), &ctx.path("posterior.json"))?;
    io::write_json(&ctx.path("report.json"), &report)
}

/// Per-point `N_out × N_out` predictive covariance blocks, flattened row-major.
fn predictive_blocks(post: &crate::lla::LlaPosterior, x: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..x.len())
        .map(|i| {
            let xi = x.subset(&[i]);
            let (_, cov) = lla_predict(post, &xi, &xi)?;
            Ok(cov.into_vec())
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
