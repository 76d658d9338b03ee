//! Datasets and synthetic generators.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{stream, Stream};

/// Points stored one per row, with optional integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset", into = "RawDataset")]
pub struct Dataset {
    points: Matrix,
    labels: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    points: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
}

impl TryFrom<RawDataset> for Dataset {
    type Error = Error;

    fn try_from(raw: RawDataset) -> Result<Self> {
        match raw.labels {
            Some(l) => Dataset::with_labels(raw.points, l),
            None => Ok(Dataset::new(raw.points)),
        }
    }
}

impl From<Dataset> for RawDataset {
    fn from(d: Dataset) -> Self {
        RawDataset {
            points: d.points,
            labels: d.labels,
        }
    }
}

impl Dataset {
    pub fn new(points: Matrix) -> Self {
        Dataset {
            points,
            labels: None,
        }
    }

    pub fn with_labels(points: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != points.rows() {
            return Err(Error::invalid(format!(
                "{} labels for {} points",
                labels.len(),
                points.rows()
            )));
        }
        Ok(Dataset {
            points,
            labels: Some(labels),
        })
    }

    /// One-dimensional dataset from scalars.
    pub fn from_scalars(xs: &[f64]) -> Self {
        Dataset::new(Matrix::column_vector(xs))
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            points: self.points.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Position of the row equal to `p`, if any.
    pub fn find(&self, p: &[f64]) -> Option<usize> {
        (0..self.len()).find(|&i| self.point(i) == p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Circles,
    Uniform,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(DatasetKind::TwoMoons),
            "circles" => Ok(DatasetKind::Circles),
            "uniform" => Ok(DatasetKind::Uniform),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

fn default_noise() -> f64 {
    0.05
}

fn default_bounds() -> (f64, f64) {
    (-1.0, 1.0)
}

fn default_dim() -> usize {
    1
}

fn default_factor() -> f64 {
    0.5
}

/// Declarative generator description, as used in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: DatasetKind,
    pub n: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_bounds")]
    pub bounds: (f64, f64),
    /// Feature dimension for `uniform`.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Inner/outer radius ratio for `circles`.
    #[serde(default = "default_factor")]
    pub factor: f64,
}

impl GeneratorSpec {
    pub fn new(kind: DatasetKind, n: usize) -> Self {
        GeneratorSpec {
            kind,
            n,
            noise: default_noise(),
            bounds: default_bounds(),
            dim: default_dim(),
            factor: default_factor(),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        generate_dataset(self, seed)
    }
}

/// Draws a synthetic dataset; deterministic given `seed`.
///
/// * `two_moons`: upper arc `(cos t, sin t)` labelled 0 and lower arc
///   `(1 − cos t, 0.5 − sin t)` labelled 1, `t` evenly spaced on `[0, π]`.
/// * `circles`: unit circle labelled 0 and a concentric circle of radius
///   `factor` labelled 1.
/// * `uniform`: i.i.d. uniform points in `bounds^dim`, unlabelled.
///
/// Curves receive isotropic Gaussian noise with standard deviation `noise`.
pub fn generate_dataset(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::invalid("noise must be nonnegative"));
    }
    let mut rng = stream(seed, Stream::Data, 0);
    match spec.kind {
        DatasetKind::Uniform => {
            let (lo, hi) = spec.bounds;
            if !(lo < hi) || spec.dim == 0 {
                return Err(Error::invalid("uniform needs lo < hi and dim ≥ 1"));
            }
            let data = (0..spec.n * spec.dim)
                .map(|_| rng.gen_range(lo..hi))
                .collect();
            Ok(Dataset::new(Matrix::from_vec(spec.n, spec.dim, data)?))
        }
        DatasetKind::TwoMoons | DatasetKind::Circles => {
            let n_first = spec.n - spec.n / 2;
            let n_second = spec.n / 2;
            let mut rows = Vec::with_capacity(spec.n);
            let mut labels = Vec::with_capacity(spec.n);
            let arc = |count: usize, full_turn: bool| -> Vec<f64> {
                if full_turn {
                    (0..count).map(|i| 2.0 * PI * i as f64 / count as f64).collect()
                } else if count == 1 {
                    vec![0.0]
                } else {
                    (0..count).map(|i| PI * i as f64 / (count - 1) as f64).collect()
                }
            };
            let circles = spec.kind == DatasetKind::Circles;
            for t in arc(n_first, circles) {
                rows.push(vec![t.cos(), t.sin()]);
                labels.push(0);
            }
            for t in arc(n_second, circles) {
                if circles {
                    rows.push(vec![spec.factor * t.cos(), spec.factor * t.sin()]);
                } else {
                    rows.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
                }
                labels.push(1);
            }
            if spec.noise > 0.0 {
                for r in &mut rows {
                    for v in r.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += spec.noise * z;
                    }
                }
            }
            Dataset::with_labels(Matrix::from_rows(&rows)?, labels)
        }
    }
}
