//! Symmetric eigendecomposition.
//!
//! Householder reduction to tridiagonal form followed by implicit QL with
//! Wilkinson-style shifts. The routine is a port of the EISPACK `tred2`/`tql2`
//! pair (as popularised by JAMA), adapted to row-major storage.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Relative asymmetry that is silently averaged away before decomposition.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

const MAX_QL_ITERATIONS: usize = 100;

/// Eigenvalues in descending order with unit-norm eigenvectors stored column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.vectors.column(j)
    }

    /// `Σ_j λ_j u_j u_jᵀ` over the stored pairs.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.vectors.rows();
        let mut out = Matrix::zeros(n, n);
        for (j, &lambda) in self.values.iter().enumerate() {
            let u = self.vectors.column(j);
            for a in 0..n {
                let s = lambda * u[a];
                if s == 0.0 {
                    continue;
                }
                for (b, &ub) in u.iter().enumerate() {
                    out[(a, b)] += s * ub;
                }
            }
        }
        out
    }
}

/// Checks squareness and symmetry, returning a symmetrized copy.
pub(crate) fn symmetric_copy(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "expected a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::invalid(format!(
            "matrix is not symmetric (relative asymmetry {asym:e})"
        )));
    }
    let mut s = a.clone();
    s.symmetrize();
    Ok(s)
}

/// The `k` algebraically largest eigenpairs of a symmetric matrix.
///
/// Each eigenvector is flipped so that its largest-magnitude entry is positive.
pub fn sym_eigh_topk(a: &Matrix, k: usize) -> Result<EigenPairs> {
    let n = a.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "k must lie in 1..={n}, got {k}"
        )));
    }
    let sym = symmetric_copy(a)?;
    let (values, vectors_by_row) = tridiagonal_ql(&sym)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));

    let mut out_values = Vec::with_capacity(k);
    let mut out_vectors = Matrix::zeros(n, k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        out_values.push(values[idx]);
        let v = &vectors_by_row[idx * n..(idx + 1) * n];
        let sign = sign_of_dominant(v);
        for (i, &x) in v.iter().enumerate() {
            out_vectors[(i, col)] = sign * x;
        }
    }
    Ok(EigenPairs {
        values: out_values,
        vectors: out_vectors,
    })
}

/// Full eigendecomposition, equivalent to `sym_eigh_topk(a, dim(a))`.
pub fn sym_eigh(a: &Matrix) -> Result<EigenPairs> {
    sym_eigh_topk(a, a.rows())
}

fn sign_of_dominant(v: &[f64]) -> f64 {
    let mut best = 0.0_f64;
    let mut sign = 1.0;
    for &x in v {
        // strict comparison: the first of several equal-magnitude entries decides
        if x.abs() > best {
            best = x.abs();
            sign = if x < 0.0 { -1.0 } else { 1.0 };
        }
    }
    sign
}

/// Returns unsorted eigenvalues and the eigenvectors stored one per row.
fn tridiagonal_ql(a: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = a.rows();
    let mut v = a.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);
    // rotate rows of the transposed basis so the QL sweeps touch contiguous memory
    let mut vt = v.transpose().into_vec();
    tql2(n, &mut vt, &mut d, &mut e)?;
    Ok((d, vt))
}

fn tred2(v: &mut Matrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    if n == 0 {
        return;
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }

            for j in 0..i {
                let f = d[j];
                v[(j, i)] = f;
                let mut g = e[j] + v[(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                for k in j..i {
                    v[(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }

    // accumulate transformations
    for i in 0..(n - 1) {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = 0.0;
    }
    v[(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL on the tridiagonal (d, e). `vt` holds eigenvector `i` in row `i`.
fn tql2(n: usize, vt: &mut [f64], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }

        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERATIONS {
                    return Err(Error::Numeric(format!(
                        "eigensolver did not converge for eigenvalue {l} after {MAX_QL_ITERATIONS} iterations (residual off-diagonal {:e})",
                        e[l].abs()
                    )));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);

                    let (lo, hi) = vt.split_at_mut((i + 1) * n);
                    let row_i = &mut lo[i * n..];
                    let row_next = &mut hi[..n];
                    for (a, b) in row_i.iter_mut().zip(row_next.iter_mut()) {
                        let hb = *b;
                        *b = s * *a + c * hb;
                        *a = c * *a - s * hb;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}
