//! One-sided Jacobi SVD and a PSD matrix square root via symmetric
//! Jacobi eigendecomposition. Matrices here are small (at most a few
//! dozen rows), so quadratic sweeps are fine.

use super::Tensor;
use crate::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;

/// Thin SVD: `m = U diag(sigma) V^T` with `sigma` descending and U, V
/// having orthonormal columns (k = min(rows, cols) of them each).
pub fn svd(m: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
    if m.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "svd",
            detail: format!("expected rank-2, got {:?}", m.shape()),
        });
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    if rows < cols {
        // Work on the transpose and swap factors.
        let (u, s, v) = svd(&m.transpose()?.detached())?;
        return Ok((v, s, u));
    }

    // Columns of `a`, orthogonalized in place by plane rotations.
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.at2(i, j)).collect())
        .collect();
    let mut v = identity_cols(cols);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let app: f64 = dot(&a[p], &a[p]);
                let aqq: f64 = dot(&a[q], &a[q]);
                let apq: f64 = dot(&a[p], &a[q]);
                if apq.abs() <= OFF_DIAG_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence(MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut sigma = Vec::with_capacity(cols);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let max_norm = norms[order[0]].max(f64::MIN_POSITIVE);
    for &j in &order {
        sigma.push(norms[j]);
        if norms[j] > max_norm * 1e-300 && norms[j] > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
        }
    }
    // Null-space columns of U: complete to an orthonormal set.
    for j in 0..cols {
        if sigma[j] > 0.0 && u_cols[j].iter().any(|x| *x != 0.0) {
            continue;
        }
        let filled = orthonormal_fill(&u_cols, j, rows);
        u_cols[j] = filled;
    }

    let u = cols_to_tensor(&u_cols, rows)?;
    let v_sorted: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    let vt = cols_to_tensor(&v_sorted, cols)?;
    Ok((u, sigma, vt))
}

/// Symmetric PSD square root: returns R with R*R ~= s.
/// Eigenvalues in [-1e-8, 0] are clamped to zero; anything lower is an error.
pub fn psd_sqrt(s: &Tensor) -> Result<Tensor> {
    let (eigvecs, mut eigvals) = sym_eigen(s)?;
    let n = eigvals.len();
    for l in eigvals.iter_mut() {
        if *l < -1e-8 {
            return Err(Error::NegativeEigenvalue(*l));
        }
        *l = l.max(0.0).sqrt();
    }
    // R = Q diag(sqrt(lambda)) Q^T, then symmetrize against rounding.
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (k, l) in eigvals.iter().enumerate() {
                acc += eigvecs[k][i] * l * eigvecs[k][j];
            }
            r[i * n + j] = acc;
            r[j * n + i] = acc;
        }
    }
    Tensor::new(vec![n, n], r)
}

/// Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvector columns, eigenvalues), unordered.
pub(crate) fn sym_eigen(s: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if s.shape().len() != 2 || s.shape()[0] != s.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "sym_eigen",
            detail: format!("expected square, got {:?}", s.shape()),
        });
    }
    let n = s.shape()[0];
    let mut max_asym: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            max_asym = max_asym.max((s.at2(i, j) - s.at2(j, i)).abs());
            scale = scale.max(s.at2(i, j).abs());
        }
    }
    if max_asym > 1e-8 * scale.max(1.0) {
        return Err(Error::NotSymmetric(max_asym));
    }

    let mut a: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            0.5 * (s.at2(i, j) + s.at2(j, i))
        })
        .collect();
    let mut q = identity_cols(n);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(a[i * n + j].abs());
            }
        }
        if off <= OFF_DIAG_TOL * scale.max(1.0) {
            converged = true;
            break;
        }
        for p in 0..n {
            for qi in (p + 1)..n {
                let apq = a[p * n + qi];
                if apq.abs() <= OFF_DIAG_TOL * scale.max(1.0) {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[qi * n + qi];
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + qi];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + qi] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[qi * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[qi * n + k] = sn * apk + c * aqk;
                }
                rotate_pair(&mut q, p, qi, c, sn);
            }
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence(MAX_SWEEPS));
    }
    let eigvals: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    Ok((q, eigvals))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn identity_cols(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Apply the rotation [c -s; s c] to columns p and q.
fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let n = cols[p].len();
    for i in 0..n {
        let xp = cols[p][i];
        let xq = cols[q][i];
        cols[p][i] = c * xp - s * xq;
        cols[q][i] = s * xp + c * xq;
    }
}

fn cols_to_tensor(cols: &[Vec<f64>], rows: usize) -> Result<Tensor> {
    let n = cols.len();
    let mut data = vec![0.0; rows * n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..rows {
            data[i * n + j] = col[i];
        }
    }
    Tensor::new(vec![rows, n], data)
}

/// Gram-Schmidt a standard basis vector against the existing columns.
fn orthonormal_fill(cols: &[Vec<f64>], skip: usize, rows: usize) -> Vec<f64> {
    for seed in 0..rows {
        let mut v = vec![0.0; rows];
        v[seed] = 1.0;
        for (j, col) in cols.iter().enumerate() {
            if j == skip {
                continue;
            }
            let proj = dot(&v, col);
            for i in 0..rows {
                v[i] -= proj * col[i];
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
    vec![0.0; rows]
}
