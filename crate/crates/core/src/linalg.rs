//! Small dense f64 linear algebra: Cholesky, SPD inverse and a one-sided
//! Jacobi SVD. Matrices are row-major slices.

use crate::error::{Error, Result};

/// Lower factor `L` with `a = L·Lᵀ`, or `None` when a pivot is not positive.
pub fn cholesky_lower(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let l = cholesky_lower(a, n)?;
    // Invert L by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹.
    let mut li = vec![0.0; n * n];
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for p in c..i {
                s -= l[i * n + p] * li[p * n + c];
            }
            li[i * n + c] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for p in i..n {
                s += li[p * n + i] * li[p * n + j];
            }
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    if inv.iter().all(|v| v.is_finite()) {
        Some(inv)
    } else {
        None
    }
}

/// Upper factor `U` with `a⁻¹ = Uᵀ·U`.
pub fn inverse_cholesky_upper(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let inv = spd_inverse(a, n)?;
    let l = cholesky_lower(&inv, n)?;
    let mut u = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            u[j * n + i] = l[i * n + j];
        }
    }
    Some(u)
}

/// Thin SVD `a[m×n] = U·diag(σ)·Vᵀ` with `p = min(m, n)` singular values in
/// non-increasing order. `U` is `m×p`, `V` is `n×p`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Vec<f64>,
    pub sigma: Vec<f64>,
    pub v: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

const JACOBI_MAX_SWEEPS: usize = 60;
const JACOBI_TOL: f64 = 1e-15;

/// One-sided Jacobi on the columns of `a` (or of `aᵀ` when `m < n`).
pub fn svd(a: &[f64], m: usize, n: usize) -> Result<Svd> {
    if m < n {
        let mut at = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                at[j * m + i] = a[i * n + j];
            }
        }
        let s = svd(&at, n, m)?;
        return Ok(Svd {
            u: s.v,
            sigma: s.sigma,
            v: s.u,
            rows: m,
            cols: n,
        });
    }
    // Column-major working copy: columns are contiguous.
    let mut w: Vec<f64> = (0..n).flat_map(|j| (0..m).map(move |i| (i, j))).map(|(i, j)| a[i * n + j]).collect();
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (x, y) = (w[p * m + i], w[q * m + i]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (w[p * m + i], w[q * m + i]);
                    w[p * m + i] = c * x - s * y;
                    w[q * m + i] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[i * n + p], v[i * n + q]);
                    v[i * n + p] = c * x - s * y;
                    v[i * n + q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged || w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "svd did not converge within {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }
    let norms: Vec<f64> = (0..n)
        .map(|j| w[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut u = vec![0.0; m * n];
    let mut vs = vec![0.0; n * n];
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        for i in 0..m {
            u[i * n + dst] = if s > 0.0 { w[src * m + i] / s } else { 0.0 };
        }
        for i in 0..n {
            vs[i * n + dst] = v[i * n + src];
        }
    }
    Ok(Svd {
        u,
        sigma,
        v: vs,
        rows: m,
        cols: n,
    })
}
