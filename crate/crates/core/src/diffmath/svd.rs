//! Thin singular value decomposition by one-sided (Hestenes) Jacobi.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 200;
pub const CONVERGENCE_TOL: f64 = 1e-12;

/// `a = u · diag(sigma) · vᵀ` with `r = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `m×r`, orthonormal columns.
    pub u: Tensor,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `n×r`, orthonormal columns.
    pub v: Tensor,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Tensor {
        let (m, n, r) = (self.u.rows(), self.v.rows(), self.sigma.len());
        Tensor::from_fn(m, n, |i, j| {
            (0..r).map(|k| self.u[(i, k)] * self.sigma[k] * self.v[(j, k)]).sum()
        })
    }
}

pub fn svd(a: &Tensor) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::Numerical("svd input contains non-finite values".into()));
    }
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose())?;
        let mut out = SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// Singular values only.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    Ok(svd(a)?.sigma)
}

// m >= n. Orthogonalizes the columns of a working copy; column norms are the
// singular values and the accumulated rotations form V.
fn jacobi_tall(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    // column-major working storage
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column_vec(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha: f64 = w[p].iter().map(|x| x * x).sum();
                let beta: f64 = w[q].iter().map(|x| x * x).sum();
                let gamma: f64 = w[p].iter().zip(&w[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= CONVERGENCE_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let max = norms.iter().copied().fold(0.0, f64::max);
        let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::Numerical(format!(
            "svd of {m}x{n} matrix did not converge in {MAX_SWEEPS} sweeps (condition estimate {:.3e})",
            max / min
        )));
    }

    let mut order: Vec<(usize, f64)> = w
        .iter()
        .enumerate()
        .map(|(j, c)| (j, c.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let smax = order.first().map_or(0.0, |o| o.1);
    let rank_tol = smax * f64::EPSILON * m.max(n) as f64;
    let mut u = Tensor::zeros(m, n);
    let mut vt = Tensor::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &(j, s)) in order.iter().enumerate() {
        if s > rank_tol && s > 0.0 {
            for i in 0..m {
                u[(i, k)] = w[j][i] / s;
            }
            sigma.push(s);
        } else {
            sigma.push(0.0);
            deficient.push(k);
        }
        for i in 0..n {
            vt[(i, k)] = v[j][i];
        }
    }
    complete_basis(&mut u, &deficient);

    let mut out = SvdResult { u, sigma, v: vt };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

// Fill the listed columns of `u` with unit vectors orthogonal to every other
// column, by Gram-Schmidt over the standard basis.
fn complete_basis(u: &mut Tensor, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (m, r) = (u.rows(), u.cols());
    let mut filled: Vec<usize> = (0..r).filter(|k| !missing.contains(k)).collect();
    let mut candidate = 0;
    for &k in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let dot: f64 = (0..m).map(|i| e[i] * u[(i, f)]).sum();
                    for (i, x) in e.iter_mut().enumerate() {
                        *x -= dot * u[(i, f)];
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for (i, x) in e.iter().enumerate() {
                    u[(i, k)] = x / norm;
                }
                filled.push(k);
                break;
            }
        }
    }
}

// Largest-magnitude entry of every u column is made positive.
fn fix_signs(out: &mut SvdResult) {
    for k in 0..out.sigma.len() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..out.u.rows() {
            let x = out.u[(i, k)];
            if x.abs() > best.abs() + 1e-14 {
                best = x;
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..out.u.rows() {
                out.u[(i, k)] = -out.u[(i, k)];
            }
            for i in 0..out.v.rows() {
                out.v[(i, k)] = -out.v[(i, k)];
            }
        }
    }
}
