use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Largest sample size for which Wilcoxon p-values are computed exactly.
pub const EXACT_WILCOXON_MAX_N: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Sample correlation with a two-sided p-value from Student's t on `n − 2`
/// degrees of freedom.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<StatReport> {
    if xs.len() != ys.len() {
        return Err(Error::shape("pearson", &[xs.len()], &[ys.len()]));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::Config(format!("correlation needs at least 3 pairs, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation undefined for constant input".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if 1.0 - r.abs() < 1e-15 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(e.to_string()))?;
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok(StatReport { statistic: r, p_value, n })
}

// Mid-ranks of |d| for non-zero differences, with tie-group sizes.
fn signed_ranks(diffs: &[f64]) -> (Vec<f64>, Vec<bool>, Vec<usize>) {
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    nz.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut ranks = vec![0.0; nz.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < nz.len() {
        let mut j = i;
        while j + 1 < nz.len() && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].fill(mid);
        ties.push(j - i + 1);
        i = j + 1;
    }
    let positive = nz.iter().map(|&d| d > 0.0).collect();
    (ranks, positive, ties)
}

/// Exact null distribution of the positive-rank sum for the given ranks:
/// `(w, probability)` pairs in increasing `w`, each sign pattern equally
/// likely.
pub fn wilcoxon_null_distribution(ranks: &[f64]) -> Vec<(f64, f64)> {
    // Mid-ranks are multiples of ½, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let patterns = 2f64.powi(ranks.len() as i32);
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0.0)
        .map(|(s, &c)| (s as f64 / 2.0, c / patterns))
        .collect()
}

/// Two-sided signed-rank test on paired samples.
///
/// The statistic is the rank sum of positive differences `a − b`; zero
/// differences are dropped and tied magnitudes share mid-ranks. Up to
/// [`EXACT_WILCOXON_MAX_N`] non-zero pairs the p-value is exact; beyond
/// that a normal approximation with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<StatReport> {
    if a.len() != b.len() {
        return Err(Error::shape("wilcoxon", &[a.len()], &[b.len()]));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (ranks, positive, ties) = signed_ranks(&diffs);
    let n = ranks.len();
    if n == 0 {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let w: f64 = ranks.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let p_value = if n <= EXACT_WILCOXON_MAX_N {
        let dist = wilcoxon_null_distribution(&ranks);
        let lower: f64 = dist.iter().filter(|(s, _)| *s <= w + 1e-9).map(|(_, p)| p).sum();
        let upper: f64 = dist.iter().filter(|(s, _)| *s >= w - 1e-9).map(|(_, p)| p).sum();
        (2.0 * lower.min(upper)).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * normal.sf(z)).min(1.0)
    };
    Ok(StatReport {
        statistic: w,
        p_value,
        n,
    })
}
