//! Representation richness: Gaussian entropy, singular-value spectra,
//! token similarity, plus the correlation and paired-rank statistics used to
//! relate them to forecast error.
//!
//! Rows of a representation matrix are samples and columns are dimensions.

mod dynamics;
mod io;
mod stats;

pub use dynamics::{track_dynamics, DynamicsLog, DynamicsRow, DynamicsTable, EpochPoint, SMOOTHING_WINDOW};
pub use io::{format_matrix, parse_matrix, read_matrix, write_matrix};
pub use stats::{pearson, wilcoxon_null_distribution, wilcoxon_signed_rank, StatReport, EXACT_WILCOXON_MAX_N};

use serde::{Deserialize, Serialize};

use crate::diffmath::{singular_values, Tensor};
use crate::error::{Error, Result};

/// Ridge added to every Gram eigenvalue.
pub const ENTROPY_RIDGE: f64 = 1e-6;
/// Singular values above this count as dominant.
pub const DOMINANT_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RichnessReport {
    /// Gaussian entropy in nats.
    pub entropy: f64,
    pub sv_spectrum: Vec<f64>,
    pub dominant_ratio: f64,
    pub n_samples: usize,
    pub dim: usize,
}

/// `½·log((2πe)^d · det(ZᵀZ/n + εI))`, with the log-determinant taken as a
/// sum of log-eigenvalues obtained from the singular values of `Z`.
pub fn gaussian_entropy(z: &Tensor, eps: f64) -> Result<f64> {
    entropy_from_spectrum(&singular_values(z)?, z.rows(), z.cols(), eps)
}

fn entropy_from_spectrum(sigma: &[f64], n: usize, d: usize, eps: f64) -> Result<f64> {
    if n == 0 || d == 0 {
        return Err(Error::Degenerate("entropy of an empty matrix".into()));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("ridge must be positive, got {eps}")));
    }
    let log_det: f64 = sigma.iter().map(|s| (s * s / n as f64 + eps).ln()).sum::<f64>()
        + (d - sigma.len()) as f64 * eps.ln();
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    Ok(0.5 * (d as f64 * two_pi_e.ln() + log_det))
}

/// Fraction of `sigma` strictly above `threshold`; empty input gives 0.
pub fn ratio_above(sigma: &[f64], threshold: f64) -> f64 {
    if sigma.is_empty() {
        return 0.0;
    }
    sigma.iter().filter(|&&s| s > threshold).count() as f64 / sigma.len() as f64
}

/// Fraction of singular values above `threshold`. In relative mode each
/// value is first divided by the largest one.
pub fn dominant_sv_ratio(z: &Tensor, threshold: f64, relative: bool) -> Result<f64> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Config("threshold must be positive".into()));
    }
    let sigma = singular_values(z)?;
    Ok(spectrum_ratio(&sigma, threshold, relative))
}

fn spectrum_ratio(sigma: &[f64], threshold: f64, relative: bool) -> f64 {
    let top = sigma.first().copied().unwrap_or(0.0);
    if relative {
        if top == 0.0 {
            return 0.0;
        }
        let scaled: Vec<f64> = sigma.iter().map(|s| s / top).collect();
        ratio_above(&scaled, threshold)
    } else {
        ratio_above(sigma, threshold)
    }
}

pub fn richness_report(z: &Tensor, eps: f64, threshold: f64) -> Result<RichnessReport> {
    let sigma = singular_values(z)?;
    Ok(RichnessReport {
        entropy: entropy_from_spectrum(&sigma, z.rows(), z.cols(), eps)?,
        dominant_ratio: spectrum_ratio(&sigma, threshold, false),
        n_samples: z.rows(),
        dim: z.cols(),
        sv_spectrum: sigma,
    })
}

/// Pairwise cosine similarity between rows. Zero rows are similar to
/// nothing, themselves included.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap(pub Tensor);

pub fn similarity_map(z: &Tensor) -> SimilarityMap {
    let norms: Vec<f64> = (0..z.rows())
        .map(|i| z.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let l = z.rows();
    let mut m = Tensor::zeros(l, l);
    for i in 0..l {
        for j in i..l {
            let s = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                let dot: f64 = z.row_slice(i).iter().zip(z.row_slice(j)).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    SimilarityMap(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::rng::{normal_tensor, seeded};

    #[test]
    fn zero_matrix_is_ridge_floor() {
        let z = Tensor::zeros(5, 2);
        let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
        let expect = 0.5 * (two_pi_e.powi(2) * 1e-12).ln();
        assert!((gaussian_entropy(&z, 1e-6).unwrap() - expect).abs() < 1e-12);
        assert!(gaussian_entropy(&z, 0.0).is_err());
    }

    #[test]
    fn identity_covariance() {
        let z = normal_tensor(&mut seeded(11), 10_000, 2, 1.0);
        let h = gaussian_entropy(&z, ENTROPY_RIDGE).unwrap();
        let two_pi_e: f64 = 2.0 * std::f64::consts::PI * std::f64::consts::E;
        assert!((h - two_pi_e.ln()).abs() < 0.05, "{h}");
    }

    #[test]
    fn scaling_shifts_entropy() {
        let z = normal_tensor(&mut seeded(12), 50, 3, 1.0);
        let c = 3.0f64;
        let a = gaussian_entropy(&z, 1e-12).unwrap();
        let b = gaussian_entropy(&z.scale(c), 1e-12).unwrap();
        assert!((b - a - 3.0 * c.ln()).abs() < 1e-8);
    }

    #[test]
    fn wide_matrix_counts_missing_dimensions() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let two_pi_e: f64 = 2.0 * std::f64::consts::PI * std::f64::consts::E;
        let expect = 0.5 * (3.0 * two_pi_e.ln() + (1.0 + 1e-6f64).ln() + 2.0 * 1e-6f64.ln());
        assert!((gaussian_entropy(&z, 1e-6).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn dominant_ratio_cases() {
        assert_eq!(ratio_above(&[5.0, 0.5, 0.05, 0.01], 0.1), 0.5);
        assert_eq!(dominant_sv_ratio(&Tensor::zeros(3, 3), 0.1, false).unwrap(), 0.0);
        assert_eq!(dominant_sv_ratio(&Tensor::identity(4), 0.1, false).unwrap(), 1.0);
        let d = Tensor::from_fn(3, 3, |i, j| if i == j { [50.0, 2.0, 1.0][i] } else { 0.0 });
        assert_eq!(dominant_sv_ratio(&d, 0.1, false).unwrap(), 1.0);
        assert!((dominant_sv_ratio(&d, 0.1, true).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn similarity_cases() {
        let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(similarity_map(&same).0.max_abs_diff(&Tensor::filled(2, 2, 1.0)) < 1e-15);
        assert_eq!(similarity_map(&Tensor::identity(3)).0, Tensor::identity(3));
        let h = 0.5f64.sqrt();
        let m = similarity_map(&Tensor::from_rows(&[vec![1.0, 0.0], vec![h, h]]).unwrap()).0;
        assert!((m[(0, 1)] - h).abs() < 1e-15);
        let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(similarity_map(&z).0[(0, 0)], 0.0);
    }

    #[test]
    fn report_fields() {
        let r = richness_report(&Tensor::identity(3), ENTROPY_RIDGE, DOMINANT_THRESHOLD).unwrap();
        assert_eq!(r.sv_spectrum, vec![1.0; 3]);
        assert_eq!((r.n_samples, r.dim, r.dominant_ratio), (3, 3, 1.0));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<RichnessReport>(&json).unwrap(), r);
    }
}
