//! Diversification objective over a complementor bank.
//!
//! For a bank `S` (K×P, K ≤ P) with singular values `σᵢ`, the volume is
//! `∏σᵢ` and the loss is `−Σ 2·log(σᵢ + ε)`. With unit rows `Σσᵢ² = K`, so by
//! AM-GM the volume is at most 1 and reaches it exactly when the rows are
//! mutually orthogonal. The gradient with respect to the bank is
//! `−Σ 2/(σᵢ+ε) · uᵢvᵢᵀ`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffmath::rng::seeded;
use crate::diffmath::{svd, Graph, SvdResult, Tensor, Var};
use crate::error::{Error, Result};

/// Guard inside the logarithm.
pub const DCS_EPS: f64 = 1e-8;
/// Weight of the diversification term in the training objective.
pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Singular values closer than this are treated as repeated.
pub const DEGENERACY_GAP: f64 = 1e-9;
const PERTURBATION_STD: f64 = 1e-10;
const PERTURBATION_SEED: u64 = 0x5eed_d1f5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub sigma: Vec<f64>,
    pub volume: f64,
    pub loss: f64,
    pub orthogonality_gap: f64,
}

fn check_not_tall(s: &Tensor) -> Result<()> {
    if s.rows() > s.cols() {
        return Err(Error::Config(format!(
            "bank has {} rows but width {}; volume would vanish",
            s.rows(),
            s.cols()
        )));
    }
    Ok(())
}

/// Product of the K singular values.
pub fn volume(s: &Tensor) -> Result<f64> {
    check_not_tall(s)?;
    Ok(svd(s)?.sigma.iter().product())
}

fn loss_from_sigma(sigma: &[f64], eps: f64) -> f64 {
    -sigma.iter().map(|&s| 2.0 * (s + eps).ln()).sum::<f64>()
}

pub fn dcs_loss(s_norm: &Tensor, eps: f64) -> Result<f64> {
    check_not_tall(s_norm)?;
    Ok(loss_from_sigma(&svd(s_norm)?.sigma, eps))
}

fn is_degenerate(sigma: &[f64]) -> bool {
    sigma.windows(2).any(|w| (w[0] - w[1]).abs() < DEGENERACY_GAP)
}

// SVD of the bank, perturbed by tiny deterministic noise when two singular
// values coincide.
fn gradient_svd(s: &Tensor) -> Result<(SvdResult, bool)> {
    let dec = svd(s)?;
    if !is_degenerate(&dec.sigma) {
        return Ok((dec, false));
    }
    let mut rng = seeded(PERTURBATION_SEED);
    let noise = Normal::new(0.0, PERTURBATION_STD).expect("valid std");
    let jittered = s.map(|v| v + noise.sample(&mut rng));
    Ok((svd(&jittered)?, true))
}

fn singular_gradient(dec: &SvdResult, eps: f64) -> Tensor {
    let (k, p) = (dec.u.rows(), dec.v.rows());
    let mut g = Tensor::zeros(k, p);
    for (i, &s) in dec.sigma.iter().enumerate() {
        let w = -2.0 / (s + eps);
        for a in 0..k {
            let ua = dec.u[(a, i)] * w;
            for b in 0..p {
                g[(a, b)] += ua * dec.v[(b, i)];
            }
        }
    }
    g
}

/// Gradient of the loss with respect to the bank entries themselves.
#[derive(Clone, Debug)]
pub struct DcsGradient {
    pub grad: Tensor,
    /// Set when repeated singular values forced a perturbed decomposition.
    pub perturbed: bool,
}

/// `∂L/∂S = −Σ 2/(σᵢ+ε) uᵢvᵢᵀ`, without the row-normalization Jacobian.
pub fn dcs_singular_gradient(s_norm: &Tensor, eps: f64) -> Result<DcsGradient> {
    check_not_tall(s_norm)?;
    let (dec, perturbed) = gradient_svd(s_norm)?;
    Ok(DcsGradient {
        grad: singular_gradient(&dec, eps),
        perturbed,
    })
}

/// Gradient of `dcs_loss(normalize_rows(raw))` with respect to `raw`.
///
/// For a bank that already has unit rows this is the singular gradient
/// projected onto the tangent space of the unit-row constraint.
pub fn dcs_gradient(raw: &Tensor, eps: f64) -> Result<DcsGradient> {
    let mut g = Graph::new();
    let x = g.param(raw.clone());
    let s = g.normalize_rows(x)?;
    let s_norm = g.value(s).clone();
    let DcsGradient { grad, perturbed } = dcs_singular_gradient(&s_norm, eps)?;
    let gs = g.custom(
        &[s],
        Tensor::scalar(0.0),
        Box::new(move |dy, _, _| vec![grad.scale(dy.data()[0])]),
    );
    let grads = g.backward(gs)?;
    Ok(DcsGradient {
        grad: grads.get_or_zeros(x, raw.shape()),
        perturbed,
    })
}

/// Records `dcs_loss(s_norm)` on the graph as a scalar node.
pub fn dcs_loss_var(g: &mut Graph, s_norm: Var, eps: f64) -> Result<Var> {
    let s = g.value(s_norm);
    check_not_tall(s)?;
    let (dec, _) = gradient_svd(s)?;
    // loss value from the unperturbed spectrum
    let loss = loss_from_sigma(&svd(s)?.sigma, eps);
    let grad = singular_gradient(&dec, eps);
    Ok(g.custom(
        &[s_norm],
        Tensor::scalar(loss),
        Box::new(move |dy, _, _| vec![grad.scale(dy.data()[0])]),
    ))
}

/// `mse + λ·dcs`.
pub fn total_loss(mse: f64, dcs: f64, lambda_dcs: f64) -> f64 {
    mse + lambda_dcs * dcs
}

/// Largest `|⟨sᵢ, sⱼ⟩|` over distinct rows.
pub fn orthogonality_gap(s_norm: &Tensor) -> f64 {
    let mut gap = 0.0f64;
    for i in 0..s_norm.rows() {
        for j in i + 1..s_norm.rows() {
            let dot: f64 = s_norm
                .row_slice(i)
                .iter()
                .zip(s_norm.row_slice(j))
                .map(|(a, b)| a * b)
                .sum();
            gap = gap.max(dot.abs());
        }
    }
    gap
}

pub fn volume_report(s_norm: &Tensor, eps: f64) -> Result<VolumeReport> {
    check_not_tall(s_norm)?;
    let sigma = svd(s_norm)?.sigma;
    Ok(VolumeReport {
        volume: sigma.iter().product(),
        loss: loss_from_sigma(&sigma, eps),
        orthogonality_gap: orthogonality_gap(s_norm),
        sigma,
    })
}

/// Outcome of [`descend`].
#[derive(Clone, Debug)]
pub struct DescentOutcome {
    pub bank: Tensor,
    pub steps: usize,
    pub loss: f64,
    pub orthogonality_gap: f64,
}

/// Plain gradient descent on `dcs_loss(normalize_rows(raw))` alone, stopping
/// early once the normalized rows are within `gap_tol` of orthogonal.
pub fn descend(raw: &Tensor, lr: f64, max_steps: usize, gap_tol: f64) -> Result<DescentOutcome> {
    let mut bank = raw.clone();
    let mut steps = 0;
    while steps < max_steps {
        let s = crate::seqcomp::normalize_rows(&bank)?;
        if orthogonality_gap(&s) < gap_tol {
            break;
        }
        let g = dcs_gradient(&bank, DCS_EPS)?;
        for (b, d) in bank.data_mut().iter_mut().zip(g.grad.data()) {
            *b -= lr * d;
        }
        steps += 1;
    }
    let s = crate::seqcomp::normalize_rows(&bank)?;
    Ok(DescentOutcome {
        loss: dcs_loss(&s, DCS_EPS)?,
        orthogonality_gap: orthogonality_gap(&s),
        bank,
        steps,
    })
}
