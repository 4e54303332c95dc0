//! Input pipeline: reversible instance normalization, patching, complementor
//! banks and token assembly.
//!
//! Each function exists twice: a plain version on [`Tensor`]s and a
//! `*_var` version that records onto a [`Graph`] so gradients reach the
//! embedding, positional and complementor parameters.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::rng::Rng;
use crate::diffmath::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to per-window standard deviations.
pub const REVIN_STD_FLOOR: f64 = 1e-5;

/// One look-back/horizon pair; rows are time, columns are channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    pub x: Tensor,
    pub y: Tensor,
    pub channel_names: Vec<String>,
}

impl SeriesWindow {
    pub fn new(x: Tensor, y: Tensor, channel_names: Vec<String>) -> Result<Self> {
        if x.rows() == 0 || y.rows() == 0 || x.cols() == 0 {
            return Err(Error::Config("window needs T_in > 0, T_out > 0 and N >= 1".into()));
        }
        if x.cols() != y.cols() {
            return Err(Error::shape("SeriesWindow", &x.shape(), &y.shape()));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Numerical("window contains non-finite values".into()));
        }
        Ok(Self { x, y, channel_names })
    }

    pub fn t_in(&self) -> usize {
        self.x.rows()
    }

    pub fn t_out(&self) -> usize {
        self.y.rows()
    }

    pub fn n_channels(&self) -> usize {
        self.x.cols()
    }

    /// The single-channel window for column `c`.
    pub fn channel(&self, c: usize) -> SeriesWindow {
        SeriesWindow {
            x: Tensor::column(self.x.column_vec(c)),
            y: Tensor::column(self.y.column_vec(c)),
            channel_names: self.channel_names.get(c).cloned().into_iter().collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub t_in: usize,
}

impl PatchConfig {
    pub fn new(patch_len: usize, stride: usize, t_in: usize) -> Result<Self> {
        if patch_len == 0 || stride == 0 || t_in == 0 {
            return Err(Error::Config("patch_len, stride and t_in must be positive".into()));
        }
        if patch_len > t_in {
            return Err(Error::Config(format!("patch_len {patch_len} exceeds t_in {t_in}")));
        }
        if stride > patch_len {
            return Err(Error::Config(format!("stride {stride} exceeds patch_len {patch_len}")));
        }
        Ok(Self {
            patch_len,
            stride,
            t_in,
        })
    }

    /// `(t_in − P) / stride + 2`.
    pub fn n_patches(&self) -> usize {
        (self.t_in - self.patch_len) / self.stride + 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevinState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel standardization of a look-back window (population std,
/// floored at [`REVIN_STD_FLOOR`]).
pub fn revin_normalize(x: &Tensor) -> (Tensor, RevinState) {
    let (t, n) = (x.rows(), x.cols());
    let mut mean = vec![0.0; n];
    let mut std = vec![0.0; n];
    for c in 0..n {
        let m = (0..t).map(|i| x[(i, c)]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (x[(i, c)] - m).powi(2)).sum::<f64>() / t as f64;
        mean[c] = m;
        std[c] = var.sqrt().max(REVIN_STD_FLOOR);
    }
    let out = Tensor::from_fn(t, n, |i, c| (x[(i, c)] - mean[c]) / std[c]);
    (out, RevinState { mean, std })
}

pub fn revin_denormalize(y: &Tensor, state: &RevinState) -> Result<Tensor> {
    if y.cols() != state.mean.len() {
        return Err(Error::shape("revin_denormalize", &y.shape(), &[state.mean.len()]));
    }
    Ok(Tensor::from_fn(y.rows(), y.cols(), |i, c| {
        y[(i, c)] * state.std[c] + state.mean[c]
    }))
}

/// Pads by repeating the last value `stride` times, then takes length-`P`
/// windows at offsets `0, stride, 2·stride, …`.
pub fn patchify(channel: &[f64], cfg: &PatchConfig) -> Result<Tensor> {
    if channel.len() != cfg.t_in {
        return Err(Error::shape("patchify", &[channel.len()], &[cfg.t_in]));
    }
    if cfg.patch_len > channel.len() {
        return Err(Error::Config("patch_len exceeds series length".into()));
    }
    let last = *channel.last().expect("t_in > 0");
    let padded: Vec<f64> = channel
        .iter()
        .copied()
        .chain(std::iter::repeat_n(last, cfg.stride))
        .collect();
    let n = cfg.n_patches();
    Ok(Tensor::from_fn(n, cfg.patch_len, |r, j| padded[r * cfg.stride + j]))
}

/// Learnable complementor rows: one `K×width` matrix per channel, or a
/// single matrix shared by all channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplementorBank {
    pub raw: Vec<Tensor>,
    pub k: usize,
    pub width: usize,
}

impl ComplementorBank {
    /// Every bank starts as the first `k` rows of a random orthonormal
    /// basis of `R^width`.
    pub fn init_orthonormal(rng: &mut Rng, n_banks: usize, k: usize, width: usize) -> Result<Self> {
        if k > width {
            return Err(Error::Config(format!(
                "{k} complementors cannot be orthonormal in dimension {width}"
            )));
        }
        let raw = (0..n_banks).map(|_| random_orthonormal_rows(rng, k, width)).collect();
        Ok(Self { raw, k, width })
    }

    pub fn n_banks(&self) -> usize {
        self.raw.len()
    }

    pub fn normalized(&self, bank: usize) -> Result<Tensor> {
        normalize_rows(&self.raw[bank])
    }

    /// Replaces identically-zero rows with fresh random unit rows. Returns
    /// the number of rows replaced.
    pub fn reseed_zero_rows(&mut self, rng: &mut Rng) -> usize {
        reseed_zero_rows(&mut self.raw, rng)
    }
}

pub(crate) fn reseed_zero_rows(banks: &mut [Tensor], rng: &mut Rng) -> usize {
    let mut count = 0;
    for bank in banks {
        for r in 0..bank.rows() {
            if bank.row_slice(r).iter().all(|&v| v == 0.0) {
                let fresh: Vec<f64> = (0..bank.cols()).map(|_| StandardNormal.sample(rng)).collect();
                let norm = fresh.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (dst, v) in bank.row_slice_mut(r).iter_mut().zip(fresh) {
                    *dst = v / norm;
                }
                count += 1;
            }
        }
    }
    count
}

pub(crate) fn random_orthonormal_rows(rng: &mut Rng, k: usize, width: usize) -> Tensor {
    let mut out = Tensor::zeros(k, width);
    let mut r = 0;
    while r < k {
        let mut v: Vec<f64> = (0..width).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for p in 0..r {
                let prev = out.row_slice(p);
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, &b) in v.iter_mut().zip(prev) {
                    *x -= dot * b;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for (dst, x) in out.row_slice_mut(r).iter_mut().zip(v) {
            *dst = x / norm;
        }
        r += 1;
    }
    out
}

/// Patch (or variate) tokens followed by complementor rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub n_original: usize,
    pub n_complementors: usize,
}

impl TokenSequence {
    pub fn complementor_rows(&self) -> Tensor {
        self.tokens.slice_rows(self.n_original, self.tokens.rows())
    }
}

/// [`TokenSequence`] recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct TokenVar {
    pub var: Var,
    pub n_original: usize,
    pub n_complementors: usize,
}

impl TokenVar {
    pub fn rows(&self) -> usize {
        self.n_original + self.n_complementors
    }
}

pub fn attach_complementors_var(g: &mut Graph, z0: Var, s_norm: Option<Var>) -> Result<TokenVar> {
    let n_original = g.value(z0).rows();
    let Some(s) = s_norm else {
        return Ok(TokenVar {
            var: z0,
            n_original,
            n_complementors: 0,
        });
    };
    let k = g.value(s).rows();
    if k == 0 {
        if g.value(s).cols() != g.value(z0).cols() {
            return Err(Error::shape("attach_complementors", &g.value(z0).shape(), &g.value(s).shape()));
        }
        return Ok(TokenVar {
            var: z0,
            n_original,
            n_complementors: 0,
        });
    }
    let var = g.concat_rows(&[z0, s])?;
    Ok(TokenVar {
        var,
        n_original,
        n_complementors: k,
    })
}

pub fn embed_var(g: &mut Graph, z: TokenVar, w_e: Var, b_e: Var) -> Result<TokenVar> {
    let proj = g.matmul(z.var, w_e)?;
    let var = g.add_row(proj, b_e)?;
    Ok(TokenVar { var, ..z })
}

pub fn add_positional_var(g: &mut Graph, z: TokenVar, pos: Var) -> Result<TokenVar> {
    let p = g.value(pos);
    if p.rows() != z.n_original {
        return Err(Error::shape("add_positional", &[z.n_original], &p.shape()));
    }
    let var = g.add_prefix_rows(z.var, pos)?;
    Ok(TokenVar { var, ..z })
}

/// Rows are original patches first, then the complementors.
pub fn attach_complementors(z0: &Tensor, s_norm: &Tensor) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let z = g.constant(z0.clone());
    let s = g.constant(s_norm.clone());
    let t = attach_complementors_var(&mut g, z, Some(s))?;
    Ok(TokenSequence {
        tokens: g.value(t.var).clone(),
        n_original: t.n_original,
        n_complementors: t.n_complementors,
    })
}

/// Affine projection `z·w_e + b_e` applied to every row.
pub fn embed(z: &TokenSequence, w_e: &Tensor, b_e: &Tensor) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let tv = TokenVar {
        var: g.constant(z.tokens.clone()),
        n_original: z.n_original,
        n_complementors: z.n_complementors,
    };
    let w = g.constant(w_e.clone());
    let b = g.constant(b_e.clone());
    let out = embed_var(&mut g, tv, w, b)?;
    Ok(TokenSequence {
        tokens: g.value(out.var).clone(),
        ..z.clone()
    })
}

/// Adds `pos` to the original rows only; complementor rows are untouched.
pub fn add_positional(z: &TokenSequence, pos: &Tensor) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let tv = TokenVar {
        var: g.constant(z.tokens.clone()),
        n_original: z.n_original,
        n_complementors: z.n_complementors,
    };
    let p = g.constant(pos.clone());
    let out = add_positional_var(&mut g, tv, p)?;
    Ok(TokenSequence {
        tokens: g.value(out.var).clone(),
        ..z.clone()
    })
}

/// Variate tokens: `xᵀ` (N×T_in) followed by the complementor rows.
pub fn invert_tokenize(x: &Tensor, s_norm: &Tensor) -> Result<TokenSequence> {
    if s_norm.cols() != x.rows() {
        return Err(Error::shape("invert_tokenize", &x.shape(), &s_norm.shape()));
    }
    let xt = x.transpose();
    if s_norm.rows() == 0 {
        return Ok(TokenSequence {
            n_original: xt.rows(),
            tokens: xt,
            n_complementors: 0,
        });
    }
    attach_complementors(&xt, s_norm)
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows(raw: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(raw.clone());
    let y = g.normalize_rows(x)?;
    Ok(g.value(y).clone())
}
