//! Transformer encoder, decoding head and the full forecasting model.
//!
//! Complementor rows take part in every attention layer as keys, values and
//! (by default) queries; the head only ever sees the first `n_original`
//! rows of the encoder output.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffmath::rng::{normal_tensor, uniform_tensor, Rng};
use crate::diffmath::{Graph, Tensor, Var};
use crate::divloss::{dcs_loss_var, DCS_EPS};
use crate::error::{Error, Result};
use crate::seqcomp::{
    add_positional_var, attach_complementors_var, embed_var, patchify, revin_denormalize,
    revin_normalize, ComplementorBank, PatchConfig, RevinState, TokenVar,
};

/// Which rows of the sequence act as attention queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryRows {
    All,
    /// Only the leading `n_original` rows; keys and values still span the
    /// whole sequence.
    Original,
}

/// Per-head projections; the output projection is stored as one
/// `d_k×D` block per head, which is the concatenate-then-project layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T> {
    pub attn: AttentionParams<T>,
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub ff1_w: T,
    pub ff1_b: T,
    pub ff2_w: T,
    pub ff2_b: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
}

/// Linear head over the flattened original rows (patch mode) or applied to
/// each variate row (inverted mode).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderHead<T> {
    pub w: T,
    pub b: T,
}

impl<T> AttentionParams<T> {
    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    /// Visits head by head, `q, k, v, o` within each head.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionParams<U> {
        let mut out = AttentionParams {
            w_q: Vec::with_capacity(self.heads()),
            w_k: Vec::with_capacity(self.heads()),
            w_v: Vec::with_capacity(self.heads()),
            w_o: Vec::with_capacity(self.heads()),
        };
        for h in 0..self.heads() {
            out.w_q.push(f(&self.w_q[h]));
            out.w_k.push(f(&self.w_k[h]));
            out.w_v.push(f(&self.w_v[h]));
            out.w_o.push(f(&self.w_o[h]));
        }
        out
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for h in 0..self.heads() {
            out.push((format!("{prefix}.head{h}.w_q"), &self.w_q[h]));
            out.push((format!("{prefix}.head{h}.w_k"), &self.w_k[h]));
            out.push((format!("{prefix}.head{h}.w_v"), &self.w_v[h]));
            out.push((format!("{prefix}.head{h}.w_o"), &self.w_o[h]));
        }
    }

    fn all_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        for (((q, k), v), o) in self
            .w_q
            .iter_mut()
            .zip(self.w_k.iter_mut())
            .zip(self.w_v.iter_mut())
            .zip(self.w_o.iter_mut())
        {
            out.extend([q, k, v, o]);
        }
    }
}

impl AttentionParams<Tensor> {
    /// Uniform `±1/√fan_in` initialization.
    pub fn random(rng: &mut Rng, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding dimension {d_model} is not divisible by {heads} heads"
            )));
        }
        let d_k = d_model / heads;
        let b_in = 1.0 / (d_model as f64).sqrt();
        let mut p = AttentionParams {
            w_q: vec![],
            w_k: vec![],
            w_v: vec![],
            w_o: vec![],
        };
        for _ in 0..heads {
            p.w_q.push(uniform_tensor(rng, d_model, d_k, b_in));
            p.w_k.push(uniform_tensor(rng, d_model, d_k, b_in));
            p.w_v.push(uniform_tensor(rng, d_model, d_k, b_in));
            p.w_o.push(uniform_tensor(rng, d_k, d_model, b_in));
        }
        Ok(p)
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

impl<T> EncoderBlock<T> {
    /// Visits tensors in the same order as the parameter names.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderBlock<U> {
        EncoderBlock {
            ln1_gamma: f(&self.ln1_gamma),
            ln1_beta: f(&self.ln1_beta),
            attn: self.attn.map(&mut f),
            ln2_gamma: f(&self.ln2_gamma),
            ln2_beta: f(&self.ln2_beta),
            ff1_w: f(&self.ff1_w),
            ff1_b: f(&self.ff1_b),
            ff2_w: f(&self.ff2_w),
            ff2_b: f(&self.ff2_b),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.ln1.gamma"), &self.ln1_gamma));
        out.push((format!("{prefix}.ln1.beta"), &self.ln1_beta));
        self.attn.named(&format!("{prefix}.attn"), out);
        out.push((format!("{prefix}.ln2.gamma"), &self.ln2_gamma));
        out.push((format!("{prefix}.ln2.beta"), &self.ln2_beta));
        out.push((format!("{prefix}.ff1.w"), &self.ff1_w));
        out.push((format!("{prefix}.ff1.b"), &self.ff1_b));
        out.push((format!("{prefix}.ff2.w"), &self.ff2_w));
        out.push((format!("{prefix}.ff2.b"), &self.ff2_b));
    }

    fn all_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.ln1_gamma);
        out.push(&mut self.ln1_beta);
        self.attn.all_mut(out);
        out.push(&mut self.ln2_gamma);
        out.push(&mut self.ln2_beta);
        out.push(&mut self.ff1_w);
        out.push(&mut self.ff1_b);
        out.push(&mut self.ff2_w);
        out.push(&mut self.ff2_b);
    }
}

impl EncoderBlock<Tensor> {
    pub fn random(rng: &mut Rng, d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        if d_ff < d_model {
            return Err(Error::Config(format!("d_ff {d_ff} is smaller than d_model {d_model}")));
        }
        let attn = AttentionParams::random(rng, d_model, heads)?;
        let b1 = 1.0 / (d_model as f64).sqrt();
        let b2 = 1.0 / (d_ff as f64).sqrt();
        Ok(EncoderBlock {
            attn,
            ln1_gamma: Tensor::filled(1, d_model, 1.0),
            ln1_beta: Tensor::zeros(1, d_model),
            ff1_w: uniform_tensor(rng, d_model, d_ff, b1),
            ff1_b: uniform_tensor(rng, 1, d_ff, b1),
            ff2_w: uniform_tensor(rng, d_ff, d_model, b2),
            ff2_b: uniform_tensor(rng, 1, d_model, b2),
            ln2_gamma: Tensor::filled(1, d_model, 1.0),
            ln2_beta: Tensor::zeros(1, d_model),
        })
    }

    /// All-zero block, including the layer-norm gains.
    pub fn zeros(d_model: usize, heads: usize, d_ff: usize) -> Self {
        let d_k = d_model / heads;
        EncoderBlock {
            attn: AttentionParams {
                w_q: vec![Tensor::zeros(d_model, d_k); heads],
                w_k: vec![Tensor::zeros(d_model, d_k); heads],
                w_v: vec![Tensor::zeros(d_model, d_k); heads],
                w_o: vec![Tensor::zeros(d_k, d_model); heads],
            },
            ln1_gamma: Tensor::zeros(1, d_model),
            ln1_beta: Tensor::zeros(1, d_model),
            ff1_w: Tensor::zeros(d_model, d_ff),
            ff1_b: Tensor::zeros(1, d_ff),
            ff2_w: Tensor::zeros(d_ff, d_model),
            ff2_b: Tensor::zeros(1, d_model),
            ln2_gamma: Tensor::zeros(1, d_model),
            ln2_beta: Tensor::zeros(1, d_model),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> EncoderBlock<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

/// Knobs for one pass through the encoder.
#[derive(Clone, Copy, Debug, Default)]
pub struct EncodeOptions {
    /// Final block computes queries for the original rows only.
    pub restrict_final_queries: bool,
    /// Attention never looks at complementor keys.
    pub mask_complementor_keys: bool,
}

/// `softmax(Q Kᵀ/√d_k) V` per head, heads concatenated and projected.
/// Output has one row per query row.
pub fn multi_head_attention_var(
    g: &mut Graph,
    z: TokenVar,
    p: &AttentionParams<Var>,
    query_rows: QueryRows,
    mask_complementor_keys: bool,
) -> Result<Var> {
    let zq = match query_rows {
        QueryRows::All => z.var,
        QueryRows::Original => {
            if z.n_original == 0 {
                return Err(Error::Config("empty query selection".into()));
            }
            g.slice_rows(z.var, 0, z.n_original)?
        }
    };
    let mut out: Option<Var> = None;
    for h in 0..p.heads() {
        let q = g.matmul(zq, p.w_q[h])?;
        let k = g.matmul(z.var, p.w_k[h])?;
        let v = g.matmul(z.var, p.w_v[h])?;
        let d_k = g.value(q).cols() as f64;
        let raw = g.matmul_nt(q, k)?;
        let mut scores = g.scale(raw, 1.0 / d_k.sqrt());
        if mask_complementor_keys && z.n_complementors > 0 {
            scores = g.mask_cols_from(scores, z.n_original);
        }
        let attn = g.softmax_rows(scores);
        let ctx = g.matmul(attn, v)?;
        let proj = g.matmul(ctx, p.w_o[h])?;
        out = Some(match out {
            None => proj,
            Some(acc) => g.add(acc, proj)?,
        });
    }
    out.ok_or_else(|| Error::Config("attention needs at least one head".into()))
}

fn maybe_dropout(g: &mut Graph, x: Var, dropout: &mut Option<(&mut Rng, f64)>) -> Result<Var> {
    match dropout {
        Some((rng, rate)) if *rate > 0.0 => {
            let keep = 1.0 - *rate;
            let u = Uniform::new(0.0, 1.0).expect("unit interval");
            let [r, c] = g.value(x).shape();
            let mask = Tensor::from_fn(r, c, |_, _| if u.sample(*rng) < keep { 1.0 / keep } else { 0.0 });
            g.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

/// Pre-norm residual block: `z + attn(LN(z))`, then `+ FFN(LN(·))` with a
/// GELU feed-forward.
pub fn encoder_block_var(
    g: &mut Graph,
    z: TokenVar,
    block: &EncoderBlock<Var>,
    query_rows: QueryRows,
    mask_complementor_keys: bool,
    dropout: &mut Option<(&mut Rng, f64)>,
) -> Result<TokenVar> {
    let h = g.layer_norm(z.var, block.ln1_gamma, block.ln1_beta)?;
    let normed = TokenVar { var: h, ..z };
    let attn = multi_head_attention_var(g, normed, &block.attn, query_rows, mask_complementor_keys)?;
    let attn = maybe_dropout(g, attn, dropout)?;
    let (resid, out_tokens) = match query_rows {
        QueryRows::All => (z.var, z),
        QueryRows::Original => (
            g.slice_rows(z.var, 0, z.n_original)?,
            TokenVar {
                n_complementors: 0,
                ..z
            },
        ),
    };
    let z1 = g.add(resid, attn)?;
    let h2 = g.layer_norm(z1, block.ln2_gamma, block.ln2_beta)?;
    let f1 = g.matmul(h2, block.ff1_w)?;
    let f1 = g.add_row(f1, block.ff1_b)?;
    let f1 = g.gelu(f1);
    let f2 = g.matmul(f1, block.ff2_w)?;
    let f2 = g.add_row(f2, block.ff2_b)?;
    let f2 = maybe_dropout(g, f2, dropout)?;
    let var = g.add(z1, f2)?;
    Ok(TokenVar { var, ..out_tokens })
}

/// Applies the blocks in order over every token.
pub fn encode_var(
    g: &mut Graph,
    z: TokenVar,
    blocks: &[EncoderBlock<Var>],
    opts: EncodeOptions,
    dropout: &mut Option<(&mut Rng, f64)>,
) -> Result<TokenVar> {
    if blocks.is_empty() {
        return Err(Error::Config("encoder needs at least one block".into()));
    }
    let mut cur = z;
    for (i, b) in blocks.iter().enumerate() {
        let last = i + 1 == blocks.len();
        let q = if last && opts.restrict_final_queries {
            QueryRows::Original
        } else {
            QueryRows::All
        };
        cur = encoder_block_var(g, cur, b, q, opts.mask_complementor_keys, dropout)?;
    }
    Ok(cur)
}

/// Slices the original rows, flattens them row-major and projects to the
/// horizon: `1×T_out`.
pub fn decode_var(g: &mut Graph, z_enc: Var, head: &DecoderHead<Var>, n_original: usize) -> Result<Var> {
    let rows = g.value(z_enc).rows();
    if rows < n_original || n_original == 0 {
        return Err(Error::shape("decode", &[rows], &[n_original]));
    }
    let orig = if rows == n_original {
        z_enc
    } else {
        g.slice_rows(z_enc, 0, n_original)?
    };
    let flat = g.flatten(orig);
    let y = g.matmul(flat, head.w)?;
    g.add_row(y, head.b)
}

/// Inverted-mode head: projects each of the first `n_original` rows to the
/// horizon, giving `n_original×T_out`.
pub fn decode_rows_var(g: &mut Graph, z_enc: Var, head: &DecoderHead<Var>, n_original: usize) -> Result<Var> {
    let rows = g.value(z_enc).rows();
    if rows < n_original || n_original == 0 {
        return Err(Error::shape("decode", &[rows], &[n_original]));
    }
    let orig = if rows == n_original {
        z_enc
    } else {
        g.slice_rows(z_enc, 0, n_original)?
    };
    let y = g.matmul(orig, head.w)?;
    g.add_row(y, head.b)
}

/// Plain-tensor attention, for inspection and tests.
pub fn multi_head_attention(
    z: &Tensor,
    n_original: usize,
    p: &AttentionParams<Tensor>,
    query_rows: QueryRows,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let tv = TokenVar {
        var: g.constant(z.clone()),
        n_original,
        n_complementors: z.rows() - n_original,
    };
    let pv = p.map(|t| g.constant(t.clone()));
    let out = multi_head_attention_var(&mut g, tv, &pv, query_rows, false)?;
    Ok(g.value(out).clone())
}

/// Plain-tensor encoder block.
pub fn encoder_block(z: &Tensor, n_original: usize, block: &EncoderBlock<Tensor>) -> Result<Tensor> {
    encode(z, n_original, std::slice::from_ref(block))
}

/// Plain-tensor encoder.
pub fn encode(z: &Tensor, n_original: usize, blocks: &[EncoderBlock<Tensor>]) -> Result<Tensor> {
    let mut g = Graph::new();
    let tv = TokenVar {
        var: g.constant(z.clone()),
        n_original,
        n_complementors: z.rows() - n_original,
    };
    let bv: Vec<_> = blocks.iter().map(|b| b.map(|t| g.constant(t.clone()))).collect();
    let out = encode_var(&mut g, tv, &bv, EncodeOptions::default(), &mut None)?;
    Ok(g.value(out.var).clone())
}

/// Plain-tensor decode.
pub fn decode(z_enc: &Tensor, head: &DecoderHead<Tensor>, n_original: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let z = g.constant(z_enc.clone());
    let h = DecoderHead {
        w: g.constant(head.w.clone()),
        b: g.constant(head.b.clone()),
    };
    let y = decode_var(&mut g, z, &h, n_original)?;
    Ok(g.value(y).data().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    /// Channel-independent strided patches.
    #[default]
    Patch,
    /// One token per variate (whole look-back window).
    Invert,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t_in: usize,
    pub t_out: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub k_complementors: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_ff: usize,
    pub n_channels: usize,
    pub tokenize_mode: TokenizeMode,
    pub share_complementors: bool,
    pub restrict_final_queries: bool,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("patch_len", self.patch_len),
            ("stride", self.stride),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("d_ff", self.d_ff),
            ("n_channels", self.n_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff < self.d_model {
            return Err(Error::Config("d_ff must be at least d_model".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        match self.tokenize_mode {
            TokenizeMode::Patch => {
                PatchConfig::new(self.patch_len, self.stride, self.t_in)?;
                if self.k_complementors > self.patch_len {
                    return Err(Error::Config(format!(
                        "k_complementors {} exceeds patch_len {}",
                        self.k_complementors, self.patch_len
                    )));
                }
            }
            TokenizeMode::Invert => {
                if self.k_complementors > self.t_in {
                    return Err(Error::Config(format!(
                        "k_complementors {} exceeds t_in {}",
                        self.k_complementors, self.t_in
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn patch_config(&self) -> Result<PatchConfig> {
        PatchConfig::new(self.patch_len, self.stride, self.t_in)
    }

    /// Original token count per sequence: patches per channel, or variates.
    pub fn n_original(&self) -> usize {
        match self.tokenize_mode {
            TokenizeMode::Patch => (self.t_in - self.patch_len) / self.stride + 2,
            TokenizeMode::Invert => self.n_channels,
        }
    }

    pub fn token_width(&self) -> usize {
        match self.tokenize_mode {
            TokenizeMode::Patch => self.patch_len,
            TokenizeMode::Invert => self.t_in,
        }
    }

    pub fn n_banks(&self) -> usize {
        if self.k_complementors == 0 {
            0
        } else if self.share_complementors || self.tokenize_mode == TokenizeMode::Invert {
            1
        } else {
            self.n_channels
        }
    }

    fn bank_for_channel(&self, c: usize) -> usize {
        if self.n_banks() > 1 {
            c
        } else {
            0
        }
    }
}

/// Every learnable tensor of the model, generic over plain values and
/// graph handles.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embed_w: T,
    pub embed_b: T,
    pub pos: Option<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub head: DecoderHead<T>,
    pub banks: Vec<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            embed_w: f(&self.embed_w),
            embed_b: f(&self.embed_b),
            pos: self.pos.as_ref().map(&mut f),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            head: DecoderHead {
                w: f(&self.head.w),
                b: f(&self.head.b),
            },
            banks: self.banks.iter().map(&mut f).collect(),
        }
    }

    /// Parameters with stable names, in declaration order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("embed.w".to_string(), &self.embed_w),
            ("embed.b".to_string(), &self.embed_b),
        ];
        if let Some(p) = &self.pos {
            out.push(("pos".to_string(), p));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("block{i}"), &mut out);
        }
        out.push(("head.w".to_string(), &self.head.w));
        out.push(("head.b".to_string(), &self.head.b));
        for (i, b) in self.banks.iter().enumerate() {
            out.push((format!("bank{i}"), b));
        }
        out
    }

    /// Mutable references in the same order as [`named`](Self::named).
    pub fn all_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        if let Some(p) = &mut self.pos {
            out.push(p);
        }
        for b in &mut self.blocks {
            b.all_mut(&mut out);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out.extend(self.banks.iter_mut());
        out
    }
}

impl ModelParams<Tensor> {
    pub fn tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_tensors(&mut self, values: Vec<Tensor>) -> Result<()> {
        let slots = self.all_mut();
        if slots.len() != values.len() {
            return Err(Error::shape("set_tensors", &[slots.len()], &[values.len()]));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape("set_tensors", &slot.shape(), &v.shape()));
            }
            *slot = v;
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// The forecasting model: parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

/// A model bound to a graph: parameter handles and row-normalized banks.
pub struct BoundModel<'a> {
    pub config: &'a ModelConfig,
    pub params: ModelParams<Var>,
    pub bank_norm: Vec<Var>,
}

/// Graph outputs for one window.
pub struct WindowOutput {
    /// Forecast in data space, `T_out×N`.
    pub forecast: Var,
    /// Encoder output of every sequence (one per channel in patch mode).
    pub z_enc: Vec<TokenVar>,
}

impl Model {
    /// Initializes in declaration order: embedding, positional table,
    /// blocks, head, then complementor banks. Models that differ only in
    /// `k_complementors` therefore share every other weight for a seed.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let width = config.token_width();
        let d = config.d_model;
        let n_orig = config.n_original();
        let b_e = 1.0 / (width as f64).sqrt();
        let embed_w = uniform_tensor(rng, width, d, b_e);
        let embed_b = uniform_tensor(rng, 1, d, b_e);
        let pos = match config.tokenize_mode {
            TokenizeMode::Patch => Some(normal_tensor(rng, n_orig, d, 0.02)),
            TokenizeMode::Invert => None,
        };
        let blocks = (0..config.blocks)
            .map(|_| EncoderBlock::random(rng, d, config.heads, config.d_ff))
            .collect::<Result<Vec<_>>>()?;
        let head_in = match config.tokenize_mode {
            TokenizeMode::Patch => n_orig * d,
            TokenizeMode::Invert => d,
        };
        let b_h = 1.0 / (head_in as f64).sqrt();
        let head = DecoderHead {
            w: uniform_tensor(rng, head_in, config.t_out, b_h),
            b: uniform_tensor(rng, 1, config.t_out, b_h),
        };
        let banks = ComplementorBank::init_orthonormal(rng, config.n_banks(), config.k_complementors, width)?.raw;
        Ok(Self {
            config,
            params: ModelParams {
                embed_w,
                embed_b,
                pos,
                blocks,
                head,
                banks,
            },
        })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph) -> Result<BoundModel<'a>> {
        let params = self.params.map(|t| g.param(t.clone()));
        let bank_norm = params
            .banks
            .iter()
            .map(|&b| g.normalize_rows(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel {
            config: &self.config,
            params,
            bank_norm,
        })
    }

    pub fn bank(&self) -> ComplementorBank {
        ComplementorBank {
            raw: self.params.banks.clone(),
            k: self.config.k_complementors,
            width: self.config.token_width(),
        }
    }

    /// Forecast for a look-back window `T_in×N`; returns `T_out×N`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, EncodeOptions {
            restrict_final_queries: self.config.restrict_final_queries,
            mask_complementor_keys: false,
        })
    }

    pub fn forward_with(&self, x: &Tensor, opts: EncodeOptions) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let out = bound.forward_window(&mut g, x, opts, &mut None)?;
        Ok(g.value(out.forecast).clone())
    }

    /// Forecast and encoder outputs (full token set) for one window.
    pub fn forward_detailed(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let out = bound.forward_window(&mut g, x, EncodeOptions::default(), &mut None)?;
        let z = out.z_enc.iter().map(|t| g.value(t.var).clone()).collect();
        Ok((g.value(out.forecast).clone(), z))
    }

    /// Forecast one channel on its own, using that channel's bank.
    pub fn forecast_channel(&self, series: &[f64], channel: usize) -> Result<Vec<f64>> {
        if self.config.tokenize_mode != TokenizeMode::Patch {
            return Err(Error::Config("per-channel forecasting needs patch mode".into()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let x = Tensor::column(series.to_vec());
        let (normed, state) = revin_normalize(&x);
        let opts = EncodeOptions {
            restrict_final_queries: self.config.restrict_final_queries,
            mask_complementor_keys: false,
        };
        let (y, _) = bound.channel_sequence(&mut g, &normed.column_vec(0), channel, opts, &mut None)?;
        let y = g.affine_rows(y, &state.std, &state.mean)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Sum over channels of the diversification loss, divided by the bank
    /// count. Zero without complementors.
    pub fn mean_dcs_loss(&self) -> Result<f64> {
        if self.params.banks.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for b in &self.params.banks {
            total += crate::divloss::dcs_loss(&crate::seqcomp::normalize_rows(b)?, DCS_EPS)?;
        }
        Ok(total / self.params.banks.len() as f64)
    }
}

impl BoundModel<'_> {
    /// One channel through patching, complementors, embedding, positions,
    /// encoder and head. Returns the normalized-space forecast `1×T_out`
    /// and the encoder output.
    pub fn channel_sequence(
        &self,
        g: &mut Graph,
        series: &[f64],
        channel: usize,
        opts: EncodeOptions,
        dropout: &mut Option<(&mut Rng, f64)>,
    ) -> Result<(Var, TokenVar)> {
        let cfg = self.config;
        let patches = patchify(series, &cfg.patch_config()?)?;
        let z0 = g.constant(patches);
        let bank = self.bank_norm.get(cfg.bank_for_channel(channel)).copied();
        let tokens = attach_complementors_var(g, z0, bank)?;
        let tokens = embed_var(g, tokens, self.params.embed_w, self.params.embed_b)?;
        let pos = self.params.pos.ok_or_else(|| Error::Config("patch mode needs positions".into()))?;
        let tokens = add_positional_var(g, tokens, pos)?;
        let z_enc = encode_var(g, tokens, &self.params.blocks, opts, dropout)?;
        let y = decode_var(g, z_enc.var, &self.params.head, z_enc.n_original)?;
        Ok((y, z_enc))
    }

    /// Whole-window forward pass: RevIN, per-channel (or inverted) encoding,
    /// head, and de-normalization.
    pub fn forward_window(
        &self,
        g: &mut Graph,
        x: &Tensor,
        opts: EncodeOptions,
        dropout: &mut Option<(&mut Rng, f64)>,
    ) -> Result<WindowOutput> {
        let cfg = self.config;
        if x.rows() != cfg.t_in || x.cols() != cfg.n_channels {
            return Err(Error::shape("forward", &x.shape(), &[cfg.t_in, cfg.n_channels]));
        }
        let (normed, state) = revin_normalize(x);
        let (rows, z_enc) = match cfg.tokenize_mode {
            TokenizeMode::Patch => {
                let mut ys = Vec::with_capacity(cfg.n_channels);
                let mut zs = Vec::with_capacity(cfg.n_channels);
                for c in 0..cfg.n_channels {
                    let (y, z) = self.channel_sequence(g, &normed.column_vec(c), c, opts, dropout)?;
                    ys.push(y);
                    zs.push(z);
                }
                let rows = if ys.len() == 1 { ys[0] } else { g.concat_rows(&ys)? };
                (rows, zs)
            }
            TokenizeMode::Invert => {
                let xt = g.constant(normed.transpose());
                let tokens = attach_complementors_var(g, xt, self.bank_norm.first().copied())?;
                let tokens = embed_var(g, tokens, self.params.embed_w, self.params.embed_b)?;
                let z = encode_var(g, tokens, &self.params.blocks, opts, dropout)?;
                let rows = decode_rows_var(g, z.var, &self.params.head, z.n_original)?;
                (rows, vec![z])
            }
        };
        let rows = g.affine_rows(rows, &state.std, &state.mean)?;
        let forecast = g.transpose(rows);
        Ok(WindowOutput { forecast, z_enc })
    }

    /// Mean diversification loss over banks as a graph scalar.
    pub fn mean_dcs_var(&self, g: &mut Graph) -> Result<Option<Var>> {
        if self.bank_norm.is_empty() {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for &b in &self.bank_norm {
            let l = dcs_loss_var(g, b, DCS_EPS)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let n = self.bank_norm.len() as f64;
        Ok(total.map(|t| g.scale(t, 1.0 / n)))
    }
}

/// RevIN state for a look-back window, exposed for evaluation code.
pub fn window_revin(x: &Tensor) -> RevinState {
    revin_normalize(x).1
}

/// De-normalizes a `T_out×N` forecast.
pub fn denormalize_forecast(y: &Tensor, state: &RevinState) -> Result<Tensor> {
    revin_denormalize(y, state)
}
