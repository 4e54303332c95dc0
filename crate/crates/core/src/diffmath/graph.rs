//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that (transitively) depends on a parameter created with
//! [`Graph::param`]. Constants never receive gradients.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::function::erf::erf;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Epsilon inside the layer-norm variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom`]: receives the upstream gradient, the
/// input values and the output value; returns one gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddPrefixRows(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AffineRows(Var, Vec<f64>),
    Transpose(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SoftmaxRows(Var),
    MaskColsFrom(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Dropout(Var, Tensor),
    NormalizeRows(Var, Vec<f64>),
    Sum(Var),
    SquaredError(Var, Tensor),
    Custom(Vec<Var>, BackwardFn),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | AddPrefixRows(a, b) => vec![*a, *b],
            Scale(a, _) | Offset(a) | AffineRows(a, _) | Transpose(a) | SliceRows(a, _) | Reshape(a)
            | SoftmaxRows(a) | MaskColsFrom(a, _) | Gelu(a) | Dropout(a, _)
            | NormalizeRows(a, _) | Sum(a) | SquaredError(a, _) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ConcatRows(vs) | Custom(vs, _) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 2]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape("matmul", &va.shape(), &vb.shape()));
        }
        let out = matmul_nn(va, vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape("matmul_nt", &va.shape(), &vb.shape()));
        }
        let out = matmul_nt(va, vb);
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds the `1×n` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::shape("add_row", &vx.shape(), &vb.shape()));
        }
        let mut out = vx.clone();
        for i in 0..out.rows() {
            for (o, &bv) in out.row_slice_mut(i).iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// Adds `p` to the leading `p.rows()` rows of `x`; remaining rows are
    /// copied bit for bit.
    pub fn add_prefix_rows(&mut self, x: Var, p: Var) -> Result<Var> {
        let (vx, vp) = (self.value(x), self.value(p));
        if vp.cols() != vx.cols() || vp.rows() > vx.rows() {
            return Err(Error::shape("add_prefix_rows", &vx.shape(), &vp.shape()));
        }
        let mut out = vx.clone();
        let n = vp.len();
        for (o, &pv) in out.data_mut()[..n].iter_mut().zip(vp.data()) {
            *o += pv;
        }
        Ok(self.push(out, Op::AddPrefixRows(x, p)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::Offset(x))
    }

    /// Row `i` becomes `x[i]·scale[i] + shift[i]`.
    pub fn affine_rows(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let vx = self.value(x);
        if scale.len() != vx.rows() || shift.len() != vx.rows() {
            return Err(Error::shape("affine_rows", &vx.shape(), &[scale.len(), shift.len()]));
        }
        let mut out = vx.clone();
        for i in 0..out.rows() {
            for v in out.row_slice_mut(i) {
                *v = *v * scale[i] + shift[i];
            }
        }
        Ok(self.push(out, Op::AffineRows(x, scale.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start >= end || end > vx.rows() {
            return Err(Error::shape("slice_rows", &vx.shape(), &[start, end]));
        }
        let out = vx.slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Config("concat_rows of nothing".into()));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", &self.shape(first), &v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Row-major reshape; `flatten` is `reshape(x, 1, n)`.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshape(rows, cols)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.reshape(x, 1, n).expect("flatten preserves length")
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Sets columns `from..` to `-inf` so a following softmax ignores them.
    pub fn mask_cols_from(&mut self, x: Var, from: usize) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            for v in &mut out.row_slice_mut(i)[from.min(cols)..] {
                *v = f64::NEG_INFINITY;
            }
        }
        self.push(out, Op::MaskColsFrom(x, from))
    }

    /// Per-row standardization followed by the affine `gamma`, `beta`
    /// (both `1×cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = vx.cols();
        if vg.shape() != [1, n] || vb.shape() != [1, n] {
            return Err(Error::shape("layer_norm", &vx.shape(), &vg.shape()));
        }
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let row = xhat.row_slice_mut(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for ((o, &g), &b) in out.row_slice_mut(i).iter_mut().zip(vg.data()).zip(vb.data()) {
                *o = *o * g + b;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * std_normal_cdf(v));
        self.push(out, Op::Gelu(x))
    }

    /// Multiplies by a pre-scaled keep mask.
    pub fn dropout(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        check_same("dropout", self.value(x), &mask)?;
        let out = self.value(x).zip_map(&mask, |a, m| a * m);
        Ok(self.push(out, Op::Dropout(x, mask)))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let row = out.row_slice_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateParameter {
                    what: "normalize_rows input",
                    row: i,
                });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        Ok(self.push(out, Op::NormalizeRows(x, norms)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ (x − target)²` as a scalar.
    pub fn squared_error(&mut self, x: Var, target: Tensor) -> Result<Var> {
        check_same("squared_error", self.value(x), &target)?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::SquaredError(x, target)))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), backward))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::shape("backward", &lv.shape(), &[1, 1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, matmul_nt(dy, val(*b)));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(val(*a), dy));
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a bᵀ: da = dc b, db = dcᵀ a
                if needs(*a) {
                    self.accumulate(grads, *a, matmul_nn(dy, val(*b)));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(dy, val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, dy.zip_map(val(*b), |g, y| g * y));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, dy.zip_map(val(*a), |g, x| g * x));
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, dy.clone());
                if needs(*b) {
                    let mut db = Tensor::zeros(1, dy.cols());
                    for i in 0..dy.rows() {
                        for (d, &g) in db.data_mut().iter_mut().zip(dy.row_slice(i)) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddPrefixRows(x, p) => {
                self.accumulate(grads, *x, dy.clone());
                if needs(*p) {
                    let r = val(*p).rows();
                    self.accumulate(grads, *p, dy.slice_rows(0, r));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, dy.scale(*s)),
            Op::Offset(x) => self.accumulate(grads, *x, dy.clone()),
            Op::AffineRows(x, scale) => {
                let mut g = dy.clone();
                for (i, &a) in scale.iter().enumerate() {
                    for v in g.row_slice_mut(i) {
                        *v *= a;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, dy.transpose()),
            Op::SliceRows(x, start) => {
                let src = val(*x);
                let mut g = Tensor::zeros(src.rows(), src.cols());
                let off = start * src.cols();
                g.data_mut()[off..off + dy.len()].copy_from_slice(dy.data());
                self.accumulate(grads, *x, g);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let r = val(p).rows();
                    if needs(p) {
                        self.accumulate(grads, p, dy.slice_rows(row, row + r));
                    }
                    row += r;
                }
            }
            Op::Reshape(x) => {
                let [r, c] = val(*x).shape();
                let g = dy.clone().reshape(r, c).expect("reshape grad");
                self.accumulate(grads, *x, g);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut g = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, dr) = (y.row_slice(i), dy.row_slice(i));
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &dv) in g.row_slice_mut(i).iter_mut().zip(yr).zip(dr) {
                        *o = yv * (dv - dot);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::MaskColsFrom(x, from) => {
                let mut g = dy.clone();
                let cols = g.cols();
                for i in 0..g.rows() {
                    for v in &mut g.row_slice_mut(i)[(*from).min(cols)..] {
                        *v = 0.0;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma);
                let n = xhat.cols() as f64;
                if needs(*x) {
                    let mut dx = Tensor::zeros(xhat.rows(), xhat.cols());
                    for i in 0..xhat.rows() {
                        let (xr, dr) = (xhat.row_slice(i), dy.row_slice(i));
                        let dxhat: Vec<f64> = dr.iter().zip(gv.data()).map(|(d, g)| d * g).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xr).map(|(d, x)| d * x).sum();
                        let is = inv_std[i];
                        for ((o, &d), &xh) in dx.row_slice_mut(i).iter_mut().zip(&dxhat).zip(xr) {
                            *o = is / n * (n * d - sum_d - xh * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if needs(*gamma) || needs(*beta) {
                    let mut dg = Tensor::zeros(1, xhat.cols());
                    let mut db = Tensor::zeros(1, xhat.cols());
                    for i in 0..xhat.rows() {
                        for (j, (&d, &xh)) in dy.row_slice(i).iter().zip(xhat.row_slice(i)).enumerate()
                        {
                            dg.data_mut()[j] += d * xh;
                            db.data_mut()[j] += d;
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::Gelu(x) => {
                let g = dy.zip_map(val(*x), |d, v| d * (std_normal_cdf(v) + v * std_normal_pdf(v)));
                self.accumulate(grads, *x, g);
            }
            Op::Dropout(x, mask) => self.accumulate(grads, *x, dy.zip_map(mask, |d, m| d * m)),
            Op::NormalizeRows(x, norms) => {
                let y = &node.value;
                let mut g = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, dr) = (y.row_slice(i), dy.row_slice(i));
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &dv) in g.row_slice_mut(i).iter_mut().zip(yr).zip(dr) {
                        *o = (dv - yv * dot) / norms[i];
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let [r, c] = val(*x).shape();
                self.accumulate(grads, *x, Tensor::filled(r, c, dy.data()[0]));
            }
            Op::SquaredError(x, target) => {
                let s = 2.0 * dy.data()[0];
                self.accumulate(grads, *x, val(*x).zip_map(target, |a, b| s * (a - b)));
            }
            Op::Custom(inputs, backward) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = backward(dy, &vals, &node.value);
                for (&v, g) in inputs.iter().zip(gs) {
                    self.accumulate(grads, v, g);
                }
            }
        }
    }
}

/// Row-wise softmax on a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_slice_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
