//! Central finite-difference validation of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    pub coords_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error used throughout: `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Checks the gradient of scalar `f` at `x` against
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h, tol, None)
}

/// Multi-input variant. With `stride = Some(s)` only every `s`-th coordinate
/// of each input is perturbed.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    stride: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.shape() != [1, 1] {
            return Err(Error::shape("grad_check", &v.shape(), &[1, 1]));
        }
        let y = v.data()[0];
        if !y.is_finite() {
            return Err(Error::Numerical(format!("function evaluated to {y}")));
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).data()[0].is_finite() {
        return Err(Error::Numerical("function is not finite at x".into()));
    }
    let grads = g.backward(out)?;

    let step = stride.unwrap_or(1).max(1);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
        tol,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(v, x.shape());
        for i in (0..x.len()).step_by(step) {
            let orig = x.data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, i);
            }
            report.coords_checked += 1;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
