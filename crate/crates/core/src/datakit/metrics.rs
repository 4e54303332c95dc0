use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(op: &'static str, y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::shape(op, &[y.len()], &[y_hat.len()]));
    }
    if y.is_empty() {
        return Err(Error::Degenerate(format!("{op} of an empty series")));
    }
    Ok(())
}

fn mean_of(y: &[f64], y_hat: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    y.iter().zip(y_hat).map(|(&a, &b)| f(a, b)).sum::<f64>() / y.len() as f64
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_len("mse", y, y_hat)?;
    Ok(mean_of(y, y_hat, |a, b| (a - b) * (a - b)))
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_len("mae", y, y_hat)?;
    Ok(mean_of(y, y_hat, |a, b| (a - b).abs()))
}

/// Symmetric percentage error in `[0, 200]`. Points where both the target
/// and the forecast are zero count as exact.
pub fn smape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_len("smape", y, y_hat)?;
    Ok(200.0
        * mean_of(y, y_hat, |a, b| {
            let d = a.abs() + b.abs();
            if d == 0.0 {
                0.0
            } else {
                (a - b).abs() / d
            }
        }))
}

/// Mean absolute percentage error; zero targets contribute nothing.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_len("mape", y, y_hat)?;
    Ok(100.0 * mean_of(y, y_hat, |a, b| if a == 0.0 { 0.0 } else { (a - b).abs() / a.abs() }))
}

/// Mean absolute `m`-step naive error over `history`.
pub fn seasonal_scale(history: &[f64], m: usize) -> Result<f64> {
    if m == 0 || history.len() <= m {
        return Err(Error::Degenerate(format!(
            "history of length {} is too short for period {m}",
            history.len()
        )));
    }
    let n = history.len() - m;
    Ok(history.windows(m + 1).map(|w| (w[m] - w[0]).abs()).sum::<f64>() / n as f64)
}

/// Mean absolute error scaled by the in-sample seasonal naive error.
pub fn mase(y: &[f64], y_hat: &[f64], history: &[f64], m: usize) -> Result<f64> {
    let scale = seasonal_scale(history, m)?;
    if scale == 0.0 {
        return Err(Error::Degenerate("seasonal naive scale is zero".into()));
    }
    Ok(mae(y, y_hat)? / scale)
}

pub fn owa(smape: f64, mase: f64, smape_naive2: f64, mase_naive2: f64) -> Result<f64> {
    if smape_naive2 <= 0.0 || mase_naive2 <= 0.0 {
        return Err(Error::Degenerate("baseline SMAPE and MASE must be positive".into()));
    }
    Ok(0.5 * (smape / smape_naive2 + mase / mase_naive2))
}

/// Seasonal naive forecast: the last full cycle of `history` repeated.
/// With `m = 1` this is last-value persistence.
pub fn naive2_forecast(history: &[f64], m: usize, horizon: usize) -> Result<Vec<f64>> {
    if m == 0 || history.len() < m {
        return Err(Error::Degenerate(format!(
            "history of length {} is shorter than period {m}",
            history.len()
        )));
    }
    let cycle = &history[history.len() - m..];
    Ok((0..horizon).map(|t| cycle[t % m]).collect())
}

/// Forecast accuracy over a set of series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    pub mape: f64,
    pub mase: f64,
    pub owa: f64,
    pub n_series: usize,
    /// `(mse, mae)` per horizon step, when requested.
    pub per_horizon: Option<Vec<(f64, f64)>>,
}

/// Fixed baseline values for OWA instead of the seasonal-naive forecasts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OwaBaseline {
    pub smape: f64,
    pub mase: f64,
}

/// Streams `(history, target, forecast)` series into a [`MetricsReport`].
///
/// MSE and MAE average over every point; SMAPE, MAPE and MASE average the
/// per-series values. Series whose history has a zero seasonal scale are
/// left out of MASE.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    period: usize,
    horizon: usize,
    sq: Vec<f64>,
    abs: Vec<f64>,
    count: usize,
    smape: f64,
    mape: f64,
    mase: f64,
    mase_count: usize,
    naive_smape: f64,
    naive_mase: f64,
}

impl MetricsAccumulator {
    pub fn new(period: usize, horizon: usize) -> Self {
        Self {
            period,
            horizon,
            sq: vec![0.0; horizon],
            abs: vec![0.0; horizon],
            count: 0,
            smape: 0.0,
            mape: 0.0,
            mase: 0.0,
            mase_count: 0,
            naive_smape: 0.0,
            naive_mase: 0.0,
        }
    }

    pub fn push(&mut self, history: &[f64], y: &[f64], y_hat: &[f64]) -> Result<()> {
        check_len("metrics", y, y_hat)?;
        if y.len() != self.horizon {
            return Err(Error::shape("metrics", &[y.len()], &[self.horizon]));
        }
        for (h, (&a, &b)) in y.iter().zip(y_hat).enumerate() {
            self.sq[h] += (a - b) * (a - b);
            self.abs[h] += (a - b).abs();
        }
        self.count += 1;
        self.smape += smape(y, y_hat)?;
        self.mape += mape(y, y_hat)?;
        let m = self.period.min(history.len().saturating_sub(1)).max(1);
        let naive = naive2_forecast(history, m, y.len())?;
        self.naive_smape += smape(y, &naive)?;
        let scale = seasonal_scale(history, m)?;
        if scale > 0.0 {
            self.mase += mae(y, y_hat)? / scale;
            self.naive_mase += mae(y, &naive)? / scale;
            self.mase_count += 1;
        }
        Ok(())
    }

    pub fn finish(&self, per_horizon: bool, baseline: Option<OwaBaseline>) -> Result<MetricsReport> {
        if self.count == 0 {
            return Err(Error::Degenerate("no series to evaluate".into()));
        }
        let n = self.count as f64;
        let steps: Vec<(f64, f64)> = self.sq.iter().zip(&self.abs).map(|(s, a)| (s / n, a / n)).collect();
        let h = self.horizon as f64;
        let mse = steps.iter().map(|s| s.0).sum::<f64>() / h;
        let mae = steps.iter().map(|s| s.1).sum::<f64>() / h;
        let mc = self.mase_count.max(1) as f64;
        let (smape, mase) = (self.smape / n, self.mase / mc);
        let base = baseline.unwrap_or(OwaBaseline {
            smape: self.naive_smape / n,
            mase: self.naive_mase / mc,
        });
        // A perfect baseline leaves OWA undefined; report it as infinite.
        let owa = owa(smape, mase, base.smape, base.mase).unwrap_or(f64::INFINITY);
        Ok(MetricsReport {
            mse,
            mae,
            smape,
            mape: self.mape / n,
            mase,
            owa,
            n_series: self.count,
            per_horizon: per_horizon.then_some(steps),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-10
    }

    #[test]
    fn squared_and_absolute() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(close(mse(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 2.5));
        assert!(close(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5));
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn smape_cases() {
        assert_eq!(smape(&[2.0, 3.0], &[2.0, 3.0]).unwrap(), 0.0);
        assert!(close(smape(&[1.0], &[3.0]).unwrap(), 100.0));
        assert!(close(smape(&[1.0], &[-1.0]).unwrap(), 200.0));
        assert_eq!(smape(&[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn mase_cases() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(mase(&y, &y, &y, 1).unwrap(), 0.0);
        assert!(close(mase(&y, &[2.0, 3.0, 4.0], &y, 1).unwrap(), 1.0));
        let d = |v: &[f64]| v.iter().map(|x| 2.0 * x).collect::<Vec<_>>();
        let hist = [0.5, 3.0, 1.0, 2.0];
        let a = mase(&y, &[2.0, 1.0, 5.0], &hist, 2).unwrap();
        let b = mase(&d(&y), &d(&[2.0, 1.0, 5.0]), &d(&hist), 2).unwrap();
        assert!(close(a, b));
        assert!(matches!(mase(&y, &y, &[4.0, 4.0], 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn owa_cases() {
        assert!(close(owa(12.0, 1.5, 12.0, 1.5).unwrap(), 1.0));
        assert!(close(owa(6.0, 0.75, 12.0, 1.5).unwrap(), 0.5));
        assert!(close(owa(10.0, 2.0, 20.0, 2.0).unwrap(), 0.75));
        assert!(owa(1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn naive2_cases() {
        assert_eq!(naive2_forecast(&[3.0, 7.0], 1, 3).unwrap(), [7.0; 3]);
        let h = [9.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(naive2_forecast(&h, 4, 4).unwrap(), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(naive2_forecast(&h, 4, 6).unwrap(), [1.0, 2.0, 3.0, 4.0, 1.0, 2.0]);
        assert!(naive2_forecast(&h, 6, 1).is_err());
    }

    #[test]
    fn accumulator_horizon_average_matches_headline() {
        let mut acc = MetricsAccumulator::new(1, 3);
        acc.push(&[0.0, 1.0, 2.0], &[3.0, 4.0, 5.0], &[3.5, 3.0, 5.0]).unwrap();
        acc.push(&[5.0, 4.0, 2.0], &[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0]).unwrap();
        let r = acc.finish(true, None).unwrap();
        let steps = r.per_horizon.as_ref().unwrap();
        let avg = steps.iter().map(|s| s.0).sum::<f64>() / 3.0;
        assert!((avg - r.mse).abs() < 1e-12);
        let flat = mse(&[3.0, 4.0, 5.0, 1.0, 1.0, 0.0], &[3.5, 3.0, 5.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((flat - r.mse).abs() < 1e-12);

        let mut naive = MetricsAccumulator::new(1, 2);
        naive.push(&[1.0, 2.0], &[4.0, 1.0], &[2.0, 2.0]).unwrap();
        assert!(close(naive.finish(false, None).unwrap().owa, 1.0));
    }
}
