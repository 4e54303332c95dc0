use rand_distr::{Distribution, Normal, Uniform};

use super::dataset::{Dataset, SplitSpec};
use crate::diffmath::rng::seeded;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// A synthetic series together with its noise-free signal.
#[derive(Clone, Debug)]
pub struct SyntheticSeries {
    pub dataset: Dataset,
    pub clean: Tensor,
}

/// Sum of random-phase sinusoids per channel, plus a linear trend that
/// rises by `trend` over the whole series, plus Gaussian noise.
///
/// Amplitudes are drawn from `[0.5, 1.5]`. The seasonal period is set to the
/// first entry of `periods` (rounded).
pub fn synth_multisine(
    seed: u64,
    rows: usize,
    channels: usize,
    periods: &[f64],
    noise_std: f64,
    trend: f64,
) -> Result<SyntheticSeries> {
    if periods.is_empty() || periods.iter().any(|&p| p.is_nan() || p <= 0.0) {
        return Err(Error::Config("periods must be non-empty and positive".into()));
    }
    if rows == 0 || channels == 0 {
        return Err(Error::Config("need at least one row and one channel".into()));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("non-empty range");
    let amp = Uniform::new(0.5, 1.5).expect("non-empty range");
    let mut rng = seeded(seed);
    let components: Vec<Vec<(f64, f64, f64)>> = (0..channels)
        .map(|_| {
            periods
                .iter()
                .map(|&p| (p, amp.sample(&mut rng), phase.sample(&mut rng)))
                .collect()
        })
        .collect();
    let clean = Tensor::from_fn(rows, channels, |t, c| {
        let t = t as f64;
        let seasonal: f64 = components[c]
            .iter()
            .map(|&(p, a, ph)| a * (std::f64::consts::TAU * t / p + ph).sin())
            .sum();
        seasonal + trend * t / rows as f64
    });
    let values = clean.map(|v| v + noise.sample(&mut rng));
    let names = (0..channels).map(|c| format!("ch{c}")).collect();
    let mut dataset = Dataset::new("multisine", values, names, &SplitSpec::default())?;
    dataset.frequency = "synthetic".into();
    dataset.period = periods[0].round().max(1.0) as usize;
    Ok(SyntheticSeries { dataset, clean })
}
