use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Floor for training-split standard deviations.
pub const STANDARDIZE_STD_FLOOR: f64 = 1e-5;

/// How the rows of a dataset are divided into train, validation and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SplitSpec {
    /// Hourly ETT convention: 12/4/4 months of 30 days.
    Etth,
    /// 15-minute ETT convention: the hourly layout at four rows per hour.
    Ettm,
    /// Leading `train` and trailing `test` fractions; validation is the rest.
    Ratio { train: f64, test: f64 },
    /// Explicit row counts.
    Rows { train: usize, val: usize, test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratio { train: 0.7, test: 0.2 }
    }
}

/// Row boundaries `[0, train_end)`, `[train_end, val_end)`, `[val_end, test_end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
}

impl SplitSpec {
    pub fn bounds(&self, n_rows: usize) -> Result<SplitBounds> {
        let (train, val, test) = match *self {
            SplitSpec::Etth => (12 * 30 * 24, 4 * 30 * 24, 4 * 30 * 24),
            SplitSpec::Ettm => (12 * 30 * 96, 4 * 30 * 96, 4 * 30 * 96),
            SplitSpec::Ratio { train, test } => {
                if !(train > 0.0 && test > 0.0 && train + test < 1.0) {
                    return Err(Error::Config(format!("bad split ratios {train}/{test}")));
                }
                let tr = (n_rows as f64 * train) as usize;
                let te = (n_rows as f64 * test) as usize;
                (tr, n_rows.saturating_sub(tr + te), te)
            }
            SplitSpec::Rows { train, val, test } => (train, val, test),
        };
        let b = SplitBounds {
            train_end: train,
            val_end: train + val,
            test_end: train + val + test,
        };
        if train == 0 || val == 0 || test == 0 || b.test_end > n_rows {
            return Err(Error::Config(format!(
                "split ({train}, {val}, {test}) does not fit {n_rows} rows"
            )));
        }
        Ok(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Seasonal period by frequency tag: hourly 24, daily 7, weekly 52,
/// monthly 12, quarterly 4, yearly 1.
pub fn seasonal_period_for(frequency: &str) -> Option<usize> {
    match frequency.to_ascii_lowercase().as_str() {
        "hourly" | "h" => Some(24),
        "daily" | "d" => Some(7),
        "weekly" | "w" => Some(52),
        "monthly" | "m" => Some(12),
        "quarterly" | "q" => Some(4),
        "yearly" | "y" => Some(1),
        "15min" | "minutely" => Some(96),
        _ => None,
    }
}

/// Per-channel z-scoring fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        Ok(Tensor::from_fn(x.rows(), x.cols(), |t, c| (x[(t, c)] - self.mean[c]) / self.std[c]))
    }

    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        Ok(Tensor::from_fn(x.rows(), x.cols(), |t, c| x[(t, c)] * self.std[c] + self.mean[c]))
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape("scaler", &x.shape(), &[x.rows(), self.mean.len()]));
        }
        Ok(())
    }
}

/// A multivariate series with its split boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `T×N`, rows are time.
    pub values: Tensor,
    pub channel_names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
    pub bounds: SplitBounds,
    pub frequency: String,
    pub period: usize,
    /// Present once [`standardize`] has been applied.
    pub scaler: Option<Scaler>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, values: Tensor, channel_names: Vec<String>, split: &SplitSpec) -> Result<Self> {
        if channel_names.len() != values.cols() {
            return Err(Error::shape("Dataset", &[channel_names.len()], &[values.cols()]));
        }
        if !values.is_finite() {
            return Err(Error::Numerical("dataset contains non-finite values".into()));
        }
        let bounds = split.bounds(values.rows())?;
        Ok(Self {
            name: name.into(),
            values,
            channel_names,
            timestamps: None,
            bounds,
            frequency: "hourly".into(),
            period: 24,
            scaler: None,
        })
    }

    pub fn with_frequency(mut self, frequency: &str) -> Self {
        if let Some(m) = seasonal_period_for(frequency) {
            self.period = m;
        }
        self.frequency = frequency.to_string();
        self
    }

    pub fn resplit(&mut self, split: &SplitSpec) -> Result<()> {
        self.bounds = split.bounds(self.values.rows())?;
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.values.rows()
    }

    pub fn n_channels(&self) -> usize {
        self.values.cols()
    }

    /// Row range of a split.
    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        let b = self.bounds;
        match split {
            Split::Train => 0..b.train_end,
            Split::Val => b.train_end..b.val_end,
            Split::Test => b.val_end..b.test_end,
        }
    }

    /// Number of length-`t_in` look-back windows per split when each split
    /// may reach `t_in` rows back into its predecessor.
    pub fn lookback_counts(&self, t_in: usize) -> [usize; 3] {
        [Split::Train, Split::Val, Split::Test].map(|s| {
            let r = self.split_range(s);
            let start = if s == Split::Train { 0 } else { r.start.saturating_sub(t_in) };
            (r.end - start + 1).saturating_sub(t_in)
        })
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads a CSV whose first column is a timestamp and whose remaining
/// columns are numeric channels. The header names the channels.
pub fn load_csv(path: impl AsRef<Path>, split: &SplitSpec) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(path, 0, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(parse_err(path, 1, "need a date column and at least one channel"));
    }
    let channel_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = channel_names.len();
    let mut data = Vec::new();
    let mut stamps = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != n + 1 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", n + 1, rec.len())));
        }
        stamps.push(rec[0].to_string());
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("non-numeric value {cell:?} in column {}", channel_names[c])))?;
            data.push(v);
        }
    }
    let rows = stamps.len();
    if rows == 0 {
        return Err(parse_err(path, 2, "no data rows"));
    }
    let values = Tensor::new(rows, n, data)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut ds = Dataset::new(name, values, channel_names, split)?;
    ds.timestamps = Some(stamps);
    Ok(ds)
}

/// Writes the dataset in the format [`load_csv`] reads.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    let mut header = vec!["date".to_string()];
    header.extend(ds.channel_names.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for t in 0..ds.n_rows() {
        let stamp = ds.timestamps.as_ref().map_or_else(|| t.to_string(), |s| s[t].clone());
        let mut rec = vec![stamp];
        rec.extend(ds.values.row_slice(t).iter().map(f64::to_string));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Z-scores every channel with training-split statistics.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let train = ds.split_range(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let n = train.len() as f64;
    let mut mean = vec![0.0; ds.n_channels()];
    let mut std = vec![0.0; ds.n_channels()];
    for c in 0..ds.n_channels() {
        let m = train.clone().map(|t| ds.values[(t, c)]).sum::<f64>() / n;
        let var = train.clone().map(|t| (ds.values[(t, c)] - m).powi(2)).sum::<f64>() / n;
        let mut s = var.sqrt();
        if s < STANDARDIZE_STD_FLOOR {
            log::warn!(
                "channel {} has near-zero training variance; std floored at {STANDARDIZE_STD_FLOOR}",
                ds.channel_names[c]
            );
            s = STANDARDIZE_STD_FLOOR;
        }
        mean[c] = m;
        std[c] = s;
    }
    let scaler = Scaler { mean, std };
    let mut out = ds.clone();
    out.values = scaler.transform(&ds.values)?;
    out.scaler = Some(scaler);
    Ok(out)
}
