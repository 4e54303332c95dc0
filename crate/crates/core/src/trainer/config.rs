use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datakit::{load_csv, standardize, synth_multisine, Dataset, SplitSpec};
use crate::encoder::{ModelConfig, TokenizeMode};
use crate::error::{Error, Result};

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        frequency: Option<String>,
    },
    Synthetic {
        rows: usize,
        channels: usize,
        periods: Vec<f64>,
        noise_std: f64,
        trend: f64,
        seed: u64,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            rows: 4096,
            channels: 3,
            periods: vec![24.0, 60.0],
            noise_std: 0.3,
            trend: 1.0,
            seed: 7,
        }
    }
}

/// Every knob of a training run. Unspecified fields take the defaults of
/// [`TrainConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t_in: usize,
    pub t_out: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub k_complementors: usize,
    pub lambda_dcs: f64,
    pub diversification: bool,
    pub share_complementors: bool,
    pub tokenize_mode: TokenizeMode,
    pub restrict_final_queries: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub heads: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Independent runs with seeds `seed, seed + 1, …`.
    pub runs: usize,
    /// Step between consecutive training windows.
    pub window_stride: usize,
    /// Step between consecutive validation and test windows.
    pub eval_stride: usize,
    /// Caps the optimizer steps per epoch.
    pub max_batches_per_epoch: Option<usize>,
    pub standardize: bool,
    pub data: DataSource,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_in: 96,
            t_out: 96,
            patch_len: 16,
            stride: 8,
            k_complementors: 3,
            lambda_dcs: crate::divloss::DEFAULT_LAMBDA,
            diversification: true,
            share_complementors: false,
            tokenize_mode: TokenizeMode::Patch,
            restrict_final_queries: false,
            lr: 1e-4,
            batch_size: 16,
            heads: 4,
            blocks: 2,
            embed_dim: 512,
            d_ff: 2048,
            dropout: 0.0,
            epochs: 10,
            patience: 3,
            seed: 0,
            runs: 5,
            window_stride: 1,
            eval_stride: 1,
            max_batches_per_epoch: None,
            standardize: true,
            data: DataSource::default(),
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("patience", self.patience),
            ("runs", self.runs),
            ("window_stride", self.window_stride),
            ("eval_stride", self.eval_stride),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.diversification && self.k_complementors > 0 && (self.lambda_dcs.is_nan() || self.lambda_dcs <= 0.0) {
            return Err(Error::Config("lambda_dcs must be positive when diversification is on".into()));
        }
        if let Some(0) = self.max_batches_per_epoch {
            return Err(Error::Config("max_batches_per_epoch must be positive".into()));
        }
        // channel count is irrelevant to the shape rules checked here
        self.model_config(1).validate()
    }

    pub fn model_config(&self, n_channels: usize) -> ModelConfig {
        ModelConfig {
            t_in: self.t_in,
            t_out: self.t_out,
            patch_len: self.patch_len,
            stride: self.stride,
            k_complementors: self.k_complementors,
            d_model: self.embed_dim,
            heads: self.heads,
            blocks: self.blocks,
            d_ff: self.d_ff,
            n_channels,
            tokenize_mode: self.tokenize_mode,
            share_complementors: self.share_complementors,
            restrict_final_queries: self.restrict_final_queries,
            dropout: self.dropout,
        }
    }

    /// Whether the diversification term enters the objective.
    pub fn uses_dcs(&self) -> bool {
        self.diversification && self.k_complementors > 0
    }

    /// Loads, splits and (optionally) standardizes the configured data.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.data {
            DataSource::Csv { path, frequency } => {
                let ds = load_csv(path, &self.split)?;
                match frequency {
                    Some(f) => ds.with_frequency(f),
                    None => ds,
                }
            }
            DataSource::Synthetic {
                rows,
                channels,
                periods,
                noise_std,
                trend,
                seed,
            } => {
                let mut ds = synth_multisine(*seed, *rows, *channels, periods, *noise_std, *trend)?.dataset;
                ds.resplit(&self.split)?;
                ds
            }
        };
        if self.standardize {
            standardize(&ds)
        } else {
            Ok(ds)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `key = value` overrides. Keys may be dotted (`data.path`) and
    /// must already exist; values are parsed as JSON, falling back to a
    /// plain string.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut tree;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}` does not name a field")))?;
                let last = i + 1 == parts.len();
                if !obj.contains_key(*part) {
                    return Err(Error::Config(format!("unknown configuration key `{key}`")));
                }
                if last {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*part).expect("checked above");
            }
        }
        let c: TrainConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Stable hex digest of the configuration.
    pub fn hash_hex(&self) -> String {
        use std::hash::{DefaultHasher, Hasher};
        let mut h = DefaultHasher::new();
        h.write(serde_json::to_string(self).expect("config serializes").as_bytes());
        format!("{:016x}", h.finish())
    }
}
