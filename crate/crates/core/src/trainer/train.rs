use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use crate::datakit::{naive2_forecast, Dataset, MetricsAccumulator, MetricsReport, Split, WindowIndex, WindowSampler};
use crate::diffmath::rng::{seeded, Rng};
use crate::diffmath::{adam_step, AdamState, Graph, Tensor, Var};
use crate::encoder::{BoundModel, EncodeOptions, Model};
use crate::error::{Error, Result};
use crate::richness::{gaussian_entropy, dominant_sv_ratio, DOMINANT_THRESHOLD, ENTROPY_RIDGE};
use crate::seqcomp::{reseed_zero_rows, SeriesWindow};

/// Loss components of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_obj: f64,
    pub l_mse: f64,
    pub l_dcs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_obj: f64,
    pub train_mse: f64,
    pub train_dcs: f64,
    pub val_mse: f64,
    /// Mean Gaussian entropy of encoder outputs on the probe batch.
    pub entropy: f64,
    pub dominant_ratio: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepLog>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub test: MetricsReport,
}

/// Mean of the headline test metrics over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    pub mape: f64,
    pub mase: f64,
    pub owa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_hash: String,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
    pub mean_test: MeanMetrics,
}

impl ExperimentRecord {
    /// Copy with wall-clock timings zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for run in &mut r.runs {
            for e in &mut run.epochs {
                e.wall_clock_s = 0.0;
            }
        }
        r
    }

    /// `(mse, mae)` of each run on the test split.
    pub fn per_run_test(&self) -> Vec<(f64, f64)> {
        self.runs.iter().map(|r| (r.test.mse, r.test.mae)).collect()
    }
}

pub struct TrainOutcome {
    pub record: ExperimentRecord,
    /// Best-validation checkpoint of every run, in run order.
    pub checkpoints: Vec<Checkpoint>,
}

/// Loads the configured data and trains every run.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = config.load_dataset()?;
    train_on(&ds, config)
}

pub fn train_on(ds: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let seeds: Vec<u64> = (0..config.runs as u64).map(|r| config.seed + r).collect();
    let mut runs = Vec::with_capacity(seeds.len());
    let mut checkpoints = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let (run, ck) = train_run(ds, config, seed)?;
        log::info!(
            "seed {seed}: best epoch {} val mse {:.6} test mse {:.6}",
            run.best_epoch,
            run.best_val_mse,
            run.test.mse
        );
        runs.push(run);
        checkpoints.push(ck);
    }
    let n = runs.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| runs.iter().map(|r| f(&r.test)).sum::<f64>() / n;
    let mean_test = MeanMetrics {
        mse: avg(|m| m.mse),
        mae: avg(|m| m.mae),
        smape: avg(|m| m.smape),
        mape: avg(|m| m.mape),
        mase: avg(|m| m.mase),
        owa: avg(|m| m.owa),
    };
    Ok(TrainOutcome {
        record: ExperimentRecord {
            config_hash: config.hash_hex(),
            config: config.clone(),
            seeds,
            runs,
            mean_test,
        },
        checkpoints,
    })
}

fn encode_options(config: &TrainConfig) -> EncodeOptions {
    EncodeOptions {
        restrict_final_queries: config.restrict_final_queries,
        mask_complementor_keys: false,
    }
}

/// Scalar handles of the objective for one batch.
pub struct BatchObjective {
    pub l_obj: Var,
    pub l_mse: Var,
    pub l_dcs: Option<Var>,
}

/// Records `mse + λ·dcs` for a batch of windows. MSE is the mean over every
/// forecast entry of the batch.
pub fn batch_objective(
    g: &mut Graph,
    bound: &BoundModel<'_>,
    windows: &[SeriesWindow],
    config: &TrainConfig,
    dropout: &mut Option<(&mut Rng, f64)>,
) -> Result<BatchObjective> {
    let mut total: Option<Var> = None;
    let mut entries = 0usize;
    for w in windows {
        let out = bound.forward_window(g, &w.x, encode_options(config), dropout)?;
        let se = g.squared_error(out.forecast, w.y.clone())?;
        entries += w.y.len();
        total = Some(match total {
            None => se,
            Some(acc) => g.add(acc, se)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    let l_mse = g.scale(total, 1.0 / entries as f64);
    let l_dcs = if config.uses_dcs() { bound.mean_dcs_var(g)? } else { None };
    let l_obj = match l_dcs {
        Some(d) => {
            let weighted = g.scale(d, config.lambda_dcs);
            g.add(l_mse, weighted)?
        }
        None => l_mse,
    };
    Ok(BatchObjective { l_obj, l_mse, l_dcs })
}

/// One training run with early stopping on validation MSE.
pub fn train_run(ds: &Dataset, config: &TrainConfig, seed: u64) -> Result<(RunRecord, Checkpoint)> {
    let mut rng = seeded(seed);
    let mut model = Model::new(config.model_config(ds.n_channels()), &mut rng)?;
    let mut adam = AdamState::new(&model.params.tensors(), config.lr);
    let train_idx = WindowSampler::new(config.t_in, config.t_out, config.window_stride, Split::Train).index(ds)?;
    let probe = probe_windows(ds, config)?;

    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_idx.count).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let n_batches = order
            .len()
            .div_ceil(config.batch_size)
            .min(config.max_batches_per_epoch.unwrap_or(usize::MAX));
        let (mut sum_obj, mut sum_mse, mut sum_dcs) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(config.batch_size).take(n_batches).enumerate() {
            let windows: Vec<SeriesWindow> = chunk.iter().map(|&i| train_idx.window(ds, i)).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g)?;
            let grads = {
                let mut dropout = (config.dropout > 0.0).then_some((&mut rng, config.dropout));
                let obj = batch_objective(&mut g, &bound, &windows, config, &mut dropout)?;
                let log = StepLog {
                    epoch,
                    step: b,
                    l_obj: g.scalar(obj.l_obj),
                    l_mse: g.scalar(obj.l_mse),
                    l_dcs: obj.l_dcs.map_or(0.0, |d| g.scalar(d)),
                };
                if !log.l_obj.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: b,
                        loss: log.l_obj,
                        last_good: best.map(Box::new),
                    });
                }
                sum_obj += log.l_obj;
                sum_mse += log.l_mse;
                sum_dcs += log.l_dcs;
                steps.push(log);
                let grads = g.backward(obj.l_obj)?;
                bound
                    .params
                    .named()
                    .into_iter()
                    .zip(model.params.named())
                    .map(|((_, &v), (_, t))| grads.get_or_zeros(v, t.shape()))
                    .collect::<Vec<Tensor>>()
            };
            drop(bound);
            let mut tensors = model.params.tensors();
            adam_step(&mut tensors, &grads, &mut adam)?;
            model.params.set_tensors(tensors)?;
            let reseeded = reseed_zero_rows(&mut model.params.banks, &mut rng);
            if reseeded > 0 {
                log::warn!("re-initialized {reseeded} zero complementor rows");
            }
        }
        let val = evaluate_model(&model, ds, Split::Val, config.eval_stride, false)?;
        let (entropy, dominant_ratio) = probe_richness(&model, &probe)?;
        let nb = n_batches as f64;
        epochs.push(EpochRecord {
            epoch,
            train_obj: sum_obj / nb,
            train_mse: sum_mse / nb,
            train_dcs: sum_dcs / nb,
            val_mse: val.mse,
            entropy,
            dominant_ratio,
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: train {:.6} val {:.6} entropy {entropy:.4}", sum_mse / nb, val.mse);
        if best.as_ref().is_none_or(|b| val.mse < b.val_mse) {
            best = Some(Checkpoint {
                config: config.clone(),
                model: model.clone(),
                adam: adam.clone(),
                epoch,
                rng_seed: seed,
                rng_word_pos: rng.get_word_pos(),
                val_mse: val.mse,
            });
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let best = best.expect("at least one epoch runs");
    let test = evaluate_model(&best.model, ds, Split::Test, config.eval_stride, false)?;
    Ok((
        RunRecord {
            seed,
            epochs,
            steps,
            best_epoch: best.epoch,
            best_val_mse: best.val_mse,
            test,
        },
        best,
    ))
}

fn eval_index(ds: &Dataset, t_in: usize, t_out: usize, split: Split, stride: usize) -> Result<WindowIndex> {
    WindowSampler::new(t_in, t_out, stride, split).index(ds)
}

/// Forecast metrics of `model` over every window of `split`. MASE and the
/// naive baseline use each window's own look-back as history.
pub fn evaluate_model(model: &Model, ds: &Dataset, split: Split, stride: usize, per_horizon: bool) -> Result<MetricsReport> {
    let cfg = &model.config;
    if cfg.n_channels != ds.n_channels() {
        return Err(Error::shape("evaluate", &[cfg.n_channels], &[ds.n_channels()]));
    }
    let idx = eval_index(ds, cfg.t_in, cfg.t_out, split, stride)?;
    let mut acc = MetricsAccumulator::new(ds.period, cfg.t_out);
    for i in 0..idx.count {
        let w = idx.window(ds, i);
        let y_hat = model.forward(&w.x)?;
        for c in 0..ds.n_channels() {
            acc.push(&w.x.column_vec(c), &w.y.column_vec(c), &y_hat.column_vec(c))?;
        }
    }
    acc.finish(per_horizon, None)
}

/// Metrics of a saved model on a split of `ds`.
pub fn evaluate(ck: &Checkpoint, ds: &Dataset, split: Split, per_horizon: bool) -> Result<MetricsReport> {
    evaluate_model(&ck.model, ds, split, ck.config.eval_stride, per_horizon)
}

/// Metrics of the seasonal-naive forecast with period `m`.
pub fn naive_baseline(ds: &Dataset, config: &TrainConfig, split: Split, m: usize) -> Result<MetricsReport> {
    let idx = eval_index(ds, config.t_in, config.t_out, split, config.eval_stride)?;
    let mut acc = MetricsAccumulator::new(ds.period, config.t_out);
    for i in 0..idx.count {
        let w = idx.window(ds, i);
        for c in 0..ds.n_channels() {
            let hist = w.x.column_vec(c);
            let f = naive2_forecast(&hist, m, config.t_out)?;
            acc.push(&hist, &w.y.column_vec(c), &f)?;
        }
    }
    acc.finish(false, None)
}

/// The first validation batch, fixed for the whole run.
pub fn probe_windows(ds: &Dataset, config: &TrainConfig) -> Result<Vec<SeriesWindow>> {
    let idx = eval_index(ds, config.t_in, config.t_out, Split::Val, config.eval_stride)?;
    Ok((0..idx.count.min(config.batch_size)).map(|i| idx.window(ds, i)).collect())
}

/// Mean entropy and dominant-singular-value ratio of the full encoder
/// output (complementor rows included) over every probe sequence.
pub fn probe_richness(model: &Model, probe: &[SeriesWindow]) -> Result<(f64, f64)> {
    let (mut h, mut r, mut n) = (0.0, 0.0, 0usize);
    for w in probe {
        let (_, zs) = model.forward_detailed(&w.x)?;
        for z in zs {
            h += gaussian_entropy(&z, ENTROPY_RIDGE)?;
            r += dominant_sv_ratio(&z, DOMINANT_THRESHOLD, false)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("empty probe batch".into()));
    }
    Ok((h / n as f64, r / n as f64))
}
