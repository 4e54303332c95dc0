use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use seqcomp_core::datakit::{synth_multisine, write_csv, Split};
use seqcomp_core::richness::{
    read_matrix, richness_report, track_dynamics, write_matrix, DynamicsLog, EpochPoint, DOMINANT_THRESHOLD,
    ENTROPY_RIDGE,
};
use seqcomp_core::trainer::{
    ablate, ablation_csv, analyze_checkpoints, analyze_rows, compare, gradcheck_all, paired_metrics, probe_windows,
    train, evaluate, Checkpoint, ExperimentRecord, ScatterRow, TrainConfig,
};
use seqcomp_core::Error;

#[derive(Parser)]
#[command(name = "seqcomp", version, about = "Patch transformer forecasting with sequence complementors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured run and save records and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        per_horizon: bool,
        /// Writes the encoder output of the first probe window, channel 0.
        #[arg(long)]
        dump_repr: Option<PathBuf>,
        /// `--key value` overrides applied to the checkpoint's config (data only matters here).
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Train the (K, diversification) grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,3,5")]
        k_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "on,off", value_parser = parse_switch)]
        div_modes: Vec<bool>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Correlate representation richness with test error.
    Analyze {
        /// `label=path` checkpoints, evaluated on their own configured data.
        #[arg(long = "checkpoint", value_parser = parse_labeled)]
        checkpoints: Vec<(String, PathBuf)>,
        /// CSV with columns `label,path,mse`; each path is a matrix dump.
        #[arg(long)]
        dumps: Option<PathBuf>,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Paired signed-rank test between two records or metric lists.
    Compare {
        a: PathBuf,
        b: PathBuf,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Write a seeded multi-sine dataset as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4096)]
        rows: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, value_delimiter = ',', default_value = "24,60")]
        periods: Vec<f64>,
        #[arg(long, default_value_t = 0.3)]
        noise_std: f64,
        #[arg(long, default_value_t = 1.0)]
        trend: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any configuration field as `--key value` (dotted keys reach nested fields).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                TrainConfig::from_json(&text).with_context(|| format!("loading {}", p.display()))?
            }
            None => TrainConfig::default(),
        };
        apply_overrides(&base, &self.overrides)
    }
}

/// Malformed command line, reported with exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn apply_overrides(base: &TrainConfig, raw: &[String]) -> anyhow::Result<TrainConfig> {
    let mut pairs = Vec::new();
    let mut it = raw.iter();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--") else {
            return Err(Usage(format!("expected `--key value`, found `{tok}`")).into());
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match it.next() {
                Some(v) => (flag.to_string(), v.clone()),
                None => return Err(Usage(format!("`--{flag}` needs a value")).into()),
            },
        };
        pairs.push((key.replace('-', "_"), value));
    }
    Ok(base.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got `{s}`")),
    }
}

fn parse_labeled(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((label, path)) => Ok((label.to_string(), PathBuf::from(path))),
        None => {
            let p = PathBuf::from(s);
            let label = p.file_stem().map(|l| l.to_string_lossy().into_owned()).unwrap_or_else(|| s.to_string());
            Ok((label, p))
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run_train(cfg: &ConfigArgs, out: &Path) -> anyhow::Result<()> {
    let config = cfg.load()?;
    std::fs::create_dir_all(out)?;
    let outcome = train(&config)?;
    let record = &outcome.record;
    write_json(&out.join("record.json"), record)?;
    for (i, ck) in outcome.checkpoints.iter().enumerate() {
        ck.save(out.join(format!("checkpoint_{i}.txt")))?;
    }
    let mut metrics = String::from("seed,mse,mae,smape,mape,mase,owa\n");
    for run in &record.runs {
        let t = &run.test;
        metrics.push_str(&format!("{},{},{},{},{},{},{}\n", run.seed, t.mse, t.mae, t.smape, t.mape, t.mase, t.owa));
    }
    std::fs::write(out.join("metrics.csv"), metrics)?;
    std::fs::write(out.join("dynamics.csv"), track_dynamics(&dynamics_logs(record)).to_csv())?;
    println!("{}", serde_json::to_string(&record.mean_test)?);
    Ok(())
}

fn dynamics_logs(record: &ExperimentRecord) -> Vec<DynamicsLog> {
    record
        .runs
        .iter()
        .map(|run| DynamicsLog {
            label: format!("seed{}", run.seed),
            points: run
                .epochs
                .iter()
                .map(|e| EpochPoint {
                    epoch: e.epoch,
                    entropy: e.entropy,
                    val_mse: e.val_mse,
                })
                .collect(),
        })
        .collect()
}

fn run_eval(
    checkpoint: &Path,
    split: Split,
    per_horizon: bool,
    dump_repr: Option<&Path>,
    overrides: &[String],
) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let config = apply_overrides(&ck.config, overrides)?;
    let ds = config.load_dataset()?;
    if ds.n_channels() != ck.model.config.n_channels {
        bail!(Error::Config(format!(
            "checkpoint expects {} channels, data has {}",
            ck.model.config.n_channels,
            ds.n_channels()
        )));
    }
    let report = evaluate(&ck, &ds, split, per_horizon)?;
    if let Some(path) = dump_repr {
        let probe = probe_windows(&ds, &config)?;
        let first = probe.first().ok_or_else(|| Error::Config("no validation windows to dump".into()))?;
        let (_, z) = ck.model.forward_detailed(&first.x)?;
        write_matrix(path, &z[0])?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_ablate(cfg: &ConfigArgs, k_grid: &[usize], div_modes: &[bool], out: &Path) -> anyhow::Result<()> {
    let config = cfg.load()?;
    let ds = config.load_dataset()?;
    std::fs::create_dir_all(out)?;
    let rows = ablate(&ds, &config, k_grid, div_modes)?;
    std::fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    write_json(&out.join("ablation.json"), &rows)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}

fn run_analyze(checkpoints: &[(String, PathBuf)], dumps: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let report = match (checkpoints.is_empty(), dumps) {
        (false, None) => {
            let loaded = checkpoints
                .iter()
                .map(|(label, p)| Ok((label.clone(), Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            // every checkpoint is scored on the data of the first one
            let ds = loaded[0].1.config.load_dataset()?;
            analyze_checkpoints(&loaded, &ds)?
        }
        (true, Some(manifest)) => analyze_rows(dump_rows(manifest)?)?,
        _ => return Err(Usage("give either --checkpoint (repeated) or --dumps".into()).into()),
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("scatter.csv"), report.scatter_csv())?;
    write_json(&out.join("report.json"), &report)?;
    println!(
        "entropy vs mse: r = {:.6}, p = {:.6}",
        report.entropy_vs_mse.statistic, report.entropy_vs_mse.p_value
    );
    if let Some(r) = &report.ratio_vs_mse {
        println!("dominant ratio vs mse: r = {:.6}, p = {:.6}", r.statistic, r.p_value);
    }
    Ok(())
}

fn dump_rows(manifest: &Path) -> anyhow::Result<Vec<ScatterRow>> {
    let text = std::fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [label, path, mse] = fields[..] else {
            bail!(Error::Parse {
                path: manifest.display().to_string(),
                line: i + 1,
                msg: "expected label,path,mse".into(),
            });
        };
        let mse: f64 = mse.parse().map_err(|_| Error::Parse {
            path: manifest.display().to_string(),
            line: i + 1,
            msg: format!("bad mse {mse:?}"),
        })?;
        let z = read_matrix(base.join(path))?;
        let r = richness_report(&z, ENTROPY_RIDGE, DOMINANT_THRESHOLD)?;
        rows.push(ScatterRow {
            label: label.to_string(),
            entropy: r.entropy,
            dominant_ratio: r.dominant_ratio,
            mse,
        });
    }
    Ok(rows)
}

/// Either an experiment record (per-run MSE then MAE) or a plain list of numbers.
fn metric_vector(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(record) = serde_json::from_str::<ExperimentRecord>(&text) {
        return Ok(paired_metrics(&record));
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>().map_err(|_| {
                Error::Parse {
                    path: path.display().to_string(),
                    line: 0,
                    msg: format!("not a number: {t:?}"),
                }
                .into()
            })
        })
        .collect()
}

fn run_compare(a: &Path, b: &Path) -> anyhow::Result<()> {
    let report = compare(&metric_vector(a)?, &metric_vector(b)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_gradcheck(seed: u64, seeds: u64) -> anyhow::Result<()> {
    let mut failed = Vec::new();
    for s in seed..seed + seeds {
        let suite = gradcheck_all(s)?;
        for r in &suite.results {
            println!(
                "seed {s} {:<28} max rel err {:.3e} over {} coords {}",
                r.name,
                r.max_rel_error,
                r.coords_checked,
                if r.passed { "ok" } else { "FAILED" }
            );
        }
        failed.extend(suite.failures().iter().map(|r| format!("seed {s}: {}", r.name)));
    }
    if !failed.is_empty() {
        bail!(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

fn run_synth(out: &Path, rows: usize, channels: usize, periods: &[f64], noise: f64, trend: f64, seed: u64) -> anyhow::Result<()> {
    let s = synth_multisine(seed, rows, channels, periods, noise, trend)?;
    write_csv(&s.dataset, out)?;
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { cfg, out } => run_train(&cfg, &out),
        Command::Eval {
            checkpoint,
            split,
            per_horizon,
            dump_repr,
            overrides,
        } => run_eval(&checkpoint, split, per_horizon, dump_repr.as_deref(), &overrides),
        Command::Ablate {
            cfg,
            k_grid,
            div_modes,
            out,
        } => run_ablate(&cfg, &k_grid, &div_modes, &out),
        Command::Analyze { checkpoints, dumps, out } => run_analyze(&checkpoints, dumps.as_deref(), &out),
        Command::Compare { a, b } => run_compare(&a, &b),
        Command::Gradcheck { seed, seeds } => run_gradcheck(seed, seeds),
        Command::Synth {
            out,
            rows,
            channels,
            periods,
            noise_std,
            trend,
            seed,
        } => run_synth(&out, rows, channels, &periods, noise_std, trend, seed),
    }
}

/// 1 for usage or configuration problems, 2 for everything that failed while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parse { .. } | Error::Json(_) | Error::Io(_)) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
