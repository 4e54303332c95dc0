//! Training, evaluation, checkpoints and the experiment drivers built on
//! them: ablation over complementor counts, richness-versus-error analysis,
//! paired comparison and the gradient-check suite.

mod checkpoint;
mod config;
mod experiments;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataSource, TrainConfig};
pub use experiments::{
    ablate, ablation_csv, ablation_grid, analyze_checkpoints, analyze_rows, compare, gradcheck_all, paired_metrics,
    run_checks, standard_components, AblationRow, AnalysisReport, ComponentCheck, ComponentFn, ComponentResult,
    GradCheckSuite, ScatterRow, GRADCHECK_STEP, GRADCHECK_TOL,
};
pub use train::{
    batch_objective, evaluate, evaluate_model, naive_baseline, probe_richness, probe_windows, train, train_on,
    train_run, BatchObjective, EpochRecord, ExperimentRecord, MeanMetrics, RunRecord, StepLog, TrainOutcome,
};
