//! Datasets, splits, sliding windows, synthetic series and forecast metrics.

mod dataset;
mod metrics;
mod synth;
mod windows;

pub use dataset::{
    load_csv, seasonal_period_for, standardize, write_csv, Dataset, Scaler, Split, SplitBounds, SplitSpec,
    STANDARDIZE_STD_FLOOR,
};
pub use metrics::{
    mae, mape, mase, mse, naive2_forecast, owa, seasonal_scale, smape, MetricsAccumulator, MetricsReport,
    OwaBaseline,
};
pub use synth::{synth_multisine, SyntheticSeries};
pub use windows::{WindowIndex, WindowSampler};
