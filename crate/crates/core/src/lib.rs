//! Transformer forecasting with learnable sequence complementors.
//!
//! Extra learnable tokens ("complementors") are appended to the patch tokens
//! of every channel, attend with them through the encoder, and are sliced
//! away before the forecasting head. A log-volume loss over the singular
//! values of the complementor bank keeps the extra tokens diverse.
//!
//! Modules, bottom-up:
//!
//! - [`diffmath`]: matrices, reverse-mode tape, SVD, Adam, gradient checking
//! - [`seqcomp`]: RevIN, patching, complementor banks, token assembly
//! - [`encoder`]: multi-head attention, encoder blocks, decoding head, model
//! - [`divloss`]: bank volume, diversification loss and its gradient
//! - [`richness`]: representation entropy, spectra, similarity, statistics
//! - [`datakit`]: datasets, windows, synthetic data, forecast metrics
//! - [`trainer`]: configuration, training, checkpoints, experiments

pub mod datakit;
pub mod diffmath;
pub mod divloss;
pub mod encoder;
mod error;
pub mod richness;
pub mod seqcomp;
pub mod trainer;

pub use error::{Error, Result};
