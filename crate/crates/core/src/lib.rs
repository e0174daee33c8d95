//! Detection of antidepressant use from nocturnal respiration.
//!
//! The pipeline generates (or imports) night-long respiration/EEG cohorts,
//! pretrains a transformer encoder by reconstructing EEG spectrograms from
//! respiration, trains a frozen-encoder classifier that emits a nightly score
//! `z` in `[0, 1]`, and evaluates with participant-level cross-validation,
//! bootstrap statistics, and stratified subgroup reports.
//!
//! Module map:
//! - [`data`]: cohort data model, on-disk format, quality control
//! - [`dsp`]: filtering, resampling, normalization, multitaper spectrograms
//! - [`synth`]: labeled synthetic cohorts with planted medication effects
//! - [`nn`]: dense-tensor transformer with exact gradients, AdamW, checkpoints
//! - [`train`]: cross-validation, pretraining, classifier training, inference
//! - [`stats`]: AUROC, bootstrap CIs, operating points, group tests
//! - [`features`]: hypnogram/EEG feature extraction and random-forest baselines
//! - [`interpret`]: reconstructed-spectra analysis, correlations, trajectories

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod data;
pub mod dsp;
pub mod features;
pub mod interpret;
pub mod nn;
pub mod stats;
pub mod synth;
pub mod train;
