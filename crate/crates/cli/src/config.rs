use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use somnadhere_core::synth::SynthConfig;
use somnadhere_core::train::{CvConfig, TrainRunConfig};

use crate::args::Preset;
use crate::CliError;

/// On-disk run configuration. Every section has defaults, so `{}` is a
/// valid config; unknown keys anywhere are rejected. The `pretrain` and
/// `classify` sections, when present, replace the preset's training recipe
/// wholesale.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub qc: QcSection,
    pub folds: FoldsSection,
    pub pretrain: Option<TrainRunConfig>,
    pub classify: Option<TrainRunConfig>,
    pub eval: EvalSection,
    pub interpret: InterpretSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcSection {
    pub min_sleep_hours: f64,
}

impl Default for QcSection {
    fn default() -> Self {
        QcSection {
            min_sleep_hours: 4.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldsSection {
    pub k: usize,
    pub holdout: usize,
    pub seed: u64,
}

impl Default for FoldsSection {
    fn default() -> Self {
        FoldsSection {
            k: 4,
            holdout: 50,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { seed: 13 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretSection {
    pub smooth_window_nights: usize,
    pub seed: u64,
}

impl Default for InterpretSection {
    fn default() -> Self {
        InterpretSection {
            smooth_window_nights: 14,
            seed: 17,
        }
    }
}

/// Seeds as actually used by the stages, recorded in every run manifest
/// before any stochastic work starts.
#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub cohort: u64,
    pub folds: u64,
    pub pretrain: u64,
    pub classify: u64,
    pub eval: u64,
    pub interpret: u64,
}

/// Configuration after preset and `--seed` resolution: everything a stage
/// needs, with no remaining options.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub synth: SynthConfig,
    pub qc: QcSection,
    pub folds: FoldsSection,
    pub cv: CvConfig,
    pub eval_seed: u64,
    pub interpret: InterpretSection,
    pub preset: Preset,
}

impl Resolved {
    pub fn seeds(&self) -> SeedSummary {
        SeedSummary {
            cohort: self.synth.seed,
            folds: self.folds.seed,
            pretrain: self.cv.pretrain.seed,
            classify: self.cv.classify.seed,
            eval: self.eval_seed,
            interpret: self.interpret.seed,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

/// Splitmix-style seed derivation, so one `--seed` value fans out into
/// decorrelated per-stage seeds.
fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn resolve(
    mut cfg: RunConfig,
    preset: Preset,
    seed_override: Option<u64>,
) -> Result<Resolved, CliError> {
    let base = match preset {
        Preset::Desk => CvConfig::desk(7),
        Preset::Paper => CvConfig::paper(7),
    };
    let mut pretrain = cfg.pretrain.take().unwrap_or(base.pretrain);
    let mut classify = cfg.classify.take().unwrap_or(base.classify);
    if let Some(seed) = seed_override {
        cfg.synth.seed = seed;
        cfg.folds.seed = derive_seed(seed, 1);
        pretrain.seed = derive_seed(seed, 2);
        classify.seed = derive_seed(seed, 3);
        cfg.eval.seed = derive_seed(seed, 4);
        cfg.interpret.seed = derive_seed(seed, 5);
    }
    let cv = CvConfig { pretrain, classify };

    cfg.synth
        .validate()
        .map_err(|e| CliError::Config(format!("invalid synth section: {e}")))?;
    cv.validate()
        .map_err(|e| CliError::Config(format!("invalid training config: {e}")))?;
    if cfg.folds.k < 2 {
        return Err(CliError::Config(format!(
            "folds.k must be at least 2, got {}",
            cfg.folds.k
        )));
    }
    if !(cfg.qc.min_sleep_hours >= 0.0) {
        return Err(CliError::Config(format!(
            "qc.min_sleep_hours must be non-negative, got {}",
            cfg.qc.min_sleep_hours
        )));
    }
    if cfg.interpret.smooth_window_nights == 0 {
        return Err(CliError::Config(
            "interpret.smooth_window_nights must be positive".to_string(),
        ));
    }

    Ok(Resolved {
        synth: cfg.synth,
        qc: cfg.qc,
        folds: cfg.folds,
        cv,
        eval_seed: cfg.eval.seed,
        interpret: cfg.interpret,
        preset,
    })
}
