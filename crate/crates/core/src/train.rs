//! Cross-validated training pipeline: respiration preprocessing, stratified
//! participant folds, reconstruction pretraining, frozen-encoder classifier
//! training, and nightly score prediction.
//!
//! Splits are by participant, never by night. Each fold trains its own model
//! from scratch on its train participants and scores only its test
//! participants, so every non-holdout participant is scored exactly once by
//! a model that never saw them. External-holdout participants are scored by
//! every fold's model and the scores averaged.
//!
//! Determinism: every random choice (weight init, batch order, dropout,
//! oversampling) comes from a ChaCha8 stream derived from the run seed and
//! the fold index. Folds run in parallel but collect in fold order, batch
//! items reduce in item order, and inference is read-only, so outputs are
//! byte-identical for any thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Cohort, NightRecord};
use crate::dsp::{
    iir_filter, multitaper_spectrogram, normalize, resample, DspError, FilterSpec,
    MultitaperParams, Spectrogram,
};
use crate::nn::weights::Group;
use crate::nn::{
    adamw_step, classifier_forward, classifier_loss_and_grads, encoder_forward, loss_and_grads,
    lr_schedule, patchify, AdamHyper, Batch, BatchItem, LatentBatch, LatentItem, Mat, Mode,
    ModelConfig, ModelWeights, NnError, OptimizerState,
};

pub const MODEL_RATE_HZ: f64 = 10.0;
const RESP_HIGHPASS_HZ: f64 = 0.05;
const EEG_BAND_LO_HZ: f64 = 0.3;
const EEG_BAND_HI_HZ: f64 = 32.0;
const FILTER_ORDER: usize = 4;

const LANE_SAMPLER: u64 = 1;
const LANE_DROPOUT: u64 = 2;
const LANE_OVERSAMPLE: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least {need} participants per class, got {pos} positive / {neg} negative")]
    TooFewParticipants { need: usize, pos: usize, neg: usize },
    #[error("training set contains a single class")]
    SingleClass,
    #[error("night {night_id} of {participant_id} has no EEG channel, required for pretraining")]
    MissingEeg {
        participant_id: String,
        night_id: String,
    },
    #[error("night {night_id} of {participant_id} has no reconstruction target")]
    MissingTarget {
        participant_id: String,
        night_id: String,
    },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("bad run config: {0}")]
    BadConfig(String),
    #[error("model config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NightMeta {
    pub participant_id: String,
    pub night_id: String,
    pub phase_id: u32,
    pub label: bool,
}

/// A night reduced to what the model consumes: token rows for the encoder
/// and, when EEG was present, the reconstruction target in log(1+power)
/// space. Targets are z-scored per frequency bin with training-fold
/// statistics at batch assembly, never here, so a prepped night carries no
/// fold-dependent state.
#[derive(Debug, Clone)]
pub struct PreppedNight {
    pub meta: NightMeta,
    pub tokens: Mat<f32>,
    pub target: Option<Mat<f32>>,
}

/// Preprocess one night for the model: highpass and resample the
/// respiration trace, normalize it, and cut it into patch tokens. With
/// `want_target` the EEG channel is bandpassed, turned into a multitaper
/// spectrogram, rebinned to the model's frequency resolution, averaged over
/// each token's time span, and log-transformed.
pub fn preprocess_night(
    night: &NightRecord,
    model: &ModelConfig,
    want_target: bool,
) -> Result<PreppedNight, TrainError> {
    preprocess_night_keep_spectrogram(night, model, want_target).map(|(p, _)| p)
}

/// Like [`preprocess_night`], but also returns the native-resolution EEG
/// spectrogram when a target was requested, so callers that need band
/// features or mean spectra reuse the multitaper pass instead of repeating
/// it.
pub fn preprocess_night_keep_spectrogram(
    night: &NightRecord,
    model: &ModelConfig,
    want_target: bool,
) -> Result<(PreppedNight, Option<Spectrogram>), TrainError> {
    let filtered = iir_filter(
        &night.respiration,
        &FilterSpec::highpass(RESP_HIGHPASS_HZ, FILTER_ORDER),
    )?;
    let at_rate = resample(&filtered, MODEL_RATE_HZ)?;
    let resp = normalize(&at_rate);
    let tokens: Mat<f32> = patchify(&resp, model)?;
    let meta = NightMeta {
        participant_id: night.participant_id.clone(),
        night_id: night.night_id.clone(),
        phase_id: night.phase_id,
        label: night.meds.label(),
    };
    if !want_target {
        return Ok((
            PreppedNight {
                meta,
                tokens,
                target: None,
            },
            None,
        ));
    }
    let eeg = night.eeg.as_ref().ok_or_else(|| TrainError::MissingEeg {
        participant_id: night.participant_id.clone(),
        night_id: night.night_id.clone(),
    })?;
    let spec = if EEG_BAND_HI_HZ < eeg.rate_hz / 2.0 {
        FilterSpec::bandpass(EEG_BAND_LO_HZ, EEG_BAND_HI_HZ, FILTER_ORDER)
    } else {
        FilterSpec::highpass(EEG_BAND_LO_HZ, FILTER_ORDER)
    };
    let banded = iir_filter(eeg, &spec)?;
    let spg = multitaper_spectrogram(&banded, &MultitaperParams::default())?;
    let target = spectrogram_target(&spg, tokens.rows, model);
    Ok((
        PreppedNight {
            meta,
            tokens,
            target: Some(target),
        },
        Some(spg),
    ))
}

/// Per-token reconstruction target: mean raw power over the spectrogram
/// windows overlapping the token's time span, rebinned to the model's
/// frequency bins, then log(1+p).
fn spectrogram_target(spg: &Spectrogram, n_tokens: usize, model: &ModelConfig) -> Mat<f32> {
    let re = spg.rebin(model.spec_bins, EEG_BAND_HI_HZ);
    let token_s = model.patch_samples as f64 / MODEL_RATE_HZ;
    let mut target = Mat::<f32>::zeros(n_tokens, model.spec_bins);
    for ti in 0..n_tokens {
        let t0 = ti as f64 * token_s;
        let t1 = t0 + token_s;
        let w0 = ((t0 / re.step_s).floor() as usize).min(re.n_windows - 1);
        let w1 = (((t1 / re.step_s).ceil() as usize).min(re.n_windows)).max(w0 + 1);
        let row = target.row_mut(ti);
        for w in w0..w1 {
            let src = re.window(w);
            for j in 0..model.spec_bins {
                row[j] += src[j];
            }
        }
        let inv = 1.0 / (w1 - w0) as f32;
        for v in row.iter_mut() {
            *v = (*v * inv).ln_1p();
        }
    }
    target
}

/// Preprocess a whole cohort in parallel. For cohorts too large to hold raw
/// signals in memory, preprocess per participant instead (for synthetic
/// cohorts, via `synth::map_cohort_participants`).
pub fn prep_cohort(
    cohort: &Cohort,
    model: &ModelConfig,
    want_targets: bool,
) -> Result<Vec<PreppedNight>, TrainError> {
    cohort
        .nights
        .par_iter()
        .map(|n| preprocess_night(n, model, want_targets))
        .collect()
}

/// Participant ids with their labels, sorted by id. A participant whose
/// record includes any medicated phase counts as positive for
/// stratification; per-night labels are untouched.
pub fn participant_labels(nights: &[PreppedNight]) -> Vec<(String, bool)> {
    let mut map: BTreeMap<&str, bool> = BTreeMap::new();
    for n in nights {
        let e = map.entry(&n.meta.participant_id).or_insert(false);
        *e = *e || n.meta.label;
    }
    map.into_iter().map(|(id, l)| (id.to_string(), l)).collect()
}

/// Per-frequency-bin mean and standard deviation of log(1+power) target
/// rows, computed over a training fold and applied at batch assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn target_bin_stats(nights: &[&PreppedNight]) -> Result<BinStats, TrainError> {
    let first = nights.first().ok_or(TrainError::EmptyTrainingSet)?;
    let target = require_target(first)?;
    let bins = target.cols;
    let mut sum = vec![0.0f64; bins];
    let mut sumsq = vec![0.0f64; bins];
    let mut rows = 0usize;
    for night in nights {
        let target = require_target(night)?;
        if target.cols != bins {
            return Err(TrainError::ConfigMismatch(format!(
                "target has {} bins, expected {}",
                target.cols, bins
            )));
        }
        for r in 0..target.rows {
            for (j, &v) in target.row(r).iter().enumerate() {
                let v = f64::from(v);
                sum[j] += v;
                sumsq[j] += v * v;
            }
        }
        rows += target.rows;
    }
    let n = rows as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / n - m * m).max(0.0);
            let sd = var.sqrt();
            if sd < 1e-6 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(BinStats { mean, std })
}

pub fn apply_bin_stats(target: &Mat<f32>, stats: &BinStats) -> Mat<f32> {
    assert_eq!(target.cols, stats.mean.len(), "bin count mismatch");
    let mut out = Mat::zeros(target.rows, target.cols);
    for r in 0..target.rows {
        let src = target.row(r);
        let dst = out.row_mut(r);
        for j in 0..target.cols {
            dst[j] = ((f64::from(src[j]) - stats.mean[j]) / stats.std[j]) as f32;
        }
    }
    out
}

fn require_target<'a>(night: &'a PreppedNight) -> Result<&'a Mat<f32>, TrainError> {
    night.target.as_ref().ok_or_else(|| TrainError::MissingTarget {
        participant_id: night.meta.participant_id.clone(),
        night_id: night.meta.night_id.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
    pub external_holdout: Vec<String>,
}

/// Stratified participant-level folds. Participants are split by label,
/// each class is shuffled with the seed, an optional external holdout is
/// drawn proportionally first, and the rest are dealt round-robin so every
/// fold's class counts differ by at most one. Test sets partition the
/// non-holdout participants; each train set is the complement of its test
/// set.
pub fn make_folds(
    participants: &[(String, bool)],
    k: usize,
    n_holdout: usize,
    seed: u64,
) -> Result<FoldPlan, TrainError> {
    if k < 2 {
        return Err(TrainError::BadConfig(format!("need at least 2 folds, got {k}")));
    }
    let mut by_id: BTreeMap<&str, bool> = BTreeMap::new();
    for (id, label) in participants {
        if by_id.insert(id, *label).is_some() {
            return Err(TrainError::BadConfig(format!("duplicate participant id {id}")));
        }
    }
    let mut pos: Vec<&str> = by_id.iter().filter(|(_, &l)| l).map(|(id, _)| *id).collect();
    let mut neg: Vec<&str> = by_id.iter().filter(|(_, &l)| !l).map(|(id, _)| *id).collect();
    let total = pos.len() + neg.len();
    if n_holdout >= total {
        return Err(TrainError::BadConfig(format!(
            "holdout of {n_holdout} leaves no participants out of {total}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let hold_pos = ((n_holdout as f64 * pos.len() as f64 / total as f64).round() as usize)
        .min(pos.len())
        .min(n_holdout);
    let hold_neg = n_holdout - hold_pos;
    if hold_neg > neg.len() {
        return Err(TrainError::BadConfig(format!(
            "holdout of {n_holdout} needs {hold_neg} negatives, only {} exist",
            neg.len()
        )));
    }
    let mut external_holdout: Vec<String> = pos
        .drain(..hold_pos)
        .chain(neg.drain(..hold_neg))
        .map(String::from)
        .collect();
    external_holdout.sort();

    if pos.len() < k || neg.len() < k {
        return Err(TrainError::TooFewParticipants {
            need: k,
            pos: pos.len(),
            neg: neg.len(),
        });
    }

    let mut tests: Vec<Vec<&str>> = vec![Vec::new(); k];
    for (i, id) in pos.iter().enumerate() {
        tests[i % k].push(id);
    }
    for (i, id) in neg.iter().enumerate() {
        tests[i % k].push(id);
    }

    let pool: BTreeSet<&str> = pos.iter().chain(neg.iter()).copied().collect();
    let global = pos.len() as f64 / pool.len() as f64;
    let mut folds = Vec::with_capacity(k);
    for test in tests {
        let test_set: BTreeSet<&str> = test.iter().copied().collect();
        let mut train: Vec<String> = pool
            .iter()
            .filter(|id| !test_set.contains(*id))
            .map(|id| id.to_string())
            .collect();
        train.sort();
        let mut test: Vec<String> = test.into_iter().map(String::from).collect();
        test.sort();
        let frac = test
            .iter()
            .filter(|id| by_id[id.as_str()])
            .count() as f64
            / test.len() as f64;
        let tolerance = (0.02f64).max(1.0 / test.len() as f64);
        if (frac - global).abs() > tolerance + 1e-12 {
            return Err(TrainError::BadConfig(format!(
                "fold positive fraction {frac:.3} strays from global {global:.3}"
            )));
        }
        folds.push(Fold { train, test });
    }
    Ok(FoldPlan {
        folds,
        external_holdout,
    })
}

/// Indices for label-balanced training: every index once, plus minority
/// indices redrawn with replacement until the classes have equal counts.
/// The support (set of distinct indices) is unchanged.
pub fn oversample_indices(labels: &[bool], seed: u64) -> Result<Vec<usize>, TrainError> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(TrainError::SingleClass);
    }
    let mut out: Vec<usize> = (0..labels.len()).collect();
    let (minority, deficit) = if pos.len() < neg.len() {
        (&pos, neg.len() - pos.len())
    } else {
        (&neg, pos.len() - neg.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..deficit {
        out.push(minority[rng.gen_range(0..minority.len())]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub oversample: bool,
    pub warmup_frac: f64,
    pub seed: u64,
    pub hyper: AdamHyper,
    pub model: ModelConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            steps: 4000,
            batch_size: 48,
            oversample: true,
            warmup_frac: 0.1,
            seed: 7,
            hyper: AdamHyper::default(),
            model: ModelConfig::desk(),
        }
    }
}

impl TrainRunConfig {
    pub fn warmup_steps(&self) -> usize {
        ((self.steps as f64 * self.warmup_frac).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::BadConfig("steps must be positive".to_string()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::BadConfig(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=0.9).contains(&self.warmup_frac) {
            return Err(TrainError::BadConfig(format!(
                "warmup_frac must be in [0, 0.9], got {}",
                self.warmup_frac
            )));
        }
        if self.warmup_steps() >= self.steps {
            return Err(TrainError::BadConfig(format!(
                "steps ({}) must exceed warmup ({})",
                self.steps,
                self.warmup_steps()
            )));
        }
        if !(self.hyper.lr_base > 0.0 && self.hyper.lr_base.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "lr_base must be positive, got {}",
                self.hyper.lr_base
            )));
        }
        if !(0.0..1.0).contains(&self.hyper.beta1) || !(0.0..1.0).contains(&self.hyper.beta2) {
            return Err(TrainError::BadConfig("betas must be in [0, 1)".to_string()));
        }
        if !(self.hyper.eps > 0.0) || self.hyper.weight_decay < 0.0 {
            return Err(TrainError::BadConfig(
                "eps must be positive and weight_decay non-negative".to_string(),
            ));
        }
        self.model
            .validate()
            .map_err(|e| TrainError::BadConfig(e.to_string()))
    }
}

/// Both training stages of one cross-validation run. The model config must
/// match between stages because the classifier trains on top of the
/// pretrained encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    pub pretrain: TrainRunConfig,
    pub classify: TrainRunConfig,
}

impl CvConfig {
    /// Laptop-scale preset: 500 reconstruction steps, then 1000 classifier
    /// steps, batch 16.
    pub fn desk(seed: u64) -> CvConfig {
        let model = ModelConfig::desk();
        CvConfig {
            pretrain: TrainRunConfig {
                steps: 500,
                batch_size: 16,
                oversample: false,
                warmup_frac: 0.1,
                seed,
                hyper: AdamHyper {
                    lr_base: 1e-3,
                    ..AdamHyper::default()
                },
                model,
            },
            classify: TrainRunConfig {
                steps: 1000,
                batch_size: 16,
                oversample: true,
                warmup_frac: 0.1,
                seed,
                hyper: AdamHyper {
                    lr_base: 3e-3,
                    ..AdamHyper::default()
                },
                model,
            },
        }
    }

    /// Full-scale preset matching the original training recipe's shape.
    pub fn paper(seed: u64) -> CvConfig {
        let model = ModelConfig::paper();
        CvConfig {
            pretrain: TrainRunConfig {
                steps: 20_000,
                batch_size: 48,
                oversample: false,
                warmup_frac: 0.1,
                seed,
                hyper: AdamHyper {
                    lr_base: 1e-3,
                    ..AdamHyper::default()
                },
                model,
            },
            classify: TrainRunConfig {
                steps: 4000,
                batch_size: 48,
                oversample: true,
                warmup_frac: 0.1,
                seed,
                hyper: AdamHyper {
                    lr_base: 3e-3,
                    ..AdamHyper::default()
                },
                model,
            },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.pretrain.validate()?;
        self.classify.validate()?;
        if self.pretrain.model != self.classify.model {
            return Err(TrainError::ConfigMismatch(
                "pretrain and classify stages use different model configs".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Nightly prediction: `z` is the probability-like score in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionScore {
    pub participant_id: String,
    pub night_id: String,
    pub phase_id: u32,
    pub label: bool,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateScore {
    pub participant_id: String,
    pub phase_id: u32,
    pub label: bool,
    pub z: f64,
    pub n_nights: usize,
}

fn lane_rng(seed: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(lane);
    rng
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-fold pretraining seed. [`run_cv`] derives fold seeds with this, so a
/// caller running the stages separately trains bit-identical models.
pub fn fold_pretrain_seed(base: u64, fold: usize) -> u64 {
    mix_seed(base, fold as u64)
}

/// Per-fold classifier seed, salted into a different space than pretraining.
pub fn fold_classifier_seed(base: u64, fold: usize) -> u64 {
    mix_seed(base, (fold as u64) | (1 << 32))
}

/// Epoch-shuffled batch indices into a fixed pool. Each pass shuffles the
/// pool and yields full batches, discarding any short remainder before
/// reshuffling.
struct EpochSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(pool: Vec<usize>, batch: usize, rng: ChaCha8Rng) -> Self {
        assert!(!pool.is_empty(), "sampler pool is empty");
        EpochSampler {
            pool,
            order: Vec::new(),
            pos: 0,
            batch,
            rng,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        let b = self.batch.min(self.pool.len());
        if self.pos + b > self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let s = &self.order[self.pos..self.pos + b];
        self.pos += b;
        s
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub weights: ModelWeights<f32>,
    pub bin_stats: BinStats,
    pub log: Vec<TrainLogEntry>,
    pub trained_participants: BTreeSet<String>,
}

/// Reconstruction pretraining: `cfg.steps` AdamW steps of spectrogram
/// regression over shuffled batches, training encoder and decoder from
/// fresh init. No early stopping; the final-step weights are the result.
/// Labels play no role, so the oversample flag is ignored here.
pub fn pretrain(nights: &[&PreppedNight], cfg: &TrainRunConfig) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    if nights.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    for night in nights {
        let target = require_target(night)?;
        if night.tokens.cols != cfg.model.patch_samples || target.cols != cfg.model.spec_bins {
            return Err(TrainError::ConfigMismatch(format!(
                "night {} of {} was prepped as {}x{}, model wants {}x{}",
                night.meta.night_id,
                night.meta.participant_id,
                night.tokens.cols,
                target.cols,
                cfg.model.patch_samples,
                cfg.model.spec_bins
            )));
        }
    }
    let bin_stats = target_bin_stats(nights)?;
    let mut weights = ModelWeights::<f32>::init(&cfg.model, cfg.seed);
    let trainable = {
        let lay = weights.layout();
        [lay.group_range(Group::Encoder), lay.group_range(Group::Decoder)]
    };
    let mut state = OptimizerState::new(weights.n_params());
    let mut sampler = EpochSampler::new(
        (0..nights.len()).collect(),
        cfg.batch_size,
        lane_rng(cfg.seed, LANE_SAMPLER),
    );
    let mut drop_rng = lane_rng(cfg.seed, LANE_DROPOUT);
    let warmup = cfg.warmup_steps();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut trained_participants = BTreeSet::new();

    for step in 0..cfg.steps {
        let idxs = sampler.next_batch().to_vec();
        for &i in &idxs {
            trained_participants.insert(nights[i].meta.participant_id.clone());
        }
        let batch = Batch {
            items: idxs
                .iter()
                .map(|&i| BatchItem {
                    tokens: nights[i].tokens.clone(),
                    n_real: nights[i].tokens.rows,
                    target: Some(apply_bin_stats(nights[i].target.as_ref().unwrap(), &bin_stats)),
                    label: Some(nights[i].meta.label),
                })
                .collect(),
        };
        let (loss, grads) = loss_and_grads(&weights, &batch, Mode::Pretrain, Some(&mut drop_rng))?;
        let lr = lr_schedule(step, cfg.steps, warmup, cfg.hyper.lr_base);
        adamw_step(&mut weights, &grads, &mut state, &cfg.hyper, lr, &trainable);
        log.push(TrainLogEntry {
            step: step + 1,
            loss,
            lr,
        });
    }
    Ok(PretrainOutcome {
        weights,
        bin_stats,
        log,
        trained_participants,
    })
}

#[derive(Debug)]
pub struct ClassifierOutcome {
    pub weights: ModelWeights<f32>,
    pub log: Vec<TrainLogEntry>,
    pub trained_participants: BTreeSet<String>,
}

fn frozen_hash(w: &ModelWeights<f32>) -> [u8; 32] {
    let lay = w.layout();
    let mut h = Sha256::new();
    for range in [lay.group_range(Group::Encoder), lay.group_range(Group::Decoder)] {
        for v in &w.data[range] {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Classifier training on a frozen pretrained model. Encoder latents are
/// cached once per night up front; only classifier parameters receive
/// optimizer steps, and a hash check guarantees encoder and decoder bytes
/// are identical before and after.
pub fn train_classifier(
    nights: &[&PreppedNight],
    weights: ModelWeights<f32>,
    cfg: &TrainRunConfig,
) -> Result<ClassifierOutcome, TrainError> {
    cfg.validate()?;
    check_model_match(&weights, cfg)?;
    if nights.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let pre_hash = frozen_hash(&weights);
    let items: Vec<(String, LatentItem<f32>)> = nights
        .par_iter()
        .map(|n| {
            let latents = encoder_forward(&weights, &n.tokens, n.tokens.rows)?;
            Ok((
                n.meta.participant_id.clone(),
                LatentItem {
                    latents,
                    n_real: n.tokens.rows,
                    label: n.meta.label,
                },
            ))
        })
        .collect::<Result<_, NnError>>()?;
    let out = train_classifier_core(items, weights, cfg)?;
    assert_eq!(
        frozen_hash(&out.weights),
        pre_hash,
        "frozen encoder or decoder changed during classifier training"
    );
    Ok(out)
}

/// Classifier training directly on caller-provided latents (the cached form
/// `train_classifier` uses internally).
pub fn train_classifier_latents(
    items: Vec<LatentItem<f32>>,
    weights: ModelWeights<f32>,
    cfg: &TrainRunConfig,
) -> Result<ClassifierOutcome, TrainError> {
    cfg.validate()?;
    check_model_match(&weights, cfg)?;
    let tagged = items
        .into_iter()
        .enumerate()
        .map(|(i, item)| (format!("latent{i:04}"), item))
        .collect();
    train_classifier_core(tagged, weights, cfg)
}

fn check_model_match(weights: &ModelWeights<f32>, cfg: &TrainRunConfig) -> Result<(), TrainError> {
    if weights.cfg != cfg.model {
        return Err(TrainError::ConfigMismatch(format!(
            "checkpoint built for {:?}, run config wants {:?}",
            weights.cfg, cfg.model
        )));
    }
    Ok(())
}

fn train_classifier_core(
    items: Vec<(String, LatentItem<f32>)>,
    mut weights: ModelWeights<f32>,
    cfg: &TrainRunConfig,
) -> Result<ClassifierOutcome, TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let labels: Vec<bool> = items.iter().map(|(_, it)| it.label).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(TrainError::SingleClass);
    }
    let pool = if cfg.oversample {
        oversample_indices(&labels, mix_seed(cfg.seed, LANE_OVERSAMPLE))?
    } else {
        (0..items.len()).collect()
    };
    let trainable = [weights.layout().group_range(Group::Classifier)];
    let mut state = OptimizerState::new(weights.n_params());
    let mut sampler = EpochSampler::new(pool, cfg.batch_size, lane_rng(cfg.seed, LANE_SAMPLER));
    let mut drop_rng = lane_rng(cfg.seed, LANE_DROPOUT);
    let warmup = cfg.warmup_steps();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut trained_participants = BTreeSet::new();

    for step in 0..cfg.steps {
        let idxs = sampler.next_batch().to_vec();
        for &i in &idxs {
            trained_participants.insert(items[i].0.clone());
        }
        let batch = LatentBatch {
            items: idxs.iter().map(|&i| items[i].1.clone()).collect(),
        };
        let (loss, grads) = classifier_loss_and_grads(&weights, &batch, Some(&mut drop_rng))?;
        let lr = lr_schedule(step, cfg.steps, warmup, cfg.hyper.lr_base);
        adamw_step(&mut weights, &grads, &mut state, &cfg.hyper, lr, &trainable);
        log.push(TrainLogEntry {
            step: step + 1,
            loss,
            lr,
        });
    }
    Ok(ClassifierOutcome {
        weights,
        log,
        trained_participants,
    })
}

/// Score one raw night from respiration alone. The EEG channel, if present,
/// is never read.
pub fn predict_night(
    night: &NightRecord,
    weights: &ModelWeights<f32>,
) -> Result<PredictionScore, TrainError> {
    let prepped = preprocess_night(night, &weights.cfg, false)?;
    predict_prepped(&prepped, weights)
}

/// Score one prepped night.
pub fn predict_prepped(
    night: &PreppedNight,
    weights: &ModelWeights<f32>,
) -> Result<PredictionScore, TrainError> {
    if night.tokens.cols != weights.cfg.patch_samples {
        return Err(TrainError::ConfigMismatch(format!(
            "night prepped with patch size {}, model wants {}",
            night.tokens.cols, weights.cfg.patch_samples
        )));
    }
    let latents = encoder_forward(weights, &night.tokens, night.tokens.rows)?;
    let z = classifier_forward(weights, &latents, night.tokens.rows)?;
    Ok(PredictionScore {
        participant_id: night.meta.participant_id.clone(),
        night_id: night.meta.night_id.clone(),
        phase_id: night.meta.phase_id,
        label: night.meta.label,
        z,
    })
}

/// Mean nightly score per (participant, phase), sorted by that key.
pub fn aggregate_scores(scores: &[PredictionScore]) -> Vec<AggregateScore> {
    let mut map: BTreeMap<(&str, u32), (f64, usize, bool)> = BTreeMap::new();
    for s in scores {
        let e = map
            .entry((s.participant_id.as_str(), s.phase_id))
            .or_insert((0.0, 0, s.label));
        e.0 += s.z;
        e.1 += 1;
        debug_assert_eq!(e.2, s.label, "label varies within a participant phase");
    }
    map.into_iter()
        .map(|((pid, phase), (sum, n, label))| AggregateScore {
            participant_id: pid.to_string(),
            phase_id: phase,
            label,
            z: sum / n as f64,
            n_nights: n,
        })
        .collect()
}

#[derive(Debug)]
pub struct FoldArtifacts {
    pub weights: ModelWeights<f32>,
    pub bin_stats: BinStats,
    pub pretrain_log: Vec<TrainLogEntry>,
    pub classifier_log: Vec<TrainLogEntry>,
}

#[derive(Debug)]
pub struct CvOutcome {
    pub predictions: Vec<PredictionScore>,
    pub holdout_predictions: Vec<PredictionScore>,
    pub folds: Vec<FoldArtifacts>,
}

fn validate_plan(nights: &[PreppedNight], plan: &FoldPlan) -> Result<(), TrainError> {
    if plan.folds.is_empty() {
        return Err(TrainError::BadConfig("fold plan has no folds".to_string()));
    }
    let all_ids: BTreeSet<&str> = nights.iter().map(|n| n.meta.participant_id.as_str()).collect();
    let holdout: BTreeSet<&str> = plan.external_holdout.iter().map(String::as_str).collect();
    if holdout.len() != plan.external_holdout.len() {
        return Err(TrainError::BadConfig("duplicate holdout ids".to_string()));
    }
    for id in &holdout {
        if !all_ids.contains(id) {
            return Err(TrainError::BadConfig(format!("holdout id {id} has no nights")));
        }
    }
    let non_holdout: BTreeSet<&str> = all_ids.difference(&holdout).copied().collect();
    let mut seen_test: BTreeSet<&str> = BTreeSet::new();
    for (fi, fold) in plan.folds.iter().enumerate() {
        let test: BTreeSet<&str> = fold.test.iter().map(String::as_str).collect();
        let train: BTreeSet<&str> = fold.train.iter().map(String::as_str).collect();
        if test.is_empty() || train.is_empty() {
            return Err(TrainError::BadConfig(format!("fold {fi} has an empty side")));
        }
        if !test.is_subset(&non_holdout) || !train.is_subset(&non_holdout) {
            return Err(TrainError::BadConfig(format!(
                "fold {fi} references holdout or unknown participants"
            )));
        }
        if train.intersection(&test).next().is_some() {
            return Err(TrainError::BadConfig(format!(
                "fold {fi} has overlapping train and test sets"
            )));
        }
        if train.union(&test).count() != non_holdout.len() {
            return Err(TrainError::BadConfig(format!(
                "fold {fi} does not cover all non-holdout participants"
            )));
        }
        for id in &test {
            if !seen_test.insert(id) {
                return Err(TrainError::BadConfig(format!(
                    "participant {id} appears in multiple test sets"
                )));
            }
        }
    }
    if seen_test != non_holdout {
        return Err(TrainError::BadConfig(
            "test sets do not partition the non-holdout participants".to_string(),
        ));
    }
    Ok(())
}

/// Full cross-validation: per fold, pretrain then classifier-train on the
/// train participants and score the test participants, so every non-holdout
/// participant is scored exactly once by a model that never trained on
/// them. External-holdout nights are scored by every fold's model and the
/// scores averaged in fold order. Gradient-batch provenance is checked
/// against the fold's test set; any overlap panics.
pub fn run_cv(nights: &[PreppedNight], plan: &FoldPlan, cfg: &CvConfig) -> Result<CvOutcome, TrainError> {
    cfg.validate()?;
    validate_plan(nights, plan)?;
    let mut by_participant: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, n) in nights.iter().enumerate() {
        by_participant
            .entry(n.meta.participant_id.as_str())
            .or_default()
            .push(i);
    }
    let holdout_idx: Vec<usize> = plan
        .external_holdout
        .iter()
        .flat_map(|id| by_participant[id.as_str()].iter().copied())
        .collect();

    let fold_results: Vec<Result<(FoldArtifacts, Vec<PredictionScore>, Vec<f64>), TrainError>> =
        plan.folds
            .par_iter()
            .enumerate()
            .map(|(fi, fold)| {
                let train: Vec<&PreppedNight> = fold
                    .train
                    .iter()
                    .flat_map(|id| by_participant[id.as_str()].iter().map(|&i| &nights[i]))
                    .collect();
                let test_idx: Vec<usize> = fold
                    .test
                    .iter()
                    .flat_map(|id| by_participant[id.as_str()].iter().copied())
                    .collect();
                let test_set: BTreeSet<&str> = fold.test.iter().map(String::as_str).collect();

                let mut pre_cfg = cfg.pretrain.clone();
                pre_cfg.seed = fold_pretrain_seed(cfg.pretrain.seed, fi);
                let mut cls_cfg = cfg.classify.clone();
                cls_cfg.seed = fold_classifier_seed(cfg.classify.seed, fi);

                let pre = pretrain(&train, &pre_cfg)?;
                assert_leakage_free(fi, &pre.trained_participants, &test_set);
                let cls = train_classifier(&train, pre.weights, &cls_cfg)?;
                assert_leakage_free(fi, &cls.trained_participants, &test_set);

                let preds: Vec<PredictionScore> = test_idx
                    .par_iter()
                    .map(|&i| predict_prepped(&nights[i], &cls.weights))
                    .collect::<Result<_, _>>()?;
                let hold_z: Vec<f64> = holdout_idx
                    .par_iter()
                    .map(|&i| predict_prepped(&nights[i], &cls.weights).map(|p| p.z))
                    .collect::<Result<_, _>>()?;
                Ok((
                    FoldArtifacts {
                        weights: cls.weights,
                        bin_stats: pre.bin_stats,
                        pretrain_log: pre.log,
                        classifier_log: cls.log,
                    },
                    preds,
                    hold_z,
                ))
            })
            .collect();

    let mut folds = Vec::with_capacity(plan.folds.len());
    let mut predictions = Vec::new();
    let mut hold_sums = vec![0.0f64; holdout_idx.len()];
    for result in fold_results {
        let (artifacts, preds, hold_z) = result?;
        folds.push(artifacts);
        predictions.extend(preds);
        for (sum, z) in hold_sums.iter_mut().zip(&hold_z) {
            *sum += z;
        }
    }
    predictions.sort_by(|a, b| {
        (&a.participant_id, &a.night_id).cmp(&(&b.participant_id, &b.night_id))
    });

    let k = plan.folds.len() as f64;
    let holdout_predictions: Vec<PredictionScore> = holdout_idx
        .iter()
        .zip(&hold_sums)
        .map(|(&i, &sum)| PredictionScore {
            participant_id: nights[i].meta.participant_id.clone(),
            night_id: nights[i].meta.night_id.clone(),
            phase_id: nights[i].meta.phase_id,
            label: nights[i].meta.label,
            z: sum / k,
        })
        .collect();

    Ok(CvOutcome {
        predictions,
        holdout_predictions,
        folds,
    })
}

/// Panics if any participant that received gradient steps is in the fold's
/// test set. [`run_cv`] calls this after each training stage; callers that
/// stage folds themselves should do the same with the outcome's
/// `trained_participants`.
pub fn assert_leakage_free(fold: usize, trained: &BTreeSet<String>, test: &BTreeSet<&str>) {
    for id in trained {
        assert!(
            !test.contains(id.as_str()),
            "leakage: participant {id} received gradient steps in fold {fold} but is in its test set"
        );
    }
}

pub fn write_predictions_csv<W: Write>(w: W, scores: &[PredictionScore]) -> Result<(), TrainError> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in scores {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_predictions_csv<R: Read>(r: R) -> Result<Vec<PredictionScore>, TrainError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// One JSON object per line: {"step":..,"loss":..,"lr":..}.
pub fn write_train_log<W: Write>(mut w: W, log: &[TrainLogEntry]) -> Result<(), TrainError> {
    for entry in log {
        serde_json::to_writer(&mut w, entry)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_train_log<R: Read>(r: R) -> Result<Vec<TrainLogEntry>, TrainError> {
    let mut buf = String::new();
    let mut r = r;
    r.read_to_string(&mut buf)?;
    buf.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(TrainError::from))
        .collect()
}

/// Mean loss over the first and last `window` log entries, for smoothed
/// convergence checks. `None` if the log is shorter than the window.
pub fn smoothed_loss_ends(log: &[TrainLogEntry], window: usize) -> Option<(f64, f64)> {
    if window == 0 || log.len() < window {
        return None;
    }
    let head = log[..window].iter().map(|e| e.loss).sum::<f64>() / window as f64;
    let tail = log[log.len() - window..].iter().map(|e| e.loss).sum::<f64>() / window as f64;
    Some((head, tail))
}
