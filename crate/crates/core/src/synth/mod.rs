//! Synthetic cohort generator with planted, dose-scaled medication effects.
//!
//! Every night is generated from an [`EffectProfile`] that states exactly how
//! a medication shifts sleep architecture (REM latency, REM/SWS fractions,
//! efficiency), EEG band power (slow-oscillation and beta weights), and
//! breathing texture (breath-interval autocorrelation). Because the effects
//! are planted, downstream detection and interpretation claims can be checked
//! against ground truth instead of against inaccessible clinical data.

mod eeg;
mod hypnogram;
mod respiration;

pub use eeg::{gen_eeg, stage_band_template, EEG_BANDS_HZ, EEG_NOISE_FLOOR, EEG_RATE_HZ};
pub use hypnogram::{gen_hypnogram, rem_latency_min, stage_fraction, BASELINE_REM_LATENCY_MIN};
pub use respiration::{
    breath_intervals, gen_respiration, interval_cv, lag1_autocorr, RESP_RATE_HZ,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    Cohort, DataError, MedicationClass, MedicationStatus, NightRecord, Provenance, Sex,
};
use crate::stats::ddd_normalize;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("generated cohort failed validation: {0}")]
    BadCohort(#[from] DataError),
}

/// How one medication shifts the generated night, relative to an unmedicated
/// control. Multiplicative fields are 1.0 at identity, deltas are 0.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectProfile {
    /// Multiplies the sleep-onset-to-first-REM interval. Never below 1.
    pub rem_latency_mult: f64,
    /// Scales REM episode durations, in (0, 1].
    pub rem_fraction_mult: f64,
    /// Scales the N3 share of NREM time, in (0, 1.5].
    pub sws_fraction_mult: f64,
    /// Added to sleep efficiency by shrinking wake after sleep onset.
    pub efficiency_delta: f64,
    /// Multiplies the 0-1 Hz EEG band amplitude in sleep stages.
    pub so_power_mult: f64,
    /// Multiplies the 16-32 Hz EEG band amplitude in sleep stages.
    pub beta_power_mult: f64,
    /// Strength of a slow AR(1) wander added to log breath intervals,
    /// independent of stage. 0 means stage statistics alone.
    pub resp_texture_shift: f64,
}

impl EffectProfile {
    pub fn identity() -> Self {
        EffectProfile {
            rem_latency_mult: 1.0,
            rem_fraction_mult: 1.0,
            sws_fraction_mult: 1.0,
            efficiency_delta: 0.0,
            so_power_mult: 1.0,
            beta_power_mult: 1.0,
            resp_texture_shift: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fields = [
            ("rem_latency_mult", self.rem_latency_mult),
            ("rem_fraction_mult", self.rem_fraction_mult),
            ("sws_fraction_mult", self.sws_fraction_mult),
            ("efficiency_delta", self.efficiency_delta),
            ("so_power_mult", self.so_power_mult),
            ("beta_power_mult", self.beta_power_mult),
            ("resp_texture_shift", self.resp_texture_shift),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(SynthError::InvalidConfig(format!("{name} is not finite")));
            }
        }
        if self.rem_latency_mult < 1.0 {
            return Err(SynthError::InvalidConfig(
                "rem_latency_mult must be >= 1".into(),
            ));
        }
        if self.rem_fraction_mult <= 0.0 || self.rem_fraction_mult > 1.0 {
            return Err(SynthError::InvalidConfig(
                "rem_fraction_mult must be in (0, 1]".into(),
            ));
        }
        if self.sws_fraction_mult <= 0.0 || self.sws_fraction_mult > 1.5 {
            return Err(SynthError::InvalidConfig(
                "sws_fraction_mult must be in (0, 1.5]".into(),
            ));
        }
        if self.so_power_mult <= 0.0 || self.beta_power_mult <= 0.0 {
            return Err(SynthError::InvalidConfig(
                "band power multipliers must be positive".into(),
            ));
        }
        if self.resp_texture_shift < 0.0 {
            return Err(SynthError::InvalidConfig(
                "resp_texture_shift must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Full-strength antidepressant deviations from the identity profile. A unit
/// gets `identity + scale * deviation` per field, where scale is the class
/// strength times the dose factor, so weak classes and low doses shrink every
/// effect together.
const ANTIDEPRESSANT_DEVIATION: [f64; 7] = [
    0.9,   // rem_latency_mult: 1.0 -> 1.9
    -0.45, // rem_fraction_mult: 1.0 -> 0.55
    -0.20, // sws_fraction_mult: 1.0 -> 0.80
    0.05,  // efficiency_delta
    0.60,  // so_power_mult: 1.0 -> 1.6
    0.50,  // beta_power_mult: 1.0 -> 1.5
    1.00,  // resp_texture_shift
];

fn scaled_antidepressant(scale: f64) -> EffectProfile {
    let d = &ANTIDEPRESSANT_DEVIATION;
    EffectProfile {
        rem_latency_mult: 1.0 + scale * d[0],
        rem_fraction_mult: 1.0 + scale * d[1],
        sws_fraction_mult: 1.0 + scale * d[2],
        efficiency_delta: scale * d[3],
        so_power_mult: 1.0 + scale * d[4],
        beta_power_mult: 1.0 + scale * d[5],
        resp_texture_shift: scale * d[6],
    }
}

fn confounder_profile(class: MedicationClass) -> EffectProfile {
    let mut p = EffectProfile::identity();
    match class {
        MedicationClass::Benzodiazepine => {
            p.rem_latency_mult = 1.15;
            p.rem_fraction_mult = 0.90;
            p.sws_fraction_mult = 0.55;
            p.efficiency_delta = 0.03;
        }
        MedicationClass::Hypnotic => {
            p.rem_latency_mult = 1.02;
            p.rem_fraction_mult = 0.97;
            p.sws_fraction_mult = 0.95;
            p.efficiency_delta = 0.02;
        }
        MedicationClass::Antipsychotic => {
            p.rem_latency_mult = 1.10;
            p.sws_fraction_mult = 1.10;
            p.efficiency_delta = 0.06;
        }
        MedicationClass::Anticonvulsant => {
            p.rem_latency_mult = 1.05;
            p.rem_fraction_mult = 0.85;
            p.sws_fraction_mult = 1.25;
        }
        MedicationClass::Anticholinergic => {
            p.rem_latency_mult = 1.20;
            p.rem_fraction_mult = 0.80;
        }
        _ => {}
    }
    p
}

/// Cohort recipe. `class_mix` covers every generated class including
/// `none`; the antidepressant entries must sum to `positive_fraction`.
/// `class_strengths` is keyed by class token, except that the atypical
/// class is keyed per drug (`mirtazapine`, `bupropion`) because the two
/// behave very differently.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_participants: usize,
    pub positive_fraction: f64,
    pub class_mix: BTreeMap<MedicationClass, f64>,
    pub dose_grid: Vec<f64>,
    pub nights_per_participant: (u32, u32),
    pub class_strengths: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let class_mix = [
            (MedicationClass::None, 0.55),
            (MedicationClass::Ssri, 0.0875),
            (MedicationClass::Snri, 0.0625),
            (MedicationClass::Tca, 0.05),
            (MedicationClass::Atypical, 0.05),
            (MedicationClass::Benzodiazepine, 0.04),
            (MedicationClass::Hypnotic, 0.04),
            (MedicationClass::Anticonvulsant, 0.04),
            (MedicationClass::Antipsychotic, 0.04),
            (MedicationClass::Anticholinergic, 0.04),
        ]
        .into_iter()
        .collect();
        let class_strengths = [
            ("ssri", 0.85),
            ("snri", 1.0),
            ("tca", 0.6),
            ("mirtazapine", 0.35),
            ("bupropion", 0.15),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        SynthConfig {
            n_participants: 400,
            positive_fraction: 0.25,
            class_mix,
            dose_grid: vec![0.5, 1.0, 2.0],
            nights_per_participant: (3, 3),
            class_strengths,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_participants == 0 {
            return Err(SynthError::InvalidConfig("n_participants is zero".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(SynthError::InvalidConfig(
                "positive_fraction must be in [0, 1]".into(),
            ));
        }
        let mut total = 0.0;
        let mut positive = 0.0;
        for (&class, &p) in &self.class_mix {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidConfig(format!(
                    "class_mix[{class}] out of [0, 1]"
                )));
            }
            total += p;
            if class.is_antidepressant() {
                positive += p;
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidConfig(format!(
                "class_mix sums to {total}, expected 1"
            )));
        }
        if (positive - self.positive_fraction).abs() > 1e-9 {
            return Err(SynthError::InvalidConfig(format!(
                "antidepressant mix sums to {positive}, expected positive_fraction {}",
                self.positive_fraction
            )));
        }
        if self.dose_grid.is_empty() {
            return Err(SynthError::InvalidConfig("dose_grid is empty".into()));
        }
        if self.dose_grid.iter().any(|&d| !d.is_finite() || d <= 0.0) {
            return Err(SynthError::InvalidConfig(
                "dose_grid entries must be positive".into(),
            ));
        }
        let (lo, hi) = self.nights_per_participant;
        if lo == 0 || lo > hi {
            return Err(SynthError::InvalidConfig(format!(
                "nights_per_participant range ({lo}, {hi}) is empty"
            )));
        }
        for (k, &v) in &self.class_strengths {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InvalidConfig(format!(
                    "class_strengths[{k}] out of [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self, SynthError> {
        let cfg: SynthConfig = serde_json::from_str(json)
            .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dose factor in [0, 1]: half the DDD ratio, saturating at ratio 2. A unit
/// on twice the defined daily dose carries the full class effect; missing
/// dose information falls back to the defined daily dose itself.
fn dose_factor(meds: &MedicationStatus) -> f64 {
    let ratio = match (&meds.drug, meds.dose_mg) {
        (Some(drug), Some(mg)) => ddd_normalize(drug, mg).unwrap_or(1.0),
        _ => 1.0,
    };
    (ratio.min(2.0) / 2.0).max(0.0)
}

fn class_strength(meds: &MedicationStatus, cfg: &SynthConfig) -> f64 {
    let key = match meds.class {
        MedicationClass::Ssri => "ssri".to_string(),
        MedicationClass::Snri => "snri".to_string(),
        MedicationClass::Tca => "tca".to_string(),
        MedicationClass::Atypical => meds
            .drug
            .as_deref()
            .map(|d| d.to_ascii_lowercase())
            .unwrap_or_else(|| "atypical".to_string()),
        _ => return 0.0,
    };
    cfg.class_strengths
        .get(&key)
        .or_else(|| cfg.class_strengths.get("atypical"))
        .copied()
        .unwrap_or(1.0)
}

/// Profile for one medication status: identity for controls, a fixed shape
/// for each confounder class, and the antidepressant deviation scaled by
/// class strength times dose factor for the detection targets.
pub fn drug_profile(meds: &MedicationStatus, cfg: &SynthConfig) -> EffectProfile {
    if meds.class == MedicationClass::None {
        return EffectProfile::identity();
    }
    if meds.class.is_antidepressant() {
        let scale = class_strength(meds, cfg) * dose_factor(meds);
        return scaled_antidepressant(scale);
    }
    confounder_profile(meds.class)
}

/// Which signals to synthesize. Hypnograms and metadata are identical across
/// modes because every night draws from its own rng streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channels {
    Full,
    HypnogramOnly,
}

const LANE_HYPNOGRAM: u64 = 0;
const LANE_RESPIRATION: u64 = 1;
const LANE_EEG: u64 = 2;
const LANE_DEMOGRAPHICS: u64 = 3;

fn night_rng(seed: u64, participant: usize, night: usize, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((participant as u64 + 1) << 24) ^ ((night as u64 + 1) << 8) ^ lane);
    rng
}

/// Exact integer apportionment of `total` across `weights` (largest
/// remainder, ties broken by index).
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || total == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

const SSRI_DRUGS: [&str; 5] = [
    "escitalopram",
    "citalopram",
    "fluoxetine",
    "sertraline",
    "paroxetine",
];
const SNRI_DRUGS: [&str; 2] = ["venlafaxine", "desvenlafaxine"];
const TCA_DRUGS: [&str; 2] = ["imipramine", "nortriptyline"];
const ATYPICAL_DRUGS: [&str; 2] = ["mirtazapine", "bupropion"];

/// Fraction of antidepressant participants whose record spans two regimen
/// phases (start, stop, or dose change).
const MULTI_PHASE_FRACTION: f64 = 0.08;

#[derive(Clone)]
struct Assignment {
    phases: Vec<MedicationStatus>,
    age_years: f64,
    sex: Sex,
    ahi: f64,
    n_nights: u32,
}

fn pick_dose(drug: &str, grid: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let ratio = grid[rng.gen_range(0..grid.len())];
    let ddd = ddd_normalize(drug, 1.0).map(|per_mg| 1.0 / per_mg).unwrap_or(1.0);
    ratio * ddd
}

fn medicated(class: MedicationClass, drug: &str, dose_mg: f64) -> MedicationStatus {
    MedicationStatus {
        class,
        drug: Some(drug.to_string()),
        dose_mg: Some(dose_mg),
    }
}

fn draw_ahi(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen();
    if u < 0.50 {
        rng.gen_range(0.0..5.0)
    } else if u < 0.75 {
        rng.gen_range(5.0..15.0)
    } else if u < 0.90 {
        rng.gen_range(15.0..30.0)
    } else {
        rng.gen_range(30.0..60.0)
    }
}

fn build_assignments(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Assignment> {
    let n = cfg.n_participants;
    let n_pos = (n as f64 * cfg.positive_fraction).round() as usize;

    let antidep_classes = [
        MedicationClass::Ssri,
        MedicationClass::Snri,
        MedicationClass::Tca,
        MedicationClass::Atypical,
    ];
    let pos_weights: Vec<f64> = antidep_classes
        .iter()
        .map(|c| cfg.class_mix.get(c).copied().unwrap_or(0.0))
        .collect();
    let pos_counts = apportion(&pos_weights, n_pos);

    let neg_classes = [
        MedicationClass::None,
        MedicationClass::Benzodiazepine,
        MedicationClass::Hypnotic,
        MedicationClass::Anticonvulsant,
        MedicationClass::Antipsychotic,
        MedicationClass::Anticholinergic,
    ];
    let neg_weights: Vec<f64> = neg_classes
        .iter()
        .map(|c| cfg.class_mix.get(c).copied().unwrap_or(0.0))
        .collect();
    let neg_counts = apportion(&neg_weights, n - n_pos);

    let mut statuses: Vec<MedicationStatus> = Vec::with_capacity(n);
    for (class, &count) in antidep_classes.iter().zip(&pos_counts) {
        if *class == MedicationClass::Atypical {
            let split = apportion(&[0.5, 0.5], count);
            for (drug, &k) in ATYPICAL_DRUGS.iter().zip(&split) {
                for _ in 0..k {
                    let dose = pick_dose(drug, &cfg.dose_grid, rng);
                    statuses.push(medicated(*class, drug, dose));
                }
            }
        } else {
            let drugs: &[&str] = match class {
                MedicationClass::Ssri => &SSRI_DRUGS,
                MedicationClass::Snri => &SNRI_DRUGS,
                _ => &TCA_DRUGS,
            };
            for _ in 0..count {
                let drug = drugs[rng.gen_range(0..drugs.len())];
                let dose = pick_dose(drug, &cfg.dose_grid, rng);
                statuses.push(medicated(*class, drug, dose));
            }
        }
    }
    for (class, &count) in neg_classes.iter().zip(&neg_counts) {
        for _ in 0..count {
            statuses.push(MedicationStatus {
                class: *class,
                drug: None,
                dose_mg: None,
            });
        }
    }
    statuses.shuffle(rng);

    statuses
        .into_iter()
        .map(|status| {
            let (lo, hi) = cfg.nights_per_participant;
            let n_nights = rng.gen_range(lo..=hi);
            let mut phases = vec![status.clone()];
            if status.class.is_antidepressant()
                && n_nights >= 2
                && rng.gen::<f64>() < MULTI_PHASE_FRACTION
            {
                phases = match rng.gen_range(0..3u32) {
                    0 => vec![MedicationStatus::none(), status],
                    1 => vec![status, MedicationStatus::none()],
                    _ => {
                        let mut changed = status.clone();
                        if let (Some(drug), Some(_)) = (&status.drug, status.dose_mg) {
                            changed.dose_mg = Some(pick_dose(drug, &cfg.dose_grid, rng));
                        }
                        vec![status, changed]
                    }
                };
            }
            Assignment {
                phases,
                age_years: rng.gen_range(20.0..90.0),
                sex: if rng.gen::<bool>() { Sex::F } else { Sex::M },
                ahi: draw_ahi(rng),
                n_nights,
            }
        })
        .collect()
}

const DURATION_MEAN_H: f64 = 7.5;
const DURATION_SD_H: f64 = 0.6;

fn draw_duration_h(rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = rand_distr::StandardNormal.sample(rng);
    (DURATION_MEAN_H + DURATION_SD_H * z).clamp(6.0, 9.0)
}

/// Recipe for one night of one participant. The rng streams depend only on
/// (cfg.seed, participant, night), so a night can be regenerated in isolation
/// and will match the same night inside a full cohort run.
#[derive(Debug, Clone)]
pub struct NightSpec {
    pub participant: usize,
    pub night: usize,
    pub phase_id: u32,
    pub meds: MedicationStatus,
    pub age_years: f64,
    pub sex: Sex,
    pub ahi: f64,
}

/// Generate a single night from its recipe.
pub fn gen_night(cfg: &SynthConfig, spec: &NightSpec, channels: Channels) -> NightRecord {
    let profile = drug_profile(&spec.meds, cfg);

    let mut hyp_rng = night_rng(cfg.seed, spec.participant, spec.night, LANE_HYPNOGRAM);
    let duration_h = draw_duration_h(&mut hyp_rng);
    let hyp = gen_hypnogram(&profile, duration_h, &mut hyp_rng);

    let (respiration, eeg) = match channels {
        Channels::Full => {
            let mut resp_rng = night_rng(cfg.seed, spec.participant, spec.night, LANE_RESPIRATION);
            let mut eeg_rng = night_rng(cfg.seed, spec.participant, spec.night, LANE_EEG);
            (
                gen_respiration(&hyp, &profile, &mut resp_rng),
                Some(gen_eeg(&hyp, &profile, &mut eeg_rng)),
            )
        }
        Channels::HypnogramOnly => {
            let placeholder = crate::dsp::Signal::new(
                vec![0.0; hyp.epochs.len()],
                hyp.epochs.len() as f64 / hyp.duration_s(),
            );
            (placeholder, None)
        }
    };

    NightRecord {
        participant_id: format!("p{:04}", spec.participant),
        night_id: format!("n{:02}", spec.night),
        phase_id: spec.phase_id,
        respiration,
        eeg,
        hypnogram: Some(hyp),
        meds: spec.meds.clone(),
        ahi: Some(spec.ahi),
        age_years: spec.age_years,
        sex: spec.sex,
    }
}

fn gen_participant(
    cfg: &SynthConfig,
    index: usize,
    assignment: &Assignment,
    channels: Channels,
) -> Vec<NightRecord> {
    let n_nights = assignment.n_nights as usize;
    let n_phases = assignment.phases.len();
    (0..n_nights)
        .map(|night| {
            let phase_id = if n_phases == 1 {
                0
            } else {
                (night * n_phases / n_nights) as u32
            };
            let spec = NightSpec {
                participant: index,
                night,
                phase_id,
                meds: assignment.phases[phase_id as usize].clone(),
                age_years: assignment.age_years,
                sex: assignment.sex,
                ahi: assignment.ahi,
            };
            gen_night(cfg, &spec, channels)
        })
        .collect()
}

/// Generate the cohort one participant at a time, mapping each participant's
/// freshly generated nights through `f` before moving on. Raw signals for a
/// participant can be dropped inside `f`, which keeps peak memory at a few
/// participants instead of the whole cohort. Participants are processed in
/// parallel; results come back in participant order.
pub fn map_cohort_participants<T, F>(
    cfg: &SynthConfig,
    channels: Channels,
    f: F,
) -> Result<Vec<T>, SynthError>
where
    T: Send,
    F: Fn(Vec<NightRecord>) -> T + Sync,
{
    cfg.validate()?;
    let mut assign_rng = night_rng(cfg.seed, usize::MAX >> 25, 0, LANE_DEMOGRAPHICS);
    let assignments = build_assignments(cfg, &mut assign_rng);

    Ok(assignments
        .par_iter()
        .enumerate()
        .map(|(i, a)| f(gen_participant(cfg, i, a, channels)))
        .collect())
}

pub fn gen_cohort_channels(cfg: &SynthConfig, channels: Channels) -> Result<Cohort, SynthError> {
    cfg.validate()?;
    let mut assign_rng = night_rng(cfg.seed, usize::MAX >> 25, 0, LANE_DEMOGRAPHICS);
    let assignments = build_assignments(cfg, &mut assign_rng);

    let nights: Vec<NightRecord> = assignments
        .par_iter()
        .enumerate()
        .map(|(i, a)| gen_participant(cfg, i, a, channels))
        .flatten()
        .collect();

    let provenance = Provenance {
        source: "synth".to_string(),
        seed: Some(cfg.seed),
    };
    Ok(Cohort::new(nights, provenance)?)
}

/// Generate a full cohort (respiration, EEG, hypnogram, metadata) from the
/// recipe. Deterministic in `cfg.seed`: rng streams are split per night, so
/// parallel and serial runs produce identical cohorts.
pub fn gen_cohort(cfg: &SynthConfig) -> Result<Cohort, SynthError> {
    gen_cohort_channels(cfg, Channels::Full)
}
