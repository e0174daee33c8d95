//! Breath-by-breath respiration synthesis: a phase-continuous oscillator
//! whose per-breath interval and amplitude statistics depend on the current
//! sleep stage, with an optional stage-independent AR(1) wander of the log
//! interval that models a medication's effect on breathing regularity.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Hypnogram, Stage};
use crate::dsp::Signal;

use super::EffectProfile;

pub const RESP_RATE_HZ: f64 = 10.0;

/// Per-stage breathing statistics: mean rate (breaths/min), log-interval
/// spread, mean amplitude, log-amplitude spread, movement-burst probability.
struct StageBreathing {
    rate_bpm: f64,
    interval_cv: f64,
    amplitude: f64,
    amplitude_cv: f64,
    burst_p: f64,
}

fn stage_breathing(stage: Stage) -> StageBreathing {
    match stage {
        Stage::W => StageBreathing {
            rate_bpm: 16.5,
            interval_cv: 0.13,
            amplitude: 0.95,
            amplitude_cv: 0.20,
            burst_p: 0.06,
        },
        Stage::N1 => StageBreathing {
            rate_bpm: 15.0,
            interval_cv: 0.08,
            amplitude: 1.0,
            amplitude_cv: 0.08,
            burst_p: 0.0,
        },
        Stage::N2 => StageBreathing {
            rate_bpm: 14.0,
            interval_cv: 0.06,
            amplitude: 1.0,
            amplitude_cv: 0.06,
            burst_p: 0.0,
        },
        Stage::N3 => StageBreathing {
            rate_bpm: 13.0,
            interval_cv: 0.03,
            amplitude: 1.05,
            amplitude_cv: 0.03,
            burst_p: 0.0,
        },
        Stage::Rem => StageBreathing {
            rate_bpm: 15.5,
            interval_cv: 0.16,
            amplitude: 0.85,
            amplitude_cv: 0.15,
            burst_p: 0.0,
        },
    }
}

const TEXTURE_AR: f64 = 0.8;
const TEXTURE_NOISE_SD: f64 = 0.6;
/// Log-interval contribution per unit of texture shift at unit AR state.
const TEXTURE_GAIN: f64 = 0.05;

struct Breath {
    interval_s: f64,
    amplitude: f64,
}

fn draw_breath(
    stage: Stage,
    texture_shift: f64,
    ar_state: &mut f64,
    rng: &mut impl Rng,
) -> Breath {
    let p = stage_breathing(stage);
    let z_int: f64 = StandardNormal.sample(rng);
    let z_amp: f64 = StandardNormal.sample(rng);
    let z_ar: f64 = StandardNormal.sample(rng);
    *ar_state = TEXTURE_AR * *ar_state + TEXTURE_NOISE_SD * z_ar;

    let log_interval =
        (60.0 / p.rate_bpm).ln() + p.interval_cv * z_int + TEXTURE_GAIN * texture_shift * *ar_state;
    let mut amplitude = p.amplitude * (p.amplitude_cv * z_amp).exp();
    if p.burst_p > 0.0 && rng.gen::<f64>() < p.burst_p {
        amplitude *= 3.0;
    }
    Breath {
        interval_s: log_interval.exp().clamp(1.5, 8.0),
        amplitude: amplitude.clamp(0.1, 5.0),
    }
}

/// 10 Hz respiration for the whole night, exactly 300 samples per epoch.
pub fn gen_respiration(hyp: &Hypnogram, profile: &EffectProfile, rng: &mut impl Rng) -> Signal {
    let samples_per_epoch = (hyp.epoch_len_s * RESP_RATE_HZ).round() as usize;
    let n = hyp.epochs.len() * samples_per_epoch;
    let dt = 1.0 / RESP_RATE_HZ;
    let shift = profile.resp_texture_shift;

    let mut out = vec![0.0f32; n];
    let mut ar_state = 0.0f64;
    let mut phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut breath = draw_breath(hyp.epochs[0], shift, &mut ar_state, rng);
    for (i, sample) in out.iter_mut().enumerate() {
        *sample = (breath.amplitude * phase.sin()) as f32;
        phase += std::f64::consts::TAU * dt / breath.interval_s;
        if phase >= std::f64::consts::TAU {
            phase -= std::f64::consts::TAU;
            let stage = hyp.epochs[(i / samples_per_epoch).min(hyp.epochs.len() - 1)];
            breath = draw_breath(stage, shift, &mut ar_state, rng);
        }
    }
    Signal::new(out, RESP_RATE_HZ)
}

/// Breath intervals recovered from upward zero crossings, in seconds.
/// This is the measurement-side estimate used to verify planted texture.
pub fn breath_intervals(sig: &Signal) -> Vec<f64> {
    let dt = 1.0 / sig.rate_hz;
    let mut crossings = Vec::new();
    for i in 1..sig.samples.len() {
        let (a, b) = (sig.samples[i - 1], sig.samples[i]);
        if a <= 0.0 && b > 0.0 {
            let frac = if b > a { -a / (b - a) } else { 0.0 };
            crossings.push((i as f64 - 1.0 + frac as f64) * dt);
        }
    }
    crossings.windows(2).map(|w| w[1] - w[0]).collect()
}

pub fn interval_cv(intervals: &[f64]) -> f64 {
    let n = intervals.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = intervals.iter().sum::<f64>() / n;
    let var = intervals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean
}

pub fn lag1_autocorr(intervals: &[f64]) -> f64 {
    let n = intervals.len();
    if n < 3 {
        return 0.0;
    }
    let mean = intervals.iter().sum::<f64>() / n as f64;
    let var: f64 = intervals.iter().map(|x| (x - mean).powi(2)).sum();
    if var <= 0.0 {
        return 0.0;
    }
    let cov: f64 = intervals
        .windows(2)
        .map(|w| (w[0] - mean) * (w[1] - mean))
        .sum();
    cov / var
}
