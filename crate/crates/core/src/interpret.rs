//! Interpretability analyses over trained-model outputs: cohort differences
//! of reconstructed spectra, score-versus-REM-latency correlations,
//! early-sleep band power, latent-space projection, and longitudinal score
//! trajectories.
//!
//! Every operation is a pure function. Per-night extraction
//! ([`mean_spectrum`], [`early_sleep_power`]) is separated from cohort
//! aggregation so callers can stream nights, keep only the small per-night
//! values, and aggregate at the end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{Hypnogram, Stage};
use crate::dsp::Spectrogram;
use crate::nn::Mat;
use crate::stats::{pearson_r, StatsError, TestResult};

pub const SO_BAND_HZ: (f64, f64) = (0.0, 1.0);
pub const BETA_BAND_HZ: (f64, f64) = (16.0, 32.0);
pub const EARLY_SLEEP_MIN: f64 = 60.0;
pub const DEFAULT_SMOOTH_WINDOW_NIGHTS: usize = 14;

const MIN_COHORT_NIGHTS: usize = 10;
const BOOTSTRAP_RESAMPLES: usize = 1000;
const CI_LEVEL: f64 = 0.95;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("need at least {need} nights per cohort, got {medicated} medicated / {control} control")]
    CohortTooSmall {
        need: usize,
        medicated: usize,
        control: usize,
    },
    #[error("need at least {need} pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("no nights with {EARLY_SLEEP_MIN} min of NREM sleep before REM onset")]
    NoQualifyingNights,
    #[error("latents are degenerate: all rows equal")]
    DegenerateLatents,
    #[error("bad input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Time-mean power spectrum of a night: mean over windows, per bin.
pub fn mean_spectrum(spg: &Spectrogram) -> Vec<f64> {
    let bins = spg.n_bins();
    let mut out = vec![0.0f64; bins];
    for w in 0..spg.n_windows {
        for (acc, &p) in out.iter_mut().zip(spg.window(w)) {
            *acc += f64::from(p);
        }
    }
    let inv = 1.0 / spg.n_windows as f64;
    for v in &mut out {
        *v *= inv;
    }
    out
}

/// Time-mean of a row-per-token matrix (decoder reconstructions), per
/// column.
pub fn mean_spectrum_rows(rows: &Mat<f32>) -> Vec<f64> {
    let mut out = vec![0.0f64; rows.cols];
    for r in 0..rows.rows {
        for (acc, &p) in out.iter_mut().zip(rows.row(r)) {
            *acc += f64::from(p);
        }
    }
    let inv = 1.0 / rows.rows as f64;
    for v in &mut out {
        *v *= inv;
    }
    out
}

/// One cohort's mean spectrum with per-bin bootstrap confidence bounds.
#[derive(Debug, Clone, Serialize)]
pub struct CohortBand {
    pub mean: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub n_nights: usize,
}

/// Normalized per-bin difference between two cohorts' mean spectra.
/// `diff` is scaled so its largest absolute value is 1; `scale` is the
/// divisor, so `diff[j] * scale` recovers the raw difference.
#[derive(Debug, Clone, Serialize)]
pub struct SpectraDiff {
    pub freqs_hz: Vec<f64>,
    pub diff: Vec<f64>,
    pub scale: f64,
    pub medicated: CohortBand,
    pub control: CohortBand,
}

/// Cohort contrast of per-night mean spectra: cohort means are taken over
/// nights, the medicated-minus-control difference is normalized by its
/// largest absolute value, and each cohort's mean gets per-bin bootstrap
/// confidence bounds. Needs at least 10 nights per cohort.
pub fn spectra_cohort_diff(
    spectra: &[Vec<f64>],
    labels: &[bool],
    freqs_hz: &[f64],
    seed: u64,
) -> Result<SpectraDiff, InterpretError> {
    if spectra.len() != labels.len() {
        return Err(InterpretError::BadInput(format!(
            "{} spectra but {} labels",
            spectra.len(),
            labels.len()
        )));
    }
    let bins = freqs_hz.len();
    if bins == 0 {
        return Err(InterpretError::BadInput("no frequency bins".to_string()));
    }
    if freqs_hz.windows(2).any(|w| w[0] >= w[1]) {
        return Err(InterpretError::BadInput(
            "frequencies must be strictly ascending".to_string(),
        ));
    }
    if freqs_hz.last().copied().unwrap_or(0.0) > 32.0 {
        return Err(InterpretError::BadInput(format!(
            "frequencies must stay at or below 32 Hz, got {}",
            freqs_hz.last().unwrap()
        )));
    }
    for (i, s) in spectra.iter().enumerate() {
        if s.len() != bins {
            return Err(InterpretError::BadInput(format!(
                "spectrum {i} has {} bins, expected {bins}",
                s.len()
            )));
        }
    }
    let medicated: Vec<&Vec<f64>> = spectra
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| s)
        .collect();
    let control: Vec<&Vec<f64>> = spectra
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| s)
        .collect();
    if medicated.len() < MIN_COHORT_NIGHTS || control.len() < MIN_COHORT_NIGHTS {
        return Err(InterpretError::CohortTooSmall {
            need: MIN_COHORT_NIGHTS,
            medicated: medicated.len(),
            control: control.len(),
        });
    }

    let med_band = cohort_band(&medicated, bins, seed);
    let ctl_band = cohort_band(&control, bins, seed.wrapping_add(1));
    let mut diff: Vec<f64> = med_band
        .mean
        .iter()
        .zip(&ctl_band.mean)
        .map(|(m, c)| m - c)
        .collect();
    let scale = diff.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    if scale > 0.0 {
        for d in &mut diff {
            *d /= scale;
        }
    }
    Ok(SpectraDiff {
        freqs_hz: freqs_hz.to_vec(),
        diff,
        scale,
        medicated: med_band,
        control: ctl_band,
    })
}

fn cohort_band(spectra: &[&Vec<f64>], bins: usize, seed: u64) -> CohortBand {
    let n = spectra.len();
    let mut mean = vec![0.0f64; bins];
    for s in spectra {
        for (acc, v) in mean.iter_mut().zip(s.iter()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }

    let mut resampled = vec![0.0f64; BOOTSTRAP_RESAMPLES * bins];
    for iter in 0..BOOTSTRAP_RESAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(iter as u64 + 1);
        let row = &mut resampled[iter * bins..(iter + 1) * bins];
        for _ in 0..n {
            let s = spectra[rng.gen_range(0..n)];
            for (acc, v) in row.iter_mut().zip(s.iter()) {
                *acc += v;
            }
        }
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    let mut ci_lo = vec![0.0f64; bins];
    let mut ci_hi = vec![0.0f64; bins];
    let mut column = vec![0.0f64; BOOTSTRAP_RESAMPLES];
    for j in 0..bins {
        for (i, v) in column.iter_mut().enumerate() {
            *v = resampled[i * bins + j];
        }
        let (lo, hi) = percentile_interval(&mut column, CI_LEVEL);
        ci_lo[j] = lo;
        ci_hi[j] = hi;
    }
    CohortBand {
        mean,
        ci_lo,
        ci_hi,
        n_nights: n,
    }
}

fn percentile_interval(values: &mut [f64], level: f64) -> (f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let pos = p * (values.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        values[lo] * (1.0 - frac) + values[hi] * frac
    };
    let tail = (1.0 - level) / 2.0;
    (q(tail), q(1.0 - tail))
}

/// Pearson correlation between aggregated scores and REM latencies over the
/// rows selected by `include`.
pub fn score_rem_correlation(
    scores: &[f64],
    rem_latency_min: &[f64],
    include: &[bool],
) -> Result<TestResult, InterpretError> {
    if scores.len() != rem_latency_min.len() || scores.len() != include.len() {
        return Err(InterpretError::BadInput(format!(
            "got {} scores, {} latencies, {} filter flags",
            scores.len(),
            rem_latency_min.len(),
            include.len()
        )));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..scores.len() {
        if include[i] {
            x.push(scores[i]);
            y.push(rem_latency_min[i]);
        }
    }
    if x.len() < 3 {
        return Err(InterpretError::TooFewPairs {
            need: 3,
            got: x.len(),
        });
    }
    Ok(pearson_r(&x, &y)?)
}

/// Per-night early-sleep band power: mean slow-oscillation and beta power
/// over the first hour of NREM epochs preceding REM onset, with the night's
/// REM latency.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EarlySleepPower {
    pub so: f64,
    pub beta: f64,
    pub rem_latency_min: f64,
}

/// Extract early-sleep band power for one night. Qualifying nights have a
/// REM episode preceded by at least an hour of NREM sleep; the window is
/// the first hour's worth of NREM epochs before the first REM epoch,
/// skipping interleaved wake. Returns `None` for nights that do not
/// qualify.
pub fn early_sleep_power(
    spg: &Spectrogram,
    hyp: &Hypnogram,
) -> Result<Option<EarlySleepPower>, InterpretError> {
    if spg.n_windows != hyp.epochs.len() {
        return Err(InterpretError::BadInput(format!(
            "spectrogram has {} windows, hypnogram has {} epochs",
            spg.n_windows,
            hyp.epochs.len()
        )));
    }
    let onset = match hyp.epochs.iter().position(|s| s.is_sleep()) {
        Some(i) => i,
        None => return Ok(None),
    };
    let first_rem = match hyp.epochs.iter().position(|&s| s == Stage::Rem) {
        Some(i) => i,
        None => return Ok(None),
    };
    let need = (EARLY_SLEEP_MIN * 60.0 / hyp.epoch_len_s).round() as usize;
    let nrem: Vec<usize> = (0..first_rem)
        .filter(|&i| hyp.epochs[i].is_sleep() && hyp.epochs[i] != Stage::Rem)
        .take(need)
        .collect();
    if nrem.len() < need {
        return Ok(None);
    }
    let so = spg.band_mean(SO_BAND_HZ.0, SO_BAND_HZ.1, &nrem);
    let beta = spg.band_mean(BETA_BAND_HZ.0, BETA_BAND_HZ.1, &nrem);
    let rem_latency_min = (first_rem - onset) as f64 * hyp.epoch_len_s / 60.0;
    Ok(Some(EarlySleepPower {
        so,
        beta,
        rem_latency_min,
    }))
}

/// Correlations of early-sleep band power against REM latency, one test per
/// band plus their sum.
#[derive(Debug, Clone, Serialize)]
pub struct EarlySleepCorrelation {
    pub so: TestResult,
    pub beta: TestResult,
    pub combined: TestResult,
    pub n_qualifying: usize,
    pub n_skipped: usize,
}

/// Aggregate per-night early-sleep values (`None` marks a non-qualifying
/// night) into the three power-versus-latency correlations.
pub fn early_sleep_correlation(
    per_night: &[Option<EarlySleepPower>],
) -> Result<EarlySleepCorrelation, InterpretError> {
    let qualifying: Vec<EarlySleepPower> = per_night.iter().flatten().copied().collect();
    let n_skipped = per_night.len() - qualifying.len();
    if qualifying.is_empty() {
        return Err(InterpretError::NoQualifyingNights);
    }
    if qualifying.len() < 3 {
        return Err(InterpretError::TooFewPairs {
            need: 3,
            got: qualifying.len(),
        });
    }
    let latency: Vec<f64> = qualifying.iter().map(|q| q.rem_latency_min).collect();
    let so: Vec<f64> = qualifying.iter().map(|q| q.so).collect();
    let beta: Vec<f64> = qualifying.iter().map(|q| q.beta).collect();
    let combined: Vec<f64> = qualifying.iter().map(|q| q.so + q.beta).collect();
    Ok(EarlySleepCorrelation {
        so: pearson_r(&so, &latency)?,
        beta: pearson_r(&beta, &latency)?,
        combined: pearson_r(&combined, &latency)?,
        n_qualifying: qualifying.len(),
        n_skipped,
    })
}

/// One-call form of extraction plus aggregation for an in-memory cohort.
pub fn early_sleep_power_vs_rem(
    nights: &[(&Spectrogram, &Hypnogram)],
) -> Result<EarlySleepCorrelation, InterpretError> {
    let per_night: Vec<Option<EarlySleepPower>> = nights
        .iter()
        .map(|(spg, hyp)| early_sleep_power(spg, hyp))
        .collect::<Result<_, _>>()?;
    early_sleep_correlation(&per_night)
}

/// Two-dimensional projection of per-night latent vectors, with the
/// fraction of variance each axis explains.
#[derive(Debug, Clone, Serialize)]
pub struct LatentProjection {
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
}

/// Project latent vectors onto their top two principal components.
/// Deterministic by construction (unlike t-SNE): the axes are eigenvectors
/// of the covariance matrix, sign-fixed so each axis's largest-magnitude
/// loading is positive.
pub fn latent_projection(latents: &[Vec<f64>]) -> Result<LatentProjection, InterpretError> {
    let n = latents.len();
    if n < 3 {
        return Err(InterpretError::BadInput(format!(
            "need at least 3 latents, got {n}"
        )));
    }
    let d = latents[0].len();
    if d < 2 {
        return Err(InterpretError::BadInput(format!(
            "latent dimension must be at least 2, got {d}"
        )));
    }
    if latents.iter().any(|l| l.len() != d) {
        return Err(InterpretError::BadInput(
            "latents have inconsistent dimensions".to_string(),
        ));
    }

    let mut mean = vec![0.0f64; d];
    for l in latents {
        for (m, v) in mean.iter_mut().zip(l) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = latents
        .iter()
        .map(|l| l.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let mut cov = vec![0.0f64; d * d];
    for row in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if total_var <= 1e-18 {
        return Err(InterpretError::DegenerateLatents);
    }

    let (eigvals, eigvecs) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());

    let mut axes = [vec![0.0f64; d], vec![0.0f64; d]];
    let mut explained = [0.0f64; 2];
    for (a, &col) in order.iter().take(2).enumerate() {
        for k in 0..d {
            axes[a][k] = eigvecs[k * d + col];
        }
        let anchor = (0..d).max_by(|&x, &y| axes[a][x].abs().partial_cmp(&axes[a][y].abs()).unwrap());
        if let Some(k) = anchor {
            if axes[a][k] < 0.0 {
                for v in &mut axes[a] {
                    *v = -*v;
                }
            }
        }
        explained[a] = eigvals[col].max(0.0) / total_var;
    }

    let coords = centered
        .iter()
        .map(|row| {
            [
                row.iter().zip(&axes[0]).map(|(r, a)| r * a).sum(),
                row.iter().zip(&axes[1]).map(|(r, a)| r * a).sum(),
            ]
        })
        .collect();
    Ok(LatentProjection { coords, explained })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix, returning
/// eigenvalues and column-major eigenvectors.
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p * d + q] * a[p * d + q])
            .sum();
        if off <= 1e-26 * norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (eigvals, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub date_index: i64,
    pub z: f64,
    pub smoothed: f64,
}

/// A participant's nightly scores in date order with their smoothed
/// counterpart.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub window_nights: usize,
}

/// Centered moving average of nightly scores: each night is smoothed over
/// the nights whose date lies within half the window on either side, so
/// recording gaps shrink the sample rather than break it. Each mean is
/// clamped into the raw series' range, which rounding could otherwise
/// exceed by an ulp.
pub fn longitudinal_smooth(
    nights: &[(i64, f64)],
    window_nights: usize,
) -> Result<Trajectory, InterpretError> {
    if nights.is_empty() {
        return Err(InterpretError::BadInput("no nights to smooth".to_string()));
    }
    if window_nights == 0 {
        return Err(InterpretError::BadInput(
            "smoothing window must be at least 1 night".to_string(),
        ));
    }
    if nights.iter().any(|(_, z)| !z.is_finite()) {
        return Err(InterpretError::BadInput(
            "scores must be finite".to_string(),
        ));
    }
    let mut sorted: Vec<(i64, f64)> = nights.to_vec();
    sorted.sort_by_key(|(d, _)| *d);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(InterpretError::BadInput(
            "duplicate date indices".to_string(),
        ));
    }
    let half = (window_nights / 2) as i64;
    let lo = sorted.iter().map(|(_, z)| *z).fold(f64::INFINITY, f64::min);
    let hi = sorted.iter().map(|(_, z)| *z).fold(f64::NEG_INFINITY, f64::max);
    let points = sorted
        .iter()
        .map(|&(date, z)| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for &(other, oz) in &sorted {
                if (other - date).abs() <= half {
                    sum += oz;
                    count += 1;
                }
            }
            TrajectoryPoint {
                date_index: date,
                z,
                smoothed: (sum / count as f64).clamp(lo, hi),
            }
        })
        .collect();
    Ok(Trajectory {
        points,
        window_nights,
    })
}
