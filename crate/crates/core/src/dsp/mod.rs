//! Signal conditioning and spectral estimation.
//!
//! Filtering, resampling, robust normalization, and multitaper spectrograms.
//! All operations are pure; nights can be processed in parallel with no
//! shared mutable state.

mod dpss;
mod filter;
mod resample;
mod spectrogram;

pub use dpss::dpss_tapers;
pub use filter::iir_filter;
pub use resample::resample;
pub use spectrogram::{multitaper_spectrogram, MultitaperParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("cutoff {cutoff_hz} Hz is at or above Nyquist ({nyquist_hz} Hz)")]
    CutoffAboveNyquist { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("signal contains non-finite samples")]
    NonFiniteInput,
    #[error("signal too short: {len} samples, need at least {need}")]
    SignalTooShort { len: usize, need: usize },
    #[error("invalid sample rate {0} Hz")]
    BadRate(f64),
    #[error("invalid filter spec: {0}")]
    BadFilterSpec(String),
    #[error("rescale factor must be positive, got {0}")]
    BadFactor(f64),
    #[error("sample rate {rate_hz} Hz below Nyquist requirement for fmax {fmax_hz} Hz")]
    RateBelowNyquist { rate_hz: f64, fmax_hz: f64 },
}

/// A uniformly sampled signal. Samples are stored in f32 (the on-disk
/// format); numeric work happens in f64 internally.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f32>,
    pub rate_hz: f64,
}

impl Signal {
    pub fn new(samples: Vec<f32>, rate_hz: f64) -> Self {
        Signal { samples, rate_hz }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(DspError::BadRate(self.rate_hz));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::NonFiniteInput);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Highpass,
    Bandpass,
}

/// Butterworth filter specification, applied zero-phase (forward-backward).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// One cutoff for highpass, two (low, high) for bandpass.
    pub band_hz: Vec<f64>,
    pub order: usize,
}

impl FilterSpec {
    pub fn highpass(cutoff_hz: f64, order: usize) -> Self {
        FilterSpec {
            kind: FilterKind::Highpass,
            band_hz: vec![cutoff_hz],
            order,
        }
    }

    pub fn bandpass(lo_hz: f64, hi_hz: f64, order: usize) -> Self {
        FilterSpec {
            kind: FilterKind::Bandpass,
            band_hz: vec![lo_hz, hi_hz],
            order,
        }
    }

    pub fn validate(&self, rate_hz: f64) -> Result<(), DspError> {
        if self.order < 1 {
            return Err(DspError::BadFilterSpec("order must be >= 1".into()));
        }
        let nyquist = rate_hz / 2.0;
        let expected = match self.kind {
            FilterKind::Highpass => 1,
            FilterKind::Bandpass => 2,
        };
        if self.band_hz.len() != expected {
            return Err(DspError::BadFilterSpec(format!(
                "{:?} needs {} cutoff(s), got {}",
                self.kind,
                expected,
                self.band_hz.len()
            )));
        }
        for &c in &self.band_hz {
            if !(c > 0.0 && c.is_finite()) {
                return Err(DspError::BadFilterSpec(format!("bad cutoff {c}")));
            }
            if c >= nyquist {
                return Err(DspError::CutoffAboveNyquist {
                    cutoff_hz: c,
                    nyquist_hz: nyquist,
                });
            }
        }
        if self.kind == FilterKind::Bandpass && self.band_hz[0] >= self.band_hz[1] {
            return Err(DspError::BadFilterSpec("bandpass low >= high".into()));
        }
        Ok(())
    }
}

/// Time-frequency power matrix from fixed-length sliding windows.
///
/// Rows are windows, columns are frequency bins (ascending, capped at the
/// analysis `fmax`). With the default 30 s window and step the rows align
/// 1:1 with 30 s hypnogram epochs.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// Row-major `[n_windows x n_bins]` nonnegative power.
    pub power: Vec<f32>,
    pub n_windows: usize,
    pub freqs_hz: Vec<f64>,
    pub window_s: f64,
    pub step_s: f64,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.freqs_hz.len()
    }

    pub fn window(&self, w: usize) -> &[f32] {
        let n = self.n_bins();
        &self.power[w * n..(w + 1) * n]
    }

    /// Indices of bins whose center lies in `[lo_hz, hi_hz)`.
    pub fn band_bins(&self, lo_hz: f64, hi_hz: f64) -> std::ops::Range<usize> {
        let start = self.freqs_hz.partition_point(|&f| f < lo_hz);
        let end = self.freqs_hz.partition_point(|&f| f < hi_hz);
        start..end
    }

    /// Mean power over a frequency band and a set of windows.
    pub fn band_mean(&self, lo_hz: f64, hi_hz: f64, windows: &[usize]) -> f64 {
        let bins = self.band_bins(lo_hz, hi_hz);
        if bins.is_empty() || windows.is_empty() {
            return 0.0;
        }
        let mut acc = 0.0f64;
        for &w in windows {
            for p in &self.window(w)[bins.clone()] {
                acc += *p as f64;
            }
        }
        acc / (bins.len() * windows.len()) as f64
    }

    /// Aggregates the bins into `n_out` equal-width bands over `[0, fmax)`,
    /// averaging power within each band. Used to build fixed-size
    /// reconstruction targets independent of the FFT resolution.
    pub fn rebin(&self, n_out: usize, fmax_hz: f64) -> Spectrogram {
        let nb = self.n_bins();
        let width = fmax_hz / n_out as f64;
        let mut assignment = vec![0usize; nb];
        for (i, &f) in self.freqs_hz.iter().enumerate() {
            assignment[i] = ((f / width).floor() as usize).min(n_out - 1);
        }
        let mut power = vec![0.0f32; self.n_windows * n_out];
        let mut counts = vec![0u32; n_out];
        for &a in &assignment {
            counts[a] += 1;
        }
        for w in 0..self.n_windows {
            let src = self.window(w);
            let dst = &mut power[w * n_out..(w + 1) * n_out];
            for (i, &a) in assignment.iter().enumerate() {
                dst[a] += src[i];
            }
            for (d, &c) in dst.iter_mut().zip(&counts) {
                if c > 0 {
                    *d /= c as f32;
                }
            }
        }
        let freqs_hz = (0..n_out).map(|i| (i as f64 + 0.5) * width).collect();
        Spectrogram {
            power,
            n_windows: self.n_windows,
            freqs_hz,
            window_s: self.window_s,
            step_s: self.step_s,
        }
    }
}

/// Robust normalization: median to 0, IQR/1.349 to 1, then clipped to ±5.
///
/// A constant signal maps to all zeros.
pub fn normalize(sig: &Signal) -> Signal {
    assert!(!sig.is_empty(), "normalize: empty signal");
    let mut sorted: Vec<f32> = sig.samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
    };
    let median = q(0.5);
    let iqr = q(0.75) - q(0.25);
    let scale = iqr / 1.349;
    let scale = if scale > 1e-12 { scale } else { 1.0 };
    let samples = sig
        .samples
        .iter()
        .map(|&s| (((s as f64 - median) / scale).clamp(-5.0, 5.0)) as f32)
        .collect();
    Signal::new(samples, sig.rate_hz)
}

/// Samplewise multiplication by a fixed per-dataset factor.
pub fn rescale_amplitude(sig: &Signal, factor: f64) -> Result<Signal, DspError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(DspError::BadFactor(factor));
    }
    Ok(Signal::new(
        sig.samples.iter().map(|&s| (s as f64 * factor) as f32).collect(),
        sig.rate_hz,
    ))
}
