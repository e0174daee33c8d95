//! Multitaper spectrogram estimation.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::dpss::dpss_tapers;
use super::{DspError, Signal, Spectrogram};

#[derive(Debug, Clone, Copy)]
pub struct MultitaperParams {
    pub window_s: f64,
    pub step_s: f64,
    pub fmax_hz: f64,
    pub n_tapers: usize,
    pub nw: f64,
}

impl Default for MultitaperParams {
    fn default() -> Self {
        MultitaperParams {
            window_s: 30.0,
            step_s: 30.0,
            fmax_hz: 32.0,
            n_tapers: 5,
            nw: 3.0,
        }
    }
}

/// Power spectrogram as the mean over DPSS-tapered periodograms.
///
/// Each window of `window_s` seconds is multiplied by each unit-norm taper,
/// transformed, and the squared magnitudes averaged across tapers. Bins run
/// from DC up to `fmax_hz` inclusive. With unit-norm tapers, white noise of
/// variance v gives expected power v in every bin.
pub fn multitaper_spectrogram(
    sig: &Signal,
    params: &MultitaperParams,
) -> Result<Spectrogram, DspError> {
    sig.validate()?;
    if sig.rate_hz < 2.0 * params.fmax_hz {
        return Err(DspError::RateBelowNyquist {
            rate_hz: sig.rate_hz,
            fmax_hz: params.fmax_hz,
        });
    }
    let win_n = (params.window_s * sig.rate_hz).round() as usize;
    let step_n = ((params.step_s * sig.rate_hz).round() as usize).max(1);
    if sig.len() < win_n || win_n < 2 {
        return Err(DspError::SignalTooShort {
            len: sig.len(),
            need: win_n.max(2),
        });
    }
    let n_windows = (sig.len() - win_n) / step_n + 1;

    let bin_hz = sig.rate_hz / win_n as f64;
    let cap_idx = (params.fmax_hz / bin_hz + 1e-9).floor() as usize;
    let cap_idx = cap_idx.min(win_n / 2);
    let n_bins = cap_idx + 1;
    let freqs_hz: Vec<f64> = (0..n_bins).map(|i| i as f64 * bin_hz).collect();

    let tapers = dpss_tapers(win_n, params.nw, params.n_tapers);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win_n);
    let mut buf = vec![Complex::new(0.0, 0.0); win_n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut power = vec![0.0f32; n_windows * n_bins];
    let mut acc = vec![0.0f64; n_bins];
    for w in 0..n_windows {
        let start = w * step_n;
        let chunk = &sig.samples[start..start + win_n];
        acc.iter_mut().for_each(|a| *a = 0.0);
        for taper in tapers.iter() {
            for ((b, &t), &x) in buf.iter_mut().zip(taper.iter()).zip(chunk.iter()) {
                *b = Complex::new(t * x as f64, 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (a, b) in acc.iter_mut().zip(buf.iter().take(n_bins)) {
                *a += b.norm_sqr();
            }
        }
        let inv_k = 1.0 / params.n_tapers as f64;
        for (dst, &a) in power[w * n_bins..(w + 1) * n_bins].iter_mut().zip(acc.iter()) {
            *dst = (a * inv_k) as f32;
        }
    }

    Ok(Spectrogram {
        power,
        n_windows,
        freqs_hz,
        window_s: params.window_s,
        step_s: params.step_s,
    })
}
