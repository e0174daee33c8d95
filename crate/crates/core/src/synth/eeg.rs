//! EEG synthesis as band-limited noise with per-stage band-weight templates.
//!
//! Each 30 s epoch is synthesized in the frequency domain: complex Gaussian
//! amplitudes fill the bins of each band, scaled so the band's total power
//! is exactly the squared template weight, then one inverse FFT produces the
//! epoch's samples. The synthesis grid matches the analysis grid of the
//! 30 s multitaper spectrogram (1/30 Hz bins), so planted band powers land
//! exactly where the measurement looks, with no filter leakage.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::{Hypnogram, Stage};
use crate::dsp::Signal;

use super::EffectProfile;

pub const EEG_RATE_HZ: f64 = 64.0;

/// Synthesis bands, shared with the analysis side so planted power lands
/// exactly where the extractors look. Synthesis fills the half-open
/// interval [lo, hi) on the bin grid, leaving DC and Nyquist empty.
pub use crate::features::BAND_EDGES_HZ as EEG_BANDS_HZ;

/// Broadband white-noise floor amplitude added on top of the bands.
pub const EEG_NOISE_FLOOR: f64 = 0.04;

/// Per-stage band amplitude weights (power is the square). Deep sleep is
/// dominated by slow oscillation and delta, REM is theta-rich, wake is
/// alpha- and beta-rich, and N2 carries the sigma (spindle-band) peak.
pub fn stage_band_template(stage: Stage) -> [f64; 7] {
    match stage {
        Stage::W => [0.35, 0.40, 0.50, 0.90, 0.40, 0.75, 0.50],
        Stage::N1 => [0.45, 0.65, 0.90, 0.55, 0.30, 0.30, 0.20],
        Stage::N2 => [0.85, 1.00, 0.60, 0.40, 0.80, 0.35, 0.18],
        Stage::N3 => [1.60, 1.80, 0.80, 0.40, 0.45, 0.25, 0.15],
        Stage::Rem => [0.35, 0.50, 1.00, 0.50, 0.30, 0.40, 0.28],
    }
}

/// 64 Hz EEG for the whole night. The profile multiplies the slow
/// oscillation and beta weights in sleep stages only.
pub fn gen_eeg(hyp: &Hypnogram, profile: &EffectProfile, rng: &mut impl Rng) -> Signal {
    let spe = (hyp.epoch_len_s * EEG_RATE_HZ).round() as usize;
    let half = spe / 2;
    let hz_per_bin = EEG_RATE_HZ / spe as f64;
    let bins: Vec<(usize, usize)> = EEG_BANDS_HZ
        .iter()
        .map(|&(lo, hi)| {
            let lo_b = ((lo / hz_per_bin).round() as usize).max(1);
            let hi_b = ((hi / hz_per_bin).round() as usize).min(half);
            (lo_b, hi_b)
        })
        .collect();

    let mut planner = FftPlanner::<f32>::new();
    let ifft = planner.plan_fft_inverse(spe);
    let mut spec = vec![Complex::<f32>::new(0.0, 0.0); spe];
    let mut scratch = vec![Complex::<f32>::new(0.0, 0.0); ifft.get_inplace_scratch_len()];

    let mut out = vec![0.0f32; hyp.epochs.len() * spe];
    let inv_n = 1.0f32 / spe as f32;
    let floor = EEG_NOISE_FLOOR as f32;

    for (e, &stage) in hyp.epochs.iter().enumerate() {
        let template = stage_band_template(stage);
        for c in spec.iter_mut() {
            *c = Complex::new(0.0, 0.0);
        }
        for (b, &(lo_b, hi_b)) in bins.iter().enumerate() {
            let mut g = template[b];
            if stage.is_sleep() {
                if b == 0 {
                    g *= profile.so_power_mult;
                }
                if b >= 5 {
                    g *= profile.beta_power_mult;
                }
            }
            let n_b = (hi_b - lo_b) as f64;
            // Bin amplitude so the band's expected time-domain power is g^2
            // after the unnormalized inverse FFT is divided by n.
            let sigma = (g * (spe as f64) * (1.0 / (4.0 * n_b)).sqrt()) as f32;
            for k in lo_b..hi_b {
                let a: f32 = StandardNormal.sample(rng);
                let v: f32 = StandardNormal.sample(rng);
                let x = Complex::new(a * sigma, v * sigma);
                spec[k] = x;
                spec[spe - k] = x.conj();
            }
        }
        ifft.process_with_scratch(&mut spec, &mut scratch);
        let seg = &mut out[e * spe..(e + 1) * spe];
        for (o, s) in seg.iter_mut().zip(spec.iter()) {
            let w: f32 = StandardNormal.sample(rng);
            *o = s.re * inv_n + floor * w;
        }
    }
    Signal::new(out, EEG_RATE_HZ)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{multitaper_spectrogram, MultitaperParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_hypnogram(stage: Stage, hours: f64) -> Hypnogram {
        Hypnogram::new(vec![stage; (hours * 120.0) as usize])
    }

    fn band_power_shares(sig: &Signal) -> [f64; 7] {
        let spg = multitaper_spectrogram(sig, &MultitaperParams::default()).unwrap();
        let mut shares = [0.0; 7];
        let all: Vec<usize> = (0..spg.n_windows).collect();
        for (b, &(lo, hi)) in EEG_BANDS_HZ.iter().enumerate() {
            let bins = spg.band_bins(lo, hi).len() as f64;
            shares[b] = spg.band_mean(lo, hi, &all) * bins;
        }
        let total: f64 = shares.iter().sum();
        for s in &mut shares {
            *s /= total;
        }
        shares
    }

    #[test]
    fn length_rate_and_determinism() {
        let hyp = uniform_hypnogram(Stage::N2, 0.5);
        let p = EffectProfile::identity();
        let a = gen_eeg(&hyp, &p, &mut ChaCha8Rng::seed_from_u64(3));
        let b = gen_eeg(&hyp, &p, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.samples.len(), (hyp.duration_s() * 64.0) as usize);
        assert_eq!(a.rate_hz, 64.0);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn n3_delta_power_dwarfs_beta() {
        let hyp = uniform_hypnogram(Stage::N3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sig = gen_eeg(&hyp, &EffectProfile::identity(), &mut rng);
        let shares = band_power_shares(&sig);
        let beta = shares[5] + shares[6];
        assert!(
            shares[1] > 10.0 * beta,
            "delta share {} vs beta share {beta}",
            shares[1]
        );
    }

    #[test]
    fn identity_band_profile_matches_templates() {
        for stage in Stage::ALL {
            let hyp = uniform_hypnogram(stage, 2.0);
            let mut rng = ChaCha8Rng::seed_from_u64(50 + stage.index() as u64);
            let sig = gen_eeg(&hyp, &EffectProfile::identity(), &mut rng);
            let measured = band_power_shares(&sig);

            let template = stage_band_template(stage);
            let total: f64 = template.iter().map(|g| g * g).sum();
            for b in 0..7 {
                let expected = template[b] * template[b] / total;
                let rel = (measured[b] - expected).abs() / expected;
                assert!(
                    rel < 0.10,
                    "stage {stage:?} band {b}: measured {:.4} expected {expected:.4} (rel {rel:.3})",
                    measured[b]
                );
            }
        }
    }

    #[test]
    fn beta_multiplier_scales_beta_power_quadratically() {
        let hyp = uniform_hypnogram(Stage::N2, 1.0);
        let mut p = EffectProfile::identity();
        p.beta_power_mult = 1.5;
        let control = gen_eeg(
            &hyp,
            &EffectProfile::identity(),
            &mut ChaCha8Rng::seed_from_u64(60),
        );
        let boosted = gen_eeg(&hyp, &p, &mut ChaCha8Rng::seed_from_u64(61));
        let params = MultitaperParams::default();
        let sc = multitaper_spectrogram(&control, &params).unwrap();
        let sb = multitaper_spectrogram(&boosted, &params).unwrap();
        let all_c: Vec<usize> = (0..sc.n_windows).collect();
        let all_b: Vec<usize> = (0..sb.n_windows).collect();
        let ratio = sb.band_mean(16.0, 32.0, &all_b) / sc.band_mean(16.0, 32.0, &all_c);
        assert!(
            (2.0..=2.5).contains(&ratio),
            "beta power ratio {ratio}, expected about 2.25"
        );
    }

    #[test]
    fn so_multiplier_leaves_wake_epochs_alone() {
        let hyp = uniform_hypnogram(Stage::W, 1.0);
        let mut p = EffectProfile::identity();
        p.so_power_mult = 1.5;
        let control = gen_eeg(
            &hyp,
            &EffectProfile::identity(),
            &mut ChaCha8Rng::seed_from_u64(70),
        );
        let boosted = gen_eeg(&hyp, &p, &mut ChaCha8Rng::seed_from_u64(71));
        let params = MultitaperParams::default();
        let sc = multitaper_spectrogram(&control, &params).unwrap();
        let sb = multitaper_spectrogram(&boosted, &params).unwrap();
        let all: Vec<usize> = (0..sc.n_windows).collect();
        let ratio = sb.band_mean(0.0, 1.0, &all) / sc.band_mean(0.0, 1.0, &all);
        assert!(
            (0.9..=1.1).contains(&ratio),
            "wake so power ratio {ratio}, expected about 1"
        );
    }
}
