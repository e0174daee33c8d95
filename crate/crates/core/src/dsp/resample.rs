//! Windowed-sinc sample rate conversion.

use super::{DspError, Signal};

/// Zeroth-order modified Bessel function of the first kind, by power
/// series. Converges quickly for the argument range a Kaiser window uses.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-16 {
            break;
        }
    }
    sum
}

/// Resamples to `to_hz` with a Kaiser-windowed sinc kernel.
///
/// The kernel cutoff sits at 0.45 of the lower of the two rates, which
/// anti-aliases downsampling and band-limits interpolation. Taps are
/// renormalized to unit sum at every output position, so constants pass
/// through exactly and edge positions keep unit gain despite kernel
/// truncation. Output length is chosen so the duration matches the input
/// within one output sample period.
pub fn resample(sig: &Signal, to_hz: f64) -> Result<Signal, DspError> {
    sig.validate()?;
    if !(to_hz > 0.0 && to_hz.is_finite()) {
        return Err(DspError::BadRate(to_hz));
    }
    if sig.rate_hz == to_hz {
        return Ok(sig.clone());
    }
    let from_hz = sig.rate_hz;
    let n_in = sig.len();
    if n_in == 0 {
        return Ok(Signal::new(Vec::new(), to_hz));
    }
    let n_out = ((n_in as f64) * to_hz / from_hz).round().max(1.0) as usize;

    // Cutoff as cycles per input sample; kernel reaches ten sinc zero
    // crossings each side.
    let fc = 0.45 * from_hz.min(to_hz) / from_hz;
    let half = (10.0 / (2.0 * fc)).ceil() as i64;
    let beta = 8.0;
    let i0_beta = bessel_i0(beta);
    let kernel = |u: f64| -> f64 {
        if u.abs() > half as f64 {
            return 0.0;
        }
        let sinc = if u.abs() < 1e-12 {
            1.0
        } else {
            let arg = std::f64::consts::PI * 2.0 * fc * u;
            arg.sin() / arg
        };
        let frac = u / half as f64;
        let window = bessel_i0(beta * (1.0 - frac * frac).max(0.0).sqrt()) / i0_beta;
        sinc * window
    };

    let step = from_hz / to_hz;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let pos = j as f64 * step;
        let lo = (pos.floor() as i64 - half).max(0);
        let hi = (pos.floor() as i64 + half + 1).min(n_in as i64 - 1);
        let mut acc = 0.0f64;
        let mut wsum = 0.0f64;
        for i in lo..=hi {
            let w = kernel(i as f64 - pos);
            acc += w * sig.samples[i as usize] as f64;
            wsum += w;
        }
        out.push(if wsum.abs() > 1e-12 {
            (acc / wsum) as f32
        } else {
            0.0
        });
    }
    Ok(Signal::new(out, to_hz))
}

#[cfg(test)]
mod tests {
    use super::super::Signal;
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq_hz: f64, rate_hz: f64, dur_s: f64) -> Signal {
        let n = (dur_s * rate_hz).round() as usize;
        let samples = (0..n)
            .map(|i| (2.0 * PI * freq_hz * i as f64 / rate_hz).sin() as f32)
            .collect();
        Signal::new(samples, rate_hz)
    }

    fn pearson(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len().min(b.len()) as f64;
        let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (&x, &y) in a.iter().zip(b.iter()) {
            num += (x as f64 - ma) * (y as f64 - mb);
            da += (x as f64 - ma).powi(2);
            db += (y as f64 - mb).powi(2);
        }
        num / (da * db).sqrt()
    }

    #[test]
    fn identity_when_rate_matches() {
        let sig = sine(2.0, 100.0, 5.0);
        let out = resample(&sig, 100.0).unwrap();
        assert_eq!(out.samples, sig.samples);
    }

    #[test]
    fn constant_passes_through_any_ratio() {
        for to in [10.0, 64.0, 37.0, 250.0] {
            let sig = Signal::new(vec![2.5; 1000], 100.0);
            let out = resample(&sig, to).unwrap();
            assert_eq!(out.rate_hz, to);
            for &y in &out.samples {
                assert!((y - 2.5).abs() < 1e-6, "to {to}: {y}");
            }
        }
    }

    #[test]
    fn downsample_matches_analytic_tone() {
        let sig = sine(2.0, 100.0, 20.0);
        let out = resample(&sig, 10.0).unwrap();
        let reference = sine(2.0, 10.0, 20.0);
        let r = pearson(&out.samples, &reference.samples);
        assert!(r > 0.999, "correlation {r}");
    }

    #[test]
    fn upsample_matches_analytic_tone() {
        let sig = sine(2.0, 10.0, 20.0);
        let out = resample(&sig, 64.0).unwrap();
        let reference = sine(2.0, 64.0, 20.0);
        let n = out.samples.len().min(reference.samples.len());
        let r = pearson(&out.samples[..n], &reference.samples[..n]);
        assert!(r > 0.999, "correlation {r}");
    }

    #[test]
    fn duration_preserved_within_one_period() {
        let sig = sine(1.0, 100.0, 7.3);
        let out = resample(&sig, 64.0).unwrap();
        assert!((out.duration_s() - sig.duration_s()).abs() <= 1.0 / 64.0);
    }

    #[test]
    fn downsample_suppresses_aliased_tone() {
        // 12 Hz is above the 5 Hz Nyquist of the target rate; after
        // resampling to 10 Hz almost nothing should remain.
        let sig = sine(12.0, 100.0, 20.0);
        let out = resample(&sig, 10.0).unwrap();
        let rms = (out.samples.iter().map(|&x| (x as f64).powi(2)).sum::<f64>()
            / out.samples.len() as f64)
            .sqrt();
        assert!(rms < 0.02, "alias rms {rms}");
    }

    #[test]
    fn linearity_on_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f32> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (0.7f32, -1.3f32);
        let combo: Vec<f32> = x.iter().zip(&y).map(|(&u, &v)| a * u + b * v).collect();
        let rx = resample(&Signal::new(x, 100.0), 64.0).unwrap();
        let ry = resample(&Signal::new(y, 100.0), 64.0).unwrap();
        let rc = resample(&Signal::new(combo, 100.0), 64.0).unwrap();
        for i in 0..rc.samples.len() {
            let expect = a * rx.samples[i] + b * ry.samples[i];
            let got = rc.samples[i];
            assert!(
                (got - expect).abs() <= 1e-6 * expect.abs().max(1.0),
                "sample {i}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn rejects_bad_target_rate() {
        let sig = sine(1.0, 100.0, 1.0);
        assert!(resample(&sig, 0.0).is_err());
        assert!(resample(&sig, -5.0).is_err());
        assert!(resample(&sig, f64::NAN).is_err());
    }
}
