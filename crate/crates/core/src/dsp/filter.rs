//! Butterworth IIR filters applied forward-backward for zero phase.

use super::{DspError, FilterKind, FilterSpec, Signal};

/// One second-order section in direct form II transposed. First-order
/// sections (odd overall order) set `b2 = a2 = 0`.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Steady-state filter state for a unit step input, so a constant
    /// signal produces its steady output from the first sample.
    fn step_state(&self) -> (f64, f64) {
        let g = self.dc_gain();
        let s2 = self.b2 - self.a2 * g;
        let s1 = self.b1 + self.b2 - (self.a1 + self.a2) * g;
        (s1, s2)
    }

    fn run(&self, buf: &mut [f64], init_scale: f64) {
        let (s1u, s2u) = self.step_state();
        let mut s1 = s1u * init_scale;
        let mut s2 = s2u * init_scale;
        for x in buf.iter_mut() {
            let xin = *x;
            let y = self.b0 * xin + s1;
            s1 = self.b1 * xin - self.a1 * y + s2;
            s2 = self.b2 * xin - self.a2 * y;
            *x = y;
        }
    }
}

/// Digital Butterworth sections via the bilinear transform. Lowpass and
/// highpass of equal order and cutoff share pole positions; only the zeros
/// (z = -1 vs z = +1) and the gain normalization point differ.
fn butter_sections(order: usize, cutoff_hz: f64, rate_hz: f64, highpass: bool) -> Vec<Biquad> {
    use std::f64::consts::{FRAC_PI_2, PI};
    let warped = (PI * cutoff_hz / rate_hz).tan();
    let mut sections = Vec::with_capacity(order / 2 + 1);
    for k in 0..order / 2 {
        let phi = FRAC_PI_2 + PI * (2.0 * k as f64 + 1.0) / (2.0 * order as f64);
        let sr = warped * phi.cos();
        let si = warped * phi.sin();
        let s_abs2 = sr * sr + si * si;
        let denom = (1.0 - sr) * (1.0 - sr) + si * si;
        let z_re = (1.0 - s_abs2) / denom;
        let z_abs2 = ((1.0 + sr) * (1.0 + sr) + si * si) / denom;
        let a1 = -2.0 * z_re;
        let a2 = z_abs2;
        let (sign, g) = if highpass {
            (-1.0, (1.0 - a1 + a2) / 4.0)
        } else {
            (1.0, (1.0 + a1 + a2) / 4.0)
        };
        sections.push(Biquad {
            b0: g,
            b1: sign * 2.0 * g,
            b2: g,
            a1,
            a2,
        });
    }
    if order % 2 == 1 {
        let z_pole = (1.0 - warped) / (1.0 + warped);
        let a1 = -z_pole;
        let (sign, g) = if highpass {
            (-1.0, (1.0 - a1) / 2.0)
        } else {
            (1.0, (1.0 + a1) / 2.0)
        };
        sections.push(Biquad {
            b0: g,
            b1: sign * g,
            b2: 0.0,
            a1,
            a2: 0.0,
        });
    }
    sections
}

/// Zero-phase Butterworth filtering.
///
/// The signal is extended at both ends by odd reflection (three time
/// constants of the slowest cutoff), filtered through the section cascade
/// forward and backward with step-matched initial states, and trimmed back
/// to its original length. Magnitude response is the square of a single
/// pass; phase delay is zero.
pub fn iir_filter(sig: &Signal, spec: &FilterSpec) -> Result<Signal, DspError> {
    sig.validate()?;
    spec.validate(sig.rate_hz)?;
    let n = sig.len();
    if n < 2 {
        return Err(DspError::SignalTooShort { len: n, need: 2 });
    }
    let sections = match spec.kind {
        FilterKind::Highpass => butter_sections(spec.order, spec.band_hz[0], sig.rate_hz, true),
        FilterKind::Bandpass => {
            let mut s = butter_sections(spec.order, spec.band_hz[0], sig.rate_hz, true);
            s.extend(butter_sections(spec.order, spec.band_hz[1], sig.rate_hz, false));
            s
        }
    };
    let min_cut = spec.band_hz.iter().cloned().fold(f64::INFINITY, f64::min);
    let pad = ((3.0 * sig.rate_hz / min_cut).ceil() as usize).max(12).min(n - 1);

    let mut ext = Vec::with_capacity(n + 2 * pad);
    let first = sig.samples[0] as f64;
    let last = sig.samples[n - 1] as f64;
    for i in 0..pad {
        ext.push(2.0 * first - sig.samples[pad - i] as f64);
    }
    ext.extend(sig.samples.iter().map(|&s| s as f64));
    for i in 0..pad {
        ext.push(2.0 * last - sig.samples[n - 2 - i] as f64);
    }

    let cascade = |buf: &mut [f64]| {
        let mut scale = buf[0];
        for sec in &sections {
            sec.run(buf, scale);
            scale *= sec.dc_gain();
        }
    };
    cascade(&mut ext);
    ext.reverse();
    cascade(&mut ext);
    ext.reverse();

    let samples = ext[pad..pad + n].iter().map(|&x| x as f32).collect();
    Ok(Signal::new(samples, sig.rate_hz))
}
