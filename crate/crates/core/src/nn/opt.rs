//! AdamW with decoupled weight decay and a warmup-cosine learning-rate
//! schedule.
//!
//! The step function only touches parameters inside the given trainable
//! ranges, so frozen groups (the encoder during classifier training) stay
//! bit-identical, untouched even by weight decay.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::math::{sc, Scalar};
use super::weights::ModelWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub lr_base: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr_base: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, laid out like the weight buffer.
#[derive(Debug, Clone)]
pub struct OptimizerState<E> {
    pub step: usize,
    pub m: Vec<E>,
    pub v: Vec<E>,
}

impl<E: Scalar> OptimizerState<E> {
    pub fn new(n_params: usize) -> Self {
        OptimizerState {
            step: 0,
            m: vec![E::ZERO; n_params],
            v: vec![E::ZERO; n_params],
        }
    }
}

/// One AdamW update at learning rate `lr`: decoupled decay
/// `w *= 1 - lr * weight_decay`, then the bias-corrected Adam step.
pub fn adamw_step<E: Scalar>(
    w: &mut ModelWeights<E>,
    grads: &[E],
    state: &mut OptimizerState<E>,
    hyper: &AdamHyper,
    lr: f64,
    trainable: &[Range<usize>],
) {
    assert_eq!(grads.len(), w.data.len());
    assert_eq!(state.m.len(), w.data.len());
    assert_eq!(state.v.len(), w.data.len());
    state.step += 1;
    let t = state.step as i32;
    let b1 = sc::<E>(hyper.beta1);
    let b2 = sc::<E>(hyper.beta2);
    let one_m_b1 = sc::<E>(1.0 - hyper.beta1);
    let one_m_b2 = sc::<E>(1.0 - hyper.beta2);
    let c1 = sc::<E>(1.0 / (1.0 - hyper.beta1.powi(t)));
    let c2 = sc::<E>(1.0 / (1.0 - hyper.beta2.powi(t)));
    let lr_e = sc::<E>(lr);
    let decay = sc::<E>(1.0 - lr * hyper.weight_decay);
    let eps = sc::<E>(hyper.eps);
    for r in trainable {
        for i in r.clone() {
            let g = grads[i];
            w.data[i] *= decay;
            state.m[i] = b1 * state.m[i] + one_m_b1 * g;
            state.v[i] = b2 * state.v[i] + one_m_b2 * g * g;
            let mhat = state.m[i] * c1;
            let vhat = state.v[i] * c2;
            w.data[i] -= lr_e * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Linear warmup from zero over `warmup_steps`, then cosine decay to zero
/// at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, lr_base: f64) -> f64 {
    assert!(warmup_steps < total_steps, "warmup must end before the run");
    if step < warmup_steps {
        return lr_base * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    lr_base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::super::weights::Group;
    use super::super::ModelConfig;
    use super::*;

    fn full_range(w: &ModelWeights<f64>) -> Vec<Range<usize>> {
        vec![0..w.n_params()]
    }

    #[test]
    fn zero_gradients_apply_pure_decay() {
        let cfg = ModelConfig::tiny();
        let mut w = ModelWeights::<f64>::init(&cfg, 1);
        let before = w.data.clone();
        let grads = vec![0.0; w.n_params()];
        let mut state = OptimizerState::new(w.n_params());
        let hyper = AdamHyper::default();
        let lr = 1e-3;
        let ranges = full_range(&w);
        adamw_step(&mut w, &grads, &mut state, &hyper, lr, &ranges);
        let factor = 1.0 - lr * hyper.weight_decay;
        for (after, before) in w.data.iter().zip(&before) {
            assert_eq!(*after, before * factor);
        }
    }

    #[test]
    fn first_step_moves_against_the_gradient_sign() {
        let cfg = ModelConfig::tiny();
        let mut w = ModelWeights::<f64>::init(&cfg, 2);
        let before = w.data.clone();
        let mut grads = vec![0.0; w.n_params()];
        for (i, g) in grads.iter_mut().enumerate() {
            *g = if i % 2 == 0 { 0.3 } else { -1.7 };
        }
        let mut state = OptimizerState::new(w.n_params());
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let lr = 1e-3;
        let ranges = full_range(&w);
        adamw_step(&mut w, &grads, &mut state, &hyper, lr, &ranges);
        for i in 0..w.n_params() {
            let expect = before[i] - lr * grads[i] / (grads[i].abs() + hyper.eps);
            assert!(
                (w.data[i] - expect).abs() < 1e-12,
                "param {i}: {} vs {}",
                w.data[i],
                expect
            );
        }
    }

    #[test]
    fn frozen_ranges_are_untouched_even_by_decay() {
        let cfg = ModelConfig::tiny();
        let mut w = ModelWeights::<f64>::init(&cfg, 3);
        let before = w.data.clone();
        let mut grads = vec![0.0; w.n_params()];
        for (i, g) in grads.iter_mut().enumerate() {
            *g = (i % 7) as f64 - 3.0;
        }
        let mut state = OptimizerState::new(w.n_params());
        let cls = w.layout().group_range(Group::Classifier);
        let enc = w.layout().group_range(Group::Encoder);
        let dec = w.layout().group_range(Group::Decoder);
        let hyper = AdamHyper::default();
        for _ in 0..5 {
            adamw_step(&mut w, &grads, &mut state, &hyper, 1e-3, &[cls.clone()]);
        }
        assert_eq!(w.data[enc.clone()], before[enc]);
        assert_eq!(w.data[dec.clone()], before[dec]);
        assert_ne!(w.data[cls.clone()], before[cls]);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let cfg = ModelConfig::tiny();
        let run = || {
            let mut w = ModelWeights::<f32>::init(&cfg, 4);
            let mut grads = vec![0.0f32; w.n_params()];
            for (i, g) in grads.iter_mut().enumerate() {
                *g = ((i * 2654435761) % 1000) as f32 / 500.0 - 1.0;
            }
            let mut state = OptimizerState::new(w.n_params());
            let hyper = AdamHyper::default();
            let ranges = [0..w.n_params()];
            for step in 0..20 {
                let lr = lr_schedule(step, 20, 2, hyper.lr_base);
                adamw_step(&mut w, &grads, &mut state, &hyper, lr, &ranges);
            }
            w
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_hits_the_three_landmarks() {
        let lr_base = 3e-4;
        let total = 1000;
        let warmup = 100;
        assert_eq!(lr_schedule(0, total, warmup, lr_base), 0.0);
        assert!((lr_schedule(warmup, total, warmup, lr_base) - lr_base).abs() < 1e-15);
        let mid = warmup + (total - warmup) / 2;
        assert!((lr_schedule(mid, total, warmup, lr_base) - lr_base / 2.0).abs() < 1e-12);
        assert!(lr_schedule(total, total, warmup, lr_base).abs() < 1e-15);
        for step in 1..warmup {
            assert!(lr_schedule(step, total, warmup, lr_base) > lr_schedule(step - 1, total, warmup, lr_base));
        }
    }
}
