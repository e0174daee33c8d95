//! Semi-Markov hypnogram generator: sleep-onset latency, then ~90 minute
//! cycles of N1 -> N2 -> N3 -> N2 -> REM with front-loaded slow-wave sleep
//! and REM episodes that lengthen across the night, plus brief awakenings
//! after the first REM episode.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::data::{Hypnogram, Stage};

use super::EffectProfile;

const EPOCHS_PER_MIN: f64 = 2.0;

/// Mean sleep-onset-to-first-REM interval for an unmedicated night, minutes.
pub const BASELINE_REM_LATENCY_MIN: f64 = 75.0;
const REM_LATENCY_LOG_SD: f64 = 0.30;

const SOL_MEDIAN_MIN: f64 = 10.0;
const SOL_LOG_SD: f64 = 0.45;

/// N3 share of each cycle's NREM time before profile scaling.
const N3_SHARE_BY_CYCLE: [f64; 5] = [0.45, 0.35, 0.20, 0.10, 0.05];
/// REM episode length before profile scaling, minutes, by cycle.
const REM_BASE_MIN_BY_CYCLE: [f64; 5] = [10.0, 17.0, 22.0, 26.0, 28.0];

const CYCLE_PERIOD_MEAN_MIN: f64 = 90.0;
const CYCLE_PERIOD_SD_MIN: f64 = 10.0;

const BASELINE_WAKE_FRACTION: f64 = 0.07;
const MEAN_AWAKENINGS: f64 = 4.0;

fn epochs(minutes: f64) -> usize {
    (minutes * EPOCHS_PER_MIN).round() as usize
}

fn lognormal(rng: &mut impl Rng, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (sd * z - 0.5 * sd * sd).exp()
}

/// One NREM block arranged as N1, half the N2, the N3 core, remaining N2.
fn push_nrem(seq: &mut Vec<Stage>, total_e: usize, n1_e: usize, n3_share: f64) {
    let n1 = n1_e.min(total_e);
    let n3 = ((total_e - n1) as f64 * n3_share).round() as usize;
    let n2 = total_e - n1 - n3;
    let n2_front = n2 / 2;
    seq.extend(std::iter::repeat(Stage::N1).take(n1));
    seq.extend(std::iter::repeat(Stage::N2).take(n2_front));
    seq.extend(std::iter::repeat(Stage::N3).take(n3));
    seq.extend(std::iter::repeat(Stage::N2).take(n2 - n2_front));
}

/// Generate one night. `duration_h` must be in [4, 12]; the profile scales
/// REM latency, REM and N3 portions, and the wake fraction.
pub fn gen_hypnogram(profile: &EffectProfile, duration_h: f64, rng: &mut impl Rng) -> Hypnogram {
    assert!(
        (4.0..=12.0).contains(&duration_h),
        "duration_h {duration_h} outside [4, 12]"
    );
    let n_epochs = (duration_h * 60.0 * EPOCHS_PER_MIN).round() as usize;

    let sol_min = (SOL_MEDIAN_MIN * lognormal(rng, SOL_LOG_SD)).clamp(2.0, 40.0);
    let sol_e = epochs(sol_min).max(1);

    let wake_fraction = (BASELINE_WAKE_FRACTION - profile.efficiency_delta).max(0.005);
    let post_onset_e = n_epochs.saturating_sub(sol_e);
    let wake_e = ((post_onset_e as f64) * wake_fraction).round() as usize;
    let sleep_e = post_onset_e - wake_e;

    let mut seq: Vec<Stage> = Vec::with_capacity(post_onset_e);
    let mut cycle = 0usize;
    let mut first_rem_idx: Option<usize> = None;
    while seq.len() < sleep_e {
        let share_idx = cycle.min(N3_SHARE_BY_CYCLE.len() - 1);
        let n3_share = (N3_SHARE_BY_CYCLE[share_idx] * profile.sws_fraction_mult).clamp(0.0, 0.75);
        let rem_base = REM_BASE_MIN_BY_CYCLE[cycle.min(REM_BASE_MIN_BY_CYCLE.len() - 1)];

        // REM scaling trades minutes against NREM inside a fixed cycle
        // period, so the night holds the same number of cycles and the REM
        // share of sleep scales linearly with the multiplier.
        let (nrem_e, rem_e, n1_e) = if cycle == 0 {
            let lat_min = BASELINE_REM_LATENCY_MIN
                * profile.rem_latency_mult
                * lognormal(rng, REM_LATENCY_LOG_SD);
            let rem_min =
                (rem_base * profile.rem_fraction_mult * lognormal(rng, 0.25)).clamp(1.0, 45.0);
            (epochs(lat_min).max(8), epochs(rem_min).max(2), epochs(4.0))
        } else {
            let z: f64 = StandardNormal.sample(rng);
            let period = (CYCLE_PERIOD_MEAN_MIN + CYCLE_PERIOD_SD_MIN * z).clamp(60.0, 120.0);
            let rem_min = (rem_base * profile.rem_fraction_mult * lognormal(rng, 0.25))
                .clamp(1.0, 0.45 * period);
            let rem = epochs(rem_min).max(2);
            (epochs(period) - rem, rem, epochs(2.0))
        };
        push_nrem(&mut seq, nrem_e, n1_e, n3_share);

        if first_rem_idx.is_none() {
            first_rem_idx = Some(seq.len());
        }
        seq.extend(std::iter::repeat(Stage::Rem).take(rem_e));
        cycle += 1;
    }
    seq.truncate(sleep_e);

    let wake_runs = split_wake(wake_e, rng);
    let insert_after = first_rem_idx.unwrap_or(seq.len() * 3 / 5).min(seq.len());
    let mut positions: Vec<usize> = wake_runs
        .iter()
        .map(|_| rng.gen_range(insert_after..=seq.len()))
        .collect();
    positions.sort_unstable();

    let mut out: Vec<Stage> = Vec::with_capacity(n_epochs);
    out.extend(std::iter::repeat(Stage::W).take(sol_e));
    let mut cursor = 0usize;
    for (pos, run) in positions.iter().zip(&wake_runs) {
        out.extend_from_slice(&seq[cursor..*pos]);
        out.extend(std::iter::repeat(Stage::W).take(*run));
        cursor = *pos;
    }
    out.extend_from_slice(&seq[cursor..]);
    debug_assert_eq!(out.len(), n_epochs);
    Hypnogram::new(out)
}

/// Split a wake budget into Poisson-many runs with exponential weights.
fn split_wake(wake_e: usize, rng: &mut impl Rng) -> Vec<usize> {
    if wake_e == 0 {
        return Vec::new();
    }
    let n = (Poisson::new(MEAN_AWAKENINGS).unwrap().sample(rng) as usize).clamp(1, wake_e);
    let weights: Vec<f64> = (0..n)
        .map(|_| (-(1.0 - rng.gen::<f64>()).ln()).max(1e-12))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut runs: Vec<usize> = weights
        .iter()
        .map(|w| (w / total * wake_e as f64).floor() as usize)
        .collect();
    let mut assigned: usize = runs.iter().sum();
    let mut i = 0;
    while assigned < wake_e {
        runs[i % n] += 1;
        assigned += 1;
        i += 1;
    }
    runs.retain(|&r| r > 0);
    runs
}

/// Minutes from the first sleep epoch to the first REM epoch, if both exist.
pub fn rem_latency_min(hyp: &Hypnogram) -> Option<f64> {
    let onset = hyp.epochs.iter().position(|s| s.is_sleep())?;
    let rem = hyp.epochs[onset..]
        .iter()
        .position(|&s| s == Stage::Rem)?;
    Some(rem as f64 * hyp.epoch_len_s / 60.0)
}

pub fn stage_fraction(hyp: &Hypnogram, stage: Stage) -> f64 {
    let sleep = hyp.epochs.iter().filter(|s| s.is_sleep()).count();
    if sleep == 0 {
        return 0.0;
    }
    let n = hyp.epochs.iter().filter(|&&s| s == stage).count();
    n as f64 / sleep as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mean_over_draws<F: Fn(&Hypnogram) -> Option<f64>>(
        profile: &EffectProfile,
        n: usize,
        seed: u64,
        f: F,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..n {
            let hyp = gen_hypnogram(profile, 7.5, &mut rng);
            if let Some(v) = f(&hyp) {
                sum += v;
                count += 1;
            }
        }
        assert!(count > n * 9 / 10, "too many nights without the statistic");
        sum / count as f64
    }

    #[test]
    fn identity_rem_latency_mean_near_75_min() {
        let mean = mean_over_draws(&EffectProfile::identity(), 1000, 11, rem_latency_min);
        assert!((70.0..=80.0).contains(&mean), "mean latency {mean}");
    }

    #[test]
    fn latency_multiplier_doubles_mean_latency() {
        let control = mean_over_draws(&EffectProfile::identity(), 1000, 12, rem_latency_min);
        let mut p = EffectProfile::identity();
        p.rem_latency_mult = 2.0;
        let delayed = mean_over_draws(&p, 1000, 13, rem_latency_min);
        let ratio = delayed / control;
        assert!((1.8..=2.2).contains(&ratio), "latency ratio {ratio}");
    }

    #[test]
    fn rem_fraction_multiplier_halves_rem_share() {
        let control = mean_over_draws(&EffectProfile::identity(), 1000, 14, |h| {
            Some(stage_fraction(h, Stage::Rem))
        });
        let mut p = EffectProfile::identity();
        p.rem_fraction_mult = 0.5;
        let reduced = mean_over_draws(&p, 1000, 15, |h| Some(stage_fraction(h, Stage::Rem)));
        let ratio = reduced / control;
        assert!(
            (0.45..=0.55).contains(&ratio),
            "rem fraction ratio {ratio} (control {control}, reduced {reduced})"
        );
    }

    #[test]
    fn sws_multiplier_scales_n3_share() {
        let control = mean_over_draws(&EffectProfile::identity(), 500, 16, |h| {
            Some(stage_fraction(h, Stage::N3))
        });
        let mut p = EffectProfile::identity();
        p.sws_fraction_mult = 0.75;
        let reduced = mean_over_draws(&p, 500, 17, |h| Some(stage_fraction(h, Stage::N3)));
        let ratio = reduced / control;
        assert!((0.67..=0.83).contains(&ratio), "sws ratio {ratio}");
    }

    #[test]
    fn efficiency_delta_raises_sleep_share() {
        let eff = |h: &Hypnogram| Some(h.sleep_time_s() / h.duration_s());
        let control = mean_over_draws(&EffectProfile::identity(), 500, 18, eff);
        let mut p = EffectProfile::identity();
        p.efficiency_delta = 0.05;
        let raised = mean_over_draws(&p, 500, 19, eff);
        let gain = raised - control;
        assert!(
            (0.03..=0.06).contains(&gain),
            "efficiency gain {gain} (control {control})"
        );
    }

    #[test]
    fn night_shape_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for &dur in &[4.0, 7.5, 12.0] {
            let hyp = gen_hypnogram(&EffectProfile::identity(), dur, &mut rng);
            assert_eq!(hyp.epochs.len(), (dur * 120.0) as usize);
            assert_eq!(hyp.epochs[0], Stage::W);
            assert!(hyp.epochs.iter().any(|&s| s == Stage::Rem));
            assert!(hyp.epochs.iter().any(|&s| s == Stage::N3));
            let sleep_frac = hyp.sleep_time_s() / hyp.duration_s();
            assert!(
                (0.80..0.99).contains(&sleep_frac),
                "sleep fraction {sleep_frac}"
            );
        }
    }

    #[test]
    fn cycles_follow_nrem_to_rem_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let hyp = gen_hypnogram(&EffectProfile::identity(), 8.0, &mut rng);
        let onset = hyp.epochs.iter().position(|s| s.is_sleep()).unwrap();
        let first_rem = hyp.epochs.iter().position(|&s| s == Stage::Rem).unwrap();
        let pre_rem = &hyp.epochs[onset..first_rem];
        assert!(pre_rem.iter().all(|&s| s != Stage::Rem));
        assert!(pre_rem.contains(&Stage::N3));
        assert!(pre_rem.contains(&Stage::N2));
    }
}
