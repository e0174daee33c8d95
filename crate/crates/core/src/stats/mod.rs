//! Evaluation statistics: AUROC, bootstrap intervals, operating points,
//! group tests, dose normalization, and stratified tables.

mod special;
mod subgroup;

pub use special::{reg_inc_beta, student_t_two_sided_p};
pub use subgroup::{subgroup_report, GroupKey, SubgroupRow, SubgroupTable};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{MedicationClass, Sex};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need both classes present")]
    SingleClass,
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("zero variance")]
    ZeroVariance,
    #[error("unknown drug {0:?}")]
    UnknownDrug(String),
    #[error("dose must be positive, got {0}")]
    NonPositiveDose(f64),
    #[error("ahi must be nonnegative, got {0}")]
    NegativeAhi(f64),
    #[error("balanced subsample impossible: {n_pos} positives > {n_neg} negatives")]
    UnbalancedClasses { n_pos: usize, n_neg: usize },
    #[error("metric undefined after {0} bootstrap redraws")]
    BootstrapUndefined(usize),
}

/// One evaluation unit: a participant-phase averaged score plus the
/// metadata every stratified analysis needs.
#[derive(Debug, Clone, Serialize)]
pub struct ScoredUnit {
    pub participant_id: String,
    pub phase_id: u32,
    pub label: bool,
    pub z: f64,
    pub med_class: MedicationClass,
    pub drug: Option<String>,
    pub dose_mg: Option<f64>,
    pub ahi: Option<f64>,
    pub age_years: f64,
    pub sex: Sex,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: Option<f64>,
    pub p_value: f64,
    pub effect_size: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub auroc_ci: (f64, f64),
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: f64,
    pub ppv_ci: (f64, f64),
    pub npv: f64,
    pub npv_ci: (f64, f64),
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Mann-Whitney AUROC: the probability that a random positive outscores a
/// random negative, with ties counted half. Computed by average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, StatsError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied values share the average rank.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn percentile_interval(mut values: Vec<f64>, level: f64) -> (f64, f64) {
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

/// Percentile bootstrap interval for `metric` over resamples of `units`
/// drawn with replacement. Resamples on which the metric is undefined
/// (`None`) are redrawn up to 100 times before erroring. Each iteration
/// uses its own counter-keyed rng stream, so results do not depend on
/// evaluation order.
pub fn bootstrap_ci<T, F>(
    units: &[T],
    metric: F,
    n: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), StatsError>
where
    F: Fn(&[&T]) -> Option<f64>,
{
    if units.is_empty() {
        return Err(StatsError::TooFewSamples("no units".into()));
    }
    const MAX_REDRAWS: usize = 100;
    let mut values = Vec::with_capacity(n);
    for iter in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(iter as u64 + 1);
        let mut value = None;
        for _ in 0..MAX_REDRAWS {
            let resample: Vec<&T> = (0..units.len())
                .map(|_| &units[rng.gen_range(0..units.len())])
                .collect();
            if let Some(v) = metric(&resample) {
                value = Some(v);
                break;
            }
        }
        values.push(value.ok_or(StatsError::BootstrapUndefined(MAX_REDRAWS))?);
    }
    Ok(percentile_interval(values, level))
}

/// Threshold maximizing Youden's J = sensitivity + specificity - 1,
/// with predictions positive iff z >= threshold. Ties on J resolve to the
/// smallest threshold.
pub fn youden_threshold(
    scores: &[f64],
    labels: &[bool],
) -> Result<(f64, f64, f64), StatsError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::SingleClass);
    }
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &t in &candidates {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&z, &l) in scores.iter().zip(labels) {
            if z >= t {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let sens = tp as f64 / n_pos as f64;
        let spec = (n_neg - fp) as f64 / n_neg as f64;
        let j = sens + spec - 1.0;
        let better = match best {
            None => true,
            Some((bj, ..)) => j > bj + 1e-12,
        };
        if better {
            best = Some((j, t, sens, spec));
        }
    }
    let (_, t, sens, spec) = best.unwrap();
    Ok((t, sens, spec))
}

/// Balanced PPV/NPV: each iteration subsamples the negatives (without
/// replacement) down to the positive count, applies the threshold, and
/// computes PPV and NPV; means and percentile intervals are reported over
/// iterations where the quantity is defined.
pub fn ppv_npv_balanced(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
    n_boot: usize,
    seed: u64,
) -> Result<(f64, f64, (f64, f64), (f64, f64)), StatsError> {
    assert_eq!(scores.len(), labels.len());
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&z, _)| z)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&z, _)| z)
        .collect();
    if pos.is_empty() {
        return Err(StatsError::SingleClass);
    }
    if pos.len() > neg.len() {
        return Err(StatsError::UnbalancedClasses {
            n_pos: pos.len(),
            n_neg: neg.len(),
        });
    }
    let tp = pos.iter().filter(|&&z| z >= threshold).count();
    let fn_ = pos.len() - tp;
    let mut ppvs = Vec::with_capacity(n_boot);
    let mut npvs = Vec::with_capacity(n_boot);
    for iter in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(iter as u64 + 1);
        let mut idx: Vec<usize> = (0..neg.len()).collect();
        idx.shuffle(&mut rng);
        let sub = &idx[..pos.len()];
        let fp = sub.iter().filter(|&&i| neg[i] >= threshold).count();
        let tn = pos.len() - fp;
        if tp + fp > 0 {
            ppvs.push(tp as f64 / (tp + fp) as f64);
        }
        if tn + fn_ > 0 {
            npvs.push(tn as f64 / (tn + fn_) as f64);
        }
    }
    let summarize = |vals: &[f64]| -> (f64, (f64, f64)) {
        if vals.is_empty() {
            return (f64::NAN, (f64::NAN, f64::NAN));
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (mean, percentile_interval(vals.to_vec(), 0.95))
    };
    let (ppv, ppv_ci) = summarize(&ppvs);
    let (npv, npv_ci) = summarize(&npvs);
    Ok((ppv, npv, ppv_ci, npv_ci))
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's t-test (unequal variances), two-sided p via the Student-t CDF.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFewSamples(format!(
            "welch_t needs >= 2 per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let sa = va / a.len() as f64;
    let sb = vb / b.len() as f64;
    if sa + sb == 0.0 {
        // Degenerate variance: identical constants give no evidence;
        // distinct constants give unbounded evidence.
        return Ok(if ma == mb {
            TestResult {
                statistic: 0.0,
                df: None,
                p_value: 1.0,
                effect_size: None,
            }
        } else {
            TestResult {
                statistic: if ma > mb {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                },
                df: None,
                p_value: 0.0,
                effect_size: None,
            }
        });
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2)
        / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok(TestResult {
        statistic: t,
        df: Some(df),
        p_value: student_t_two_sided_p(t, df),
        effect_size: None,
    })
}

/// Cohen's d with the average-variance denominator, reported as an
/// absolute value.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFewSamples(format!(
            "cohens_d needs >= 2 per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let denom = ((va + vb) / 2.0).sqrt();
    if denom == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((ma - mb).abs() / denom)
}

/// Pearson correlation with p-value via the t transform on n-2 degrees of
/// freedom. The correlation is returned as `effect_size`.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(StatsError::TooFewSamples(format!(
            "pearson_r needs equal-length samples of >= 3, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = n - 2.0;
    let (t, p) = if 1.0 - r * r <= 0.0 {
        (r.signum() * f64::INFINITY, 0.0)
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        (t, student_t_two_sided_p(t, df))
    };
    Ok(TestResult {
        statistic: t,
        df: Some(df),
        p_value: p,
        effect_size: Some(r),
    })
}

/// Defined daily doses in mg for the supported antidepressants.
const DDD_TABLE: [(&str, f64); 11] = [
    ("escitalopram", 10.0),
    ("citalopram", 20.0),
    ("fluoxetine", 20.0),
    ("sertraline", 50.0),
    ("paroxetine", 20.0),
    ("mirtazapine", 30.0),
    ("bupropion", 300.0),
    ("venlafaxine", 150.0),
    ("desvenlafaxine", 50.0),
    ("imipramine", 100.0),
    ("nortriptyline", 75.0),
];

/// Prescribed dose as a multiple of the drug's defined daily dose.
pub fn ddd_normalize(drug: &str, dose_mg: f64) -> Result<f64, StatsError> {
    if !(dose_mg > 0.0) {
        return Err(StatsError::NonPositiveDose(dose_mg));
    }
    let key = drug.to_ascii_lowercase();
    DDD_TABLE
        .iter()
        .find(|(name, _)| *name == key)
        .map(|(_, ddd)| dose_mg / ddd)
        .ok_or_else(|| StatsError::UnknownDrug(drug.to_string()))
}

pub fn ddd_drugs() -> impl Iterator<Item = &'static str> {
    DDD_TABLE.iter().map(|(name, _)| *name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum AhiSeverity {
    Normal,
    Mild,
    Moderate,
    Severe,
}

impl std::fmt::Display for AhiSeverity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AhiSeverity::Normal => "Normal",
            AhiSeverity::Mild => "Mild",
            AhiSeverity::Moderate => "Moderate",
            AhiSeverity::Severe => "Severe",
        };
        f.write_str(name)
    }
}

/// Apnea severity buckets: Normal < 5, Mild [5, 15), Moderate [15, 30],
/// Severe > 30 events per hour.
pub fn ahi_class(ahi: f64) -> Result<AhiSeverity, StatsError> {
    if !(ahi >= 0.0) {
        return Err(StatsError::NegativeAhi(ahi));
    }
    Ok(if ahi < 5.0 {
        AhiSeverity::Normal
    } else if ahi < 15.0 {
        AhiSeverity::Mild
    } else if ahi <= 30.0 {
        AhiSeverity::Moderate
    } else {
        AhiSeverity::Severe
    })
}

/// Full evaluation of scored units: AUROC with bootstrap CI, the Youden
/// operating point, and balanced PPV/NPV at that threshold.
pub fn evaluate(units: &[ScoredUnit], seed: u64) -> Result<EvalReport, StatsError> {
    let scores: Vec<f64> = units.iter().map(|u| u.z).collect();
    let labels: Vec<bool> = units.iter().map(|u| u.label).collect();
    let point = auroc(&scores, &labels)?;
    let auroc_ci = bootstrap_ci(
        units,
        |sample| {
            let s: Vec<f64> = sample.iter().map(|u| u.z).collect();
            let l: Vec<bool> = sample.iter().map(|u| u.label).collect();
            auroc(&s, &l).ok()
        },
        1000,
        0.95,
        seed,
    )?;
    let (threshold, sensitivity, specificity) = youden_threshold(&scores, &labels)?;
    let (ppv, npv, ppv_ci, npv_ci) =
        ppv_npv_balanced(&scores, &labels, threshold, 1000, seed ^ 0x9e3779b97f4a7c15)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    Ok(EvalReport {
        auroc: point,
        auroc_ci,
        threshold,
        sensitivity,
        specificity,
        ppv,
        ppv_ci,
        npv,
        npv_ci,
        n_pos,
        n_neg: labels.len() - n_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut concordant = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    concordant += 1.0;
                } else if scores[i] == scores[j] {
                    concordant += 0.5;
                }
            }
        }
        concordant / pairs
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(
            auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(
            auroc(&[0.2, 0.7, 0.4, 0.9], &[true, false, false, true]).unwrap(),
            0.5
        );
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(StatsError::SingleClass)
        ));
    }

    proptest! {
        #[test]
        fn auroc_matches_brute_force(
            scores in prop::collection::vec(0..=10i32, 2..200),
            flip in prop::collection::vec(prop::bool::ANY, 2..200),
        ) {
            let n = scores.len().min(flip.len());
            let scores: Vec<f64> = scores[..n].iter().map(|&s| s as f64 / 10.0).collect();
            let mut labels: Vec<bool> = flip[..n].to_vec();
            // Force both classes present.
            labels[0] = true;
            if n > 1 { labels[1] = false; }
            let fast = auroc(&scores, &labels).unwrap();
            let slow = brute_force_auroc(&scores, &labels);
            prop_assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }

        #[test]
        fn auroc_invariant_under_monotone_transform(
            scores in prop::collection::vec(-5.0..5.0f64, 2..100),
            flip in prop::collection::vec(prop::bool::ANY, 2..100),
        ) {
            let n = scores.len().min(flip.len());
            let scores = &scores[..n];
            let mut labels: Vec<bool> = flip[..n].to_vec();
            labels[0] = true;
            if n > 1 { labels[1] = false; }
            let base = auroc(scores, &labels).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|&s| (0.8 * s).exp() + 3.0 * s).collect();
            let after = auroc(&transformed, &labels).unwrap();
            prop_assert!((base - after).abs() < 1e-12);
        }

        #[test]
        fn youden_confusion_recomputation_matches(
            scores in prop::collection::vec(0..=20i32, 4..80),
            flip in prop::collection::vec(prop::bool::ANY, 4..80),
        ) {
            let n = scores.len().min(flip.len());
            let scores: Vec<f64> = scores[..n].iter().map(|&s| s as f64 / 20.0).collect();
            let mut labels: Vec<bool> = flip[..n].to_vec();
            labels[0] = true;
            labels[1] = false;
            let (t, sens, spec) = youden_threshold(&scores, &labels).unwrap();
            let tp = scores.iter().zip(&labels).filter(|(&z, &l)| l && z >= t).count();
            let fp = scores.iter().zip(&labels).filter(|(&z, &l)| !l && z >= t).count();
            let n_pos = labels.iter().filter(|&&l| l).count();
            let n_neg = n - n_pos;
            prop_assert_eq!(sens, tp as f64 / n_pos as f64);
            prop_assert_eq!(spec, (n_neg - fp) as f64 / n_neg as f64);
        }

        #[test]
        fn cohens_d_translation_and_scale_invariance(
            a in prop::collection::vec(-10.0..10.0f64, 3..40),
            b in prop::collection::vec(-10.0..10.0f64, 3..40),
            c in -100.0..100.0f64,
            s in 0.1..50.0f64,
        ) {
            prop_assume!(cohens_d(&a, &b).is_ok());
            let d0 = cohens_d(&a, &b).unwrap();
            let shift = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| x + c).collect() };
            let scale = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| x * s).collect() };
            let d_shift = cohens_d(&shift(&a), &shift(&b)).unwrap();
            let d_scale = cohens_d(&scale(&a), &scale(&b)).unwrap();
            prop_assert!((d0 - d_shift).abs() < 1e-9, "shift changed d: {} vs {}", d0, d_shift);
            prop_assert!((d0 - d_scale).abs() < 1e-9 * (1.0 + d0), "scale changed d: {} vs {}", d0, d_scale);
        }
    }

    #[test]
    fn youden_examples() {
        let (t, sens, spec) =
            youden_threshold(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!((t, sens, spec), (0.8, 1.0, 1.0));

        let (t, sens, spec) =
            youden_threshold(&[0.4, 0.4, 0.4, 0.4], &[true, false, true, false]).unwrap();
        assert_eq!(t, 0.4);
        assert_eq!(sens + spec - 1.0, 0.0);

        let (t, sens, spec) =
            youden_threshold(&[0.1, 0.4, 0.35, 0.8], &[false, true, false, true]).unwrap();
        assert_eq!((t, sens, spec), (0.4, 1.0, 1.0));
    }

    #[test]
    fn bootstrap_constant_metric_degenerates() {
        let units: Vec<f64> = vec![1.0; 40];
        let (lo, hi) = bootstrap_ci(&units, |_| Some(0.75), 200, 0.95, 1).unwrap();
        assert_eq!(lo, 0.75);
        assert_eq!(hi, 0.75);
    }

    #[test]
    fn bootstrap_same_seed_reproduces() {
        let units: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let metric = |s: &[&f64]| Some(s.iter().map(|&&x| x).sum::<f64>() / s.len() as f64);
        let a = bootstrap_ci(&units, metric, 300, 0.95, 7).unwrap();
        let b = bootstrap_ci(&units, metric, 300, 0.95, 7).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_ci(&units, metric, 300, 0.95, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bootstrap_contains_point_estimate() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let n = rng.gen_range(20..80);
            let units: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let metric = |s: &[&f64]| Some(s.iter().map(|&&x| x).sum::<f64>() / s.len() as f64);
            let point = units.iter().sum::<f64>() / units.len() as f64;
            let (lo, hi) = bootstrap_ci(&units, metric, 500, 0.95, trial).unwrap();
            assert!(
                lo <= point && point <= hi,
                "trial {trial}: point {point} outside [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn bootstrap_width_shrinks_with_sample_size() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let metric = |s: &[&f64]| Some(s.iter().map(|&&x| x).sum::<f64>() / s.len() as f64);
        let mut widths = |n: usize| -> Vec<f64> {
            (0..50)
                .map(|t| {
                    let units: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let (lo, hi) = bootstrap_ci(&units, metric, 300, 0.95, t).unwrap();
                    hi - lo
                })
                .collect()
        };
        let median = |mut v: Vec<f64>| -> f64 {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let w100 = median(widths(100));
        let w400 = median(widths(400));
        assert!(w400 < w100, "width at 400 ({w400}) !< width at 100 ({w100})");
    }

    #[test]
    fn bootstrap_redraws_single_class_resamples() {
        // 1 positive among 30: many resamples miss it, forcing redraws.
        let units: Vec<(f64, bool)> = (0..30)
            .map(|i| (i as f64 / 30.0, i == 29))
            .collect();
        let metric = |s: &[&(f64, bool)]| {
            let scores: Vec<f64> = s.iter().map(|u| u.0).collect();
            let labels: Vec<bool> = s.iter().map(|u| u.1).collect();
            auroc(&scores, &labels).ok()
        };
        let (lo, hi) = bootstrap_ci(&units, metric, 500, 0.95, 3).unwrap();
        assert!(lo <= hi);
        assert!(hi <= 1.0 && lo >= 0.0);
    }

    #[test]
    fn ppv_npv_perfect_classifier() {
        let scores = [0.9, 0.95, 0.85, 0.1, 0.05, 0.2, 0.15, 0.12];
        let labels = [true, true, true, false, false, false, false, false];
        let (ppv, npv, ppv_ci, npv_ci) =
            ppv_npv_balanced(&scores, &labels, 0.5, 200, 1).unwrap();
        assert_eq!(ppv, 1.0);
        assert_eq!(npv, 1.0);
        assert_eq!(ppv_ci, (1.0, 1.0));
        assert_eq!(npv_ci, (1.0, 1.0));
    }

    #[test]
    fn ppv_npv_all_positive_forces_base_rate() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.9, 0.8, 0.7, 0.6];
        let labels = [true, true, true, true, false, false, false, false];
        let (ppv, _npv, ppv_ci, _) = ppv_npv_balanced(&scores, &labels, 0.0, 200, 2).unwrap();
        assert_eq!(ppv, 0.5);
        assert_eq!(ppv_ci, (0.5, 0.5));
    }

    #[test]
    fn ppv_npv_iteration_oracle_with_uniform_negatives() {
        // 3 of 4 positives above threshold; all 8 negatives below. Every
        // balanced subsample then gives TP=3, FP=0, FN=1, TN=4.
        let scores = [0.9, 0.8, 0.7, 0.3, 0.1, 0.15, 0.2, 0.25, 0.1, 0.05, 0.18, 0.22];
        let labels = [
            true, true, true, true, false, false, false, false, false, false, false, false,
        ];
        let (ppv, npv, ppv_ci, npv_ci) =
            ppv_npv_balanced(&scores, &labels, 0.5, 300, 9).unwrap();
        assert_eq!(ppv, 1.0);
        assert!((npv - 0.8).abs() < 1e-12);
        assert_eq!(ppv_ci, (1.0, 1.0));
        assert_eq!(npv_ci, (0.8, 0.8));
    }

    #[test]
    fn ppv_npv_requires_enough_negatives() {
        let scores = [0.9, 0.8, 0.7, 0.1];
        let labels = [true, true, true, false];
        assert!(matches!(
            ppv_npv_balanced(&scores, &labels, 0.5, 10, 1),
            Err(StatsError::UnbalancedClasses { .. })
        ));
    }

    #[test]
    fn welch_identical_groups() {
        let r = welch_t(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn welch_hand_example() {
        let r = welch_t(&[10.0, 11.0, 12.0], &[0.0, 1.0, 2.0]).unwrap();
        let expected_t = 10.0 / (2.0f64 / 3.0).sqrt();
        assert!((r.statistic - expected_t).abs() < 1e-10, "{}", r.statistic);
        assert!((r.df.unwrap() - 4.0).abs() < 1e-10, "{:?}", r.df);
    }

    #[test]
    fn welch_degenerate_variances() {
        let same = welch_t(&[2.0, 2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(same.statistic, 0.0);
        assert_eq!(same.p_value, 1.0);
        let diff = welch_t(&[3.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!(diff.statistic.is_infinite() && diff.statistic > 0.0);
        assert_eq!(diff.p_value, 0.0);
    }

    #[test]
    fn cohens_d_examples() {
        assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let d = cohens_d(&[0.0, 2.0], &[-1.0, 1.0]).unwrap();
        assert!((d - 1.0 / 2.0f64.sqrt()).abs() < 1e-10, "{d}");
        assert!(matches!(
            cohens_d(&[1.0, 1.0], &[2.0, 2.0]),
            Err(StatsError::ZeroVariance)
        ));
    }

    #[test]
    fn pearson_exact_lines() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let r = pearson_r(&x, &x).unwrap();
        assert_eq!(r.effect_size, Some(1.0));
        assert_eq!(r.p_value, 0.0);
        let y: Vec<f64> = x.iter().map(|&v| -2.0 * v + 3.0).collect();
        let r = pearson_r(&x, &y).unwrap();
        assert_eq!(r.effect_size, Some(-1.0));
    }

    #[test]
    fn pearson_matches_direct_formula() {
        let x = [0.3, 1.1, -0.7, 2.2, 0.0, 0.9, -1.4, 3.0, 0.5, 1.7];
        let y = [1.0, 0.4, -0.2, 1.9, 0.3, 1.2, -0.8, 2.1, 0.9, 0.6];
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(&y).map(|(&a, &b)| a * b).sum();
        let sxx: f64 = x.iter().map(|&a| a * a).sum();
        let syy: f64 = y.iter().map(|&b| b * b).sum();
        let expected = (n * sxy - sx * sy)
            / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        let r = pearson_r(&x, &y).unwrap().effect_size.unwrap();
        assert!((r - expected).abs() < 1e-12, "{r} vs {expected}");
    }

    #[test]
    fn ddd_examples_and_full_table() {
        assert_eq!(ddd_normalize("fluoxetine", 40.0).unwrap(), 2.0);
        assert_eq!(ddd_normalize("venlafaxine", 75.0).unwrap(), 0.5);
        assert_eq!(ddd_normalize("sertraline", 50.0).unwrap(), 1.0);
        assert_eq!(ddd_normalize("Escitalopram", 10.0).unwrap(), 1.0);
        let expected = [
            ("escitalopram", 10.0),
            ("citalopram", 20.0),
            ("fluoxetine", 20.0),
            ("sertraline", 50.0),
            ("paroxetine", 20.0),
            ("mirtazapine", 30.0),
            ("bupropion", 300.0),
            ("venlafaxine", 150.0),
            ("desvenlafaxine", 50.0),
            ("imipramine", 100.0),
            ("nortriptyline", 75.0),
        ];
        for (drug, ddd) in expected {
            assert_eq!(ddd_normalize(drug, ddd).unwrap(), 1.0, "{drug}");
        }
        assert_eq!(ddd_drugs().count(), 11);
        assert!(matches!(
            ddd_normalize("aspirin", 100.0),
            Err(StatsError::UnknownDrug(_))
        ));
        assert!(matches!(
            ddd_normalize("fluoxetine", 0.0),
            Err(StatsError::NonPositiveDose(_))
        ));
    }

    #[test]
    fn ahi_classes_and_boundaries() {
        assert_eq!(ahi_class(3.0).unwrap(), AhiSeverity::Normal);
        assert_eq!(ahi_class(7.0).unwrap(), AhiSeverity::Mild);
        assert_eq!(ahi_class(31.0).unwrap(), AhiSeverity::Severe);
        assert_eq!(ahi_class(5.0).unwrap(), AhiSeverity::Mild);
        assert_eq!(ahi_class(15.0).unwrap(), AhiSeverity::Moderate);
        assert_eq!(ahi_class(30.0).unwrap(), AhiSeverity::Moderate);
        assert_eq!(ahi_class(0.0).unwrap(), AhiSeverity::Normal);
        assert!(ahi_class(-1.0).is_err());
    }

    #[test]
    fn evaluate_produces_consistent_report() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let units: Vec<ScoredUnit> = (0..120)
            .map(|i| {
                let label = i % 3 == 0;
                let z = if label {
                    rng.gen_range(0.4..1.0)
                } else {
                    rng.gen_range(0.0..0.6)
                };
                ScoredUnit {
                    participant_id: format!("p{i:04}"),
                    phase_id: 0,
                    label,
                    z,
                    med_class: if label {
                        MedicationClass::Ssri
                    } else {
                        MedicationClass::None
                    },
                    drug: label.then(|| "sertraline".to_string()),
                    dose_mg: label.then_some(50.0),
                    ahi: Some(rng.gen_range(0.0..35.0)),
                    age_years: rng.gen_range(20.0..85.0),
                    sex: if i % 2 == 0 { Sex::F } else { Sex::M },
                }
            })
            .collect();
        let report = evaluate(&units, 21).unwrap();
        assert!(report.auroc > 0.7 && report.auroc <= 1.0);
        assert!(report.auroc_ci.0 <= report.auroc && report.auroc <= report.auroc_ci.1);
        assert!(report.sensitivity > 0.0 && report.specificity > 0.0);
        assert_eq!(report.n_pos, 40);
        assert_eq!(report.n_neg, 80);
        let again = evaluate(&units, 21).unwrap();
        assert_eq!(report.auroc_ci, again.auroc_ci);
    }
}
