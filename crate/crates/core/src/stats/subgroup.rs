//! Stratified evaluation tables.
//!
//! Each grouping key partitions scored units into named groups and reports
//! detection performance or score-distribution summaries per group.
//! Detection-style groups (per drug, per antidepressant class) are scored
//! against the shared control pool; distribution-style groups (dose bins,
//! confounder classes, co-therapy buckets) summarize their own scores and,
//! where the analysis calls for it, test them against the pooled
//! antidepressant scores.

use serde::Serialize;

use super::{
    ahi_class, auroc, bootstrap_ci, ddd_normalize, welch_t, ScoredUnit, StatsError, TestResult,
};
use crate::data::MedicationClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Drug,
    Class,
    DoseBin,
    AhiSeverity,
    AgeDecade,
    Sex,
    CoTherapy,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubgroupRow {
    pub group: String,
    /// Positive units in the group (for detection rows) or members with
    /// label = true (distribution rows).
    pub n_pos: usize,
    /// Comparison negatives: the shared control pool for detection rows,
    /// in-group negatives otherwise.
    pub n_neg: usize,
    /// Mean score over the group's member units.
    pub mean_z: f64,
    pub auroc: Option<f64>,
    pub auroc_ci: Option<(f64, f64)>,
    /// Sensitivity at the fixed specificity operating mode (detection rows).
    pub sensitivity_at_fixed_spec: Option<f64>,
    /// Welch test of this group's scores against pooled antidepressant
    /// scores (confounder and co-therapy rows).
    pub welch_vs_antidepressant: Option<TestResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubgroupTable {
    pub key: GroupKey,
    pub rows: Vec<SubgroupRow>,
}

/// Specificity level used for the fixed-operating-point sensitivity column.
pub const FIXED_SPECIFICITY: f64 = 0.83;

/// Smallest threshold reaching the target specificity, and the
/// sensitivity there. Returns None if no in-range threshold qualifies.
fn sensitivity_at_specificity(
    pos: &[f64],
    neg: &[f64],
    target_spec: f64,
) -> Option<f64> {
    let mut candidates: Vec<f64> = pos.iter().chain(neg.iter()).cloned().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    for &t in &candidates {
        let fp = neg.iter().filter(|&&z| z >= t).count();
        let spec = (neg.len() - fp) as f64 / neg.len() as f64;
        if spec >= target_spec {
            let tp = pos.iter().filter(|&&z| z >= t).count();
            return Some(tp as f64 / pos.len() as f64);
        }
    }
    None
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Detection row: group positives vs the shared control pool.
fn detection_row(
    name: &str,
    group_pos: &[&ScoredUnit],
    controls: &[&ScoredUnit],
    seed: u64,
) -> SubgroupRow {
    let pos_scores: Vec<f64> = group_pos.iter().map(|u| u.z).collect();
    let neg_scores: Vec<f64> = controls.iter().map(|u| u.z).collect();
    let mut scores = pos_scores.clone();
    scores.extend(neg_scores.iter());
    let labels: Vec<bool> = group_pos
        .iter()
        .map(|_| true)
        .chain(controls.iter().map(|_| false))
        .collect();
    let point = auroc(&scores, &labels).ok();
    let units: Vec<&ScoredUnit> = group_pos.iter().chain(controls.iter()).cloned().collect();
    let ci = point.and_then(|_| {
        bootstrap_ci(
            &units,
            |sample| {
                let s: Vec<f64> = sample.iter().map(|u| u.z).collect();
                let l: Vec<bool> = sample.iter().map(|u| u.label).collect();
                auroc(&s, &l).ok()
            },
            1000,
            0.95,
            seed,
        )
        .ok()
    });
    let sens = if neg_scores.is_empty() || pos_scores.is_empty() {
        None
    } else {
        sensitivity_at_specificity(&pos_scores, &neg_scores, FIXED_SPECIFICITY)
    };
    SubgroupRow {
        group: name.to_string(),
        n_pos: group_pos.len(),
        n_neg: controls.len(),
        mean_z: mean(&pos_scores),
        auroc: point,
        auroc_ci: ci,
        sensitivity_at_fixed_spec: sens,
        welch_vs_antidepressant: None,
    }
}

/// Distribution row: the group's own score summary, optionally tested
/// against pooled antidepressant scores.
fn distribution_row(
    name: &str,
    members: &[&ScoredUnit],
    antidep_scores: Option<&[f64]>,
) -> SubgroupRow {
    let scores: Vec<f64> = members.iter().map(|u| u.z).collect();
    let n_pos = members.iter().filter(|u| u.label).count();
    SubgroupRow {
        group: name.to_string(),
        n_pos,
        n_neg: members.len() - n_pos,
        mean_z: mean(&scores),
        auroc: None,
        auroc_ci: None,
        sensitivity_at_fixed_spec: None,
        welch_vs_antidepressant: antidep_scores
            .and_then(|ad| welch_t(&scores, ad).ok()),
    }
}

/// Within-stratum row: the stratum carries its own positives and controls.
fn stratum_row(name: &str, members: &[&ScoredUnit], seed: u64) -> SubgroupRow {
    let scores: Vec<f64> = members.iter().map(|u| u.z).collect();
    let labels: Vec<bool> = members.iter().map(|u| u.label).collect();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let point = auroc(&scores, &labels).ok();
    let ci = point.and_then(|_| {
        bootstrap_ci(
            members,
            |sample| {
                let s: Vec<f64> = sample.iter().map(|u| u.z).collect();
                let l: Vec<bool> = sample.iter().map(|u| u.label).collect();
                auroc(&s, &l).ok()
            },
            1000,
            0.95,
            seed,
        )
        .ok()
    });
    SubgroupRow {
        group: name.to_string(),
        n_pos,
        n_neg: members.len() - n_pos,
        mean_z: mean(&scores),
        auroc: point,
        auroc_ci: ci,
        sensitivity_at_fixed_spec: None,
        welch_vs_antidepressant: None,
    }
}

/// Display name for a class grouping row; atypicals are reported per drug
/// because their members behave differently.
fn class_group_name(unit: &ScoredUnit) -> Option<String> {
    match unit.med_class {
        MedicationClass::None => None,
        MedicationClass::Atypical => Some(match unit.drug.as_deref() {
            Some(d) => {
                let mut c = d.chars();
                match c.next() {
                    Some(first) => first.to_uppercase().collect::<String>() + c.as_str(),
                    None => "Atypical".to_string(),
                }
            }
            None => "Atypical".to_string(),
        }),
        other => Some(other.to_string()),
    }
}

/// Builds the stratified table for one grouping key. Empty groups are
/// omitted. The same seed yields an identical table.
pub fn subgroup_report(
    units: &[ScoredUnit],
    key: GroupKey,
    seed: u64,
) -> Result<SubgroupTable, StatsError> {
    if units.is_empty() {
        return Err(StatsError::TooFewSamples("no scored units".into()));
    }
    let controls: Vec<&ScoredUnit> = units
        .iter()
        .filter(|u| u.med_class == MedicationClass::None)
        .collect();
    let antidep: Vec<&ScoredUnit> = units.iter().filter(|u| u.label).collect();
    let antidep_scores: Vec<f64> = antidep.iter().map(|u| u.z).collect();

    let mut rows = Vec::new();
    match key {
        GroupKey::Drug => {
            let mut drugs: Vec<String> = antidep
                .iter()
                .filter_map(|u| u.drug.clone())
                .collect();
            drugs.sort();
            drugs.dedup();
            for (i, drug) in drugs.iter().enumerate() {
                let group: Vec<&ScoredUnit> = antidep
                    .iter()
                    .filter(|u| u.drug.as_deref() == Some(drug))
                    .cloned()
                    .collect();
                rows.push(detection_row(drug, &group, &controls, seed ^ (i as u64 + 1)));
            }
        }
        GroupKey::Class => {
            let mut names: Vec<String> =
                units.iter().filter_map(class_group_name).collect();
            names.sort();
            names.dedup();
            // Antidepressant classes first, then confounders.
            names.sort_by_key(|n| {
                let is_antidep = units
                    .iter()
                    .any(|u| u.label && class_group_name(u).as_deref() == Some(n));
                !is_antidep
            });
            for (i, name) in names.iter().enumerate() {
                let group: Vec<&ScoredUnit> = units
                    .iter()
                    .filter(|u| class_group_name(u).as_deref() == Some(name))
                    .collect();
                let is_antidep = group.iter().any(|u| u.label);
                if is_antidep {
                    rows.push(detection_row(name, &group, &controls, seed ^ (i as u64 + 1)));
                } else {
                    rows.push(distribution_row(name, &group, Some(&antidep_scores)));
                }
            }
        }
        GroupKey::DoseBin => {
            let bins = ["<=0.5", "0.5-1", "1", ">1"];
            let bin_of = |u: &&ScoredUnit| -> Option<&'static str> {
                let drug = u.drug.as_deref()?;
                let dose = u.dose_mg?;
                let ratio = ddd_normalize(drug, dose).ok()?;
                Some(if ratio <= 0.5 {
                    bins[0]
                } else if ratio < 1.0 {
                    bins[1]
                } else if ratio == 1.0 {
                    bins[2]
                } else {
                    bins[3]
                })
            };
            for bin in bins {
                let group: Vec<&ScoredUnit> = antidep
                    .iter()
                    .filter(|u| bin_of(u) == Some(bin))
                    .cloned()
                    .collect();
                if !group.is_empty() {
                    rows.push(distribution_row(bin, &group, None));
                }
            }
        }
        GroupKey::AhiSeverity => {
            use super::AhiSeverity::*;
            for (i, sev) in [Normal, Mild, Moderate, Severe].iter().enumerate() {
                let group: Vec<&ScoredUnit> = units
                    .iter()
                    .filter(|u| {
                        u.ahi
                            .and_then(|a| ahi_class(a).ok())
                            .map(|s| s == *sev)
                            .unwrap_or(false)
                    })
                    .collect();
                if !group.is_empty() {
                    rows.push(stratum_row(&sev.to_string(), &group, seed ^ (i as u64 + 1)));
                }
            }
        }
        GroupKey::AgeDecade => {
            for (i, decade) in (20..90).step_by(10).enumerate() {
                let group: Vec<&ScoredUnit> = units
                    .iter()
                    .filter(|u| {
                        u.age_years >= decade as f64 && u.age_years < (decade + 10) as f64
                    })
                    .collect();
                if !group.is_empty() {
                    let name = format!("{}-{}", decade, decade + 9);
                    rows.push(stratum_row(&name, &group, seed ^ (i as u64 + 1)));
                }
            }
        }
        GroupKey::Sex => {
            use crate::data::Sex;
            for (i, sex) in [Sex::F, Sex::M].iter().enumerate() {
                let group: Vec<&ScoredUnit> =
                    units.iter().filter(|u| u.sex == *sex).collect();
                if !group.is_empty() {
                    let name = match sex {
                        Sex::F => "F",
                        Sex::M => "M",
                    };
                    rows.push(stratum_row(name, &group, seed ^ (i as u64 + 1)));
                }
            }
        }
        GroupKey::CoTherapy => {
            let buckets: [(&str, Box<dyn Fn(&&ScoredUnit) -> bool>); 3] = [
                ("control", Box::new(|u| u.med_class == MedicationClass::None)),
                ("antidepressant", Box::new(|u| u.label)),
                (
                    "other-medication",
                    Box::new(|u| u.med_class != MedicationClass::None && !u.label),
                ),
            ];
            for (name, pred) in buckets {
                let group: Vec<&ScoredUnit> = units.iter().filter(|u| pred(u)).collect();
                if !group.is_empty() {
                    let vs = if name == "antidepressant" {
                        None
                    } else {
                        Some(antidep_scores.as_slice())
                    };
                    rows.push(distribution_row(name, &group, vs));
                }
            }
        }
    }
    Ok(SubgroupTable { key, rows })
}
