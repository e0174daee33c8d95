//! Hand-engineered night features and random-forest baselines.
//!
//! Two extractors summarize a night independently of the transformer:
//! [`sleep_features`] reads the hypnogram (stage durations, latencies,
//! fragmentation, transition counts) and [`eeg_band_features`] reads the
//! spectrogram (band powers for the whole night, per stage, and as
//! first-cycle ratios). [`rf_train`] / [`rf_predict`] turn either vector
//! into a score in `[0, 1]`, giving the model a classical reference point.

mod forest;

pub use forest::{
    rf_predict, rf_predict_batch, rf_train, rf_train_oob, Forest, ForestParams, Tree, TreeNode,
};

use std::fs::File;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::data::{Hypnogram, Sex, Stage};
use crate::dsp::Spectrogram;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("hypnogram has no sleep epochs")]
    NoSleep,
    #[error("spectrogram has {windows} windows but the hypnogram has {epochs} epochs")]
    WindowMismatch { windows: usize, epochs: usize },
    #[error("feature vector has {got} values, expected {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("feature value at row {row}, column {col} is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("training labels are all the same class: need both positives and negatives")]
    SingleClass,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("bad feature csv: {0}")]
    BadCsv(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// EEG analysis bands in Hz, half-open `[lo, hi)`: slow oscillation, delta,
/// theta, alpha, sigma, beta I, beta II.
pub const BAND_EDGES_HZ: [(f64, f64); 7] = [
    (0.0, 1.0),
    (1.0, 4.0),
    (4.0, 8.0),
    (8.0, 12.0),
    (12.0, 16.0),
    (16.0, 24.0),
    (24.0, 32.0),
];

pub const BAND_NAMES: [&str; 7] = ["so", "delta", "theta", "alpha", "sigma", "beta1", "beta2"];

/// Stages whose first-cycle power ratios are reported.
pub const CYCLE_STAGES: [Stage; 3] = [Stage::N2, Stage::N3, Stage::Rem];

fn stage_slug(stage: Stage) -> &'static str {
    match stage {
        Stage::W => "w",
        Stage::N1 => "n1",
        Stage::N2 => "n2",
        Stage::N3 => "n3",
        Stage::Rem => "rem",
    }
}

/// Hypnogram summary for one night. Durations are minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct SleepFeatures {
    /// Minutes per stage, indexed by [`Stage::index`].
    pub stage_min: [f64; 5],
    pub total_sleep_min: f64,
    pub sleep_onset_latency_min: f64,
    /// Minutes from sleep onset to the first REM epoch; absent when the
    /// night has no REM.
    pub rem_onset_latency_min: Option<f64>,
    /// Wake minutes between sleep onset and the final sleep epoch.
    pub waso_min: f64,
    /// Maximal wake runs between sleep onset and the final sleep epoch.
    pub n_awakenings: u32,
    /// Total sleep over time in bed, in `[0, 1]`.
    pub sleep_efficiency: f64,
    /// `transitions[from][to]` counts over consecutive epoch pairs, indexed
    /// by [`Stage::index`]. Entries sum to `epochs - 1`.
    pub transitions: [[u32; 5]; 5],
    pub age_years: f64,
    pub sex: Sex,
}

impl SleepFeatures {
    pub const LEN: usize = 38;

    /// Column order of [`Self::to_vector`].
    pub fn column_names() -> Vec<String> {
        let mut names: Vec<String> = [
            "wake_min",
            "n1_min",
            "n2_min",
            "n3_min",
            "rem_min",
            "total_sleep_min",
            "sleep_onset_latency_min",
            "rem_onset_latency_min",
            "waso_min",
            "n_awakenings",
            "sleep_efficiency",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for from in Stage::ALL {
            for to in Stage::ALL {
                names.push(format!("trans_{}_{}", stage_slug(from), stage_slug(to)));
            }
        }
        names.push("age_years".to_string());
        names.push("sex_male".to_string());
        names
    }

    pub fn to_vector(&self) -> Vec<Option<f64>> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.extend(self.stage_min.iter().map(|&m| Some(m)));
        v.push(Some(self.total_sleep_min));
        v.push(Some(self.sleep_onset_latency_min));
        v.push(self.rem_onset_latency_min);
        v.push(Some(self.waso_min));
        v.push(Some(f64::from(self.n_awakenings)));
        v.push(Some(self.sleep_efficiency));
        for row in &self.transitions {
            v.extend(row.iter().map(|&c| Some(f64::from(c))));
        }
        v.push(Some(self.age_years));
        v.push(Some(match self.sex {
            Sex::M => 1.0,
            Sex::F => 0.0,
        }));
        v
    }
}

/// Summarizes a hypnogram. Sleep onset is the first non-wake epoch, REM
/// latency runs from onset to the first REM epoch, and wake after sleep
/// onset counts wake epochs strictly between onset and the final sleep
/// epoch, so trailing wake lowers efficiency but not WASO.
pub fn sleep_features(
    hyp: &Hypnogram,
    age_years: f64,
    sex: Sex,
) -> Result<SleepFeatures, FeatureError> {
    let epm = hyp.epoch_len_s / 60.0;
    let onset = hyp
        .epochs
        .iter()
        .position(|s| s.is_sleep())
        .ok_or(FeatureError::NoSleep)?;
    let last_sleep = hyp.epochs.iter().rposition(|s| s.is_sleep()).unwrap();

    let mut stage_min = [0.0f64; 5];
    for &s in &hyp.epochs {
        stage_min[s.index()] += epm;
    }
    let total_sleep_min = stage_min[1] + stage_min[2] + stage_min[3] + stage_min[4];

    let rem_onset_latency_min = hyp
        .epochs
        .iter()
        .position(|&s| s == Stage::Rem)
        .map(|i| (i - onset) as f64 * epm);

    let mut waso_epochs = 0u32;
    let mut n_awakenings = 0u32;
    let mut in_wake_run = false;
    for &s in &hyp.epochs[onset..=last_sleep] {
        if s == Stage::W {
            waso_epochs += 1;
            if !in_wake_run {
                n_awakenings += 1;
                in_wake_run = true;
            }
        } else {
            in_wake_run = false;
        }
    }

    let mut transitions = [[0u32; 5]; 5];
    for pair in hyp.epochs.windows(2) {
        transitions[pair[0].index()][pair[1].index()] += 1;
    }

    Ok(SleepFeatures {
        stage_min,
        total_sleep_min,
        sleep_onset_latency_min: onset as f64 * epm,
        rem_onset_latency_min,
        waso_min: f64::from(waso_epochs) * epm,
        n_awakenings,
        sleep_efficiency: total_sleep_min / (hyp.epochs.len() as f64 * epm),
        transitions,
        age_years,
        sex,
    })
}

/// Spectrogram band summary for one night: 63 values with presence flags.
/// Stage-dependent entries are absent when the stage never occurs, and
/// first-cycle ratios are additionally absent when the stage never occurs
/// inside the first cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct BandFeatures {
    /// Mean power per band over every window, indexed like [`BAND_EDGES_HZ`].
    pub whole_night: [f64; 7],
    /// Mean power per band over the windows of each stage, indexed by
    /// [`Stage::index`] then band.
    pub per_stage: [[Option<f64>; 7]; 5],
    /// First-cycle over whole-night power ratio per band, computed within
    /// the same stage, indexed by [`CYCLE_STAGES`] then band.
    pub cycle1_ratio: [[Option<f64>; 7]; 3],
}

impl BandFeatures {
    pub const LEN: usize = 63;

    /// Column order of [`Self::to_vector`].
    pub fn column_names() -> Vec<String> {
        let mut names = Vec::with_capacity(Self::LEN);
        for band in BAND_NAMES {
            names.push(format!("night_{band}"));
        }
        for stage in Stage::ALL {
            for band in BAND_NAMES {
                names.push(format!("{}_{band}", stage_slug(stage)));
            }
        }
        for stage in CYCLE_STAGES {
            for band in BAND_NAMES {
                names.push(format!("cycle1_{}_{band}_ratio", stage_slug(stage)));
            }
        }
        names
    }

    pub fn to_vector(&self) -> Vec<Option<f64>> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.extend(self.whole_night.iter().map(|&p| Some(p)));
        for row in &self.per_stage {
            v.extend_from_slice(row);
        }
        for row in &self.cycle1_ratio {
            v.extend_from_slice(row);
        }
        v
    }
}

/// Exclusive epoch index ending the first sleep cycle: sleep onset through
/// the end of the first REM run, or the first 90 minutes of sleep when the
/// night has no REM.
fn first_cycle_end(hyp: &Hypnogram, onset: usize) -> usize {
    if let Some(first_rem) = hyp.epochs.iter().position(|&s| s == Stage::Rem) {
        let mut end = first_rem;
        while end < hyp.epochs.len() && hyp.epochs[end] == Stage::Rem {
            end += 1;
        }
        return end;
    }
    let need = (90.0 * 60.0 / hyp.epoch_len_s).round() as usize;
    let mut sleep_seen = 0;
    for (i, s) in hyp.epochs.iter().enumerate().skip(onset) {
        if s.is_sleep() {
            sleep_seen += 1;
            if sleep_seen == need {
                return i + 1;
            }
        }
    }
    hyp.epochs.len()
}

/// Band powers from a spectrogram whose windows align 1:1 with the
/// hypnogram's 30 s epochs. Band power is the mean over the band's bins and
/// the selected windows.
pub fn eeg_band_features(
    spg: &Spectrogram,
    hyp: &Hypnogram,
) -> Result<BandFeatures, FeatureError> {
    if spg.n_windows != hyp.epochs.len() {
        return Err(FeatureError::WindowMismatch {
            windows: spg.n_windows,
            epochs: hyp.epochs.len(),
        });
    }
    let onset = hyp
        .epochs
        .iter()
        .position(|s| s.is_sleep())
        .ok_or(FeatureError::NoSleep)?;

    let all: Vec<usize> = (0..spg.n_windows).collect();
    let mut whole_night = [0.0f64; 7];
    for (b, &(lo, hi)) in BAND_EDGES_HZ.iter().enumerate() {
        whole_night[b] = spg.band_mean(lo, hi, &all);
    }

    let mut per_stage = [[None; 7]; 5];
    for stage in Stage::ALL {
        let wins: Vec<usize> = (0..spg.n_windows)
            .filter(|&w| hyp.epochs[w] == stage)
            .collect();
        if wins.is_empty() {
            continue;
        }
        for (b, &(lo, hi)) in BAND_EDGES_HZ.iter().enumerate() {
            per_stage[stage.index()][b] = Some(spg.band_mean(lo, hi, &wins));
        }
    }

    let cycle_end = first_cycle_end(hyp, onset);
    let mut cycle1_ratio = [[None; 7]; 3];
    for (si, &stage) in CYCLE_STAGES.iter().enumerate() {
        let cyc: Vec<usize> = (onset..cycle_end)
            .filter(|&w| hyp.epochs[w] == stage)
            .collect();
        if cyc.is_empty() {
            continue;
        }
        for (b, &(lo, hi)) in BAND_EDGES_HZ.iter().enumerate() {
            let night = per_stage[stage.index()][b].unwrap();
            if night > 0.0 {
                cycle1_ratio[si][b] = Some(spg.band_mean(lo, hi, &cyc) / night);
            }
        }
    }

    Ok(BandFeatures {
        whole_night,
        per_stage,
        cycle1_ratio,
    })
}

/// A labeled feature table with a fixed column order.
///
/// Round-trips as CSV with header `unit_id,label,<columns...>`, labels as
/// `0`/`1`, and absent values as empty cells. Floats print in Rust's
/// shortest round-trip form, so a write/read cycle reproduces the exact
/// bits.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<String>,
    pub unit_ids: Vec<String>,
    pub labels: Vec<bool>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl FeatureMatrix {
    pub fn new(columns: Vec<String>) -> Self {
        FeatureMatrix {
            columns,
            unit_ids: Vec::new(),
            labels: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn push(
        &mut self,
        unit_id: impl Into<String>,
        label: bool,
        values: Vec<Option<f64>>,
    ) -> Result<(), FeatureError> {
        if values.len() != self.columns.len() {
            return Err(FeatureError::DimensionMismatch {
                got: values.len(),
                want: self.columns.len(),
            });
        }
        self.unit_ids.push(unit_id.into());
        self.labels.push(label);
        self.rows.push(values);
        Ok(())
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), FeatureError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = Vec::with_capacity(self.columns.len() + 2);
        header.push("unit_id".to_string());
        header.push("label".to_string());
        header.extend(self.columns.iter().cloned());
        out.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.rows.len() {
            record.clear();
            record.push(self.unit_ids[i].clone());
            record.push(if self.labels[i] { "1" } else { "0" }.to_string());
            for v in &self.rows[i] {
                record.push(v.map(|x| x.to_string()).unwrap_or_default());
            }
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(r: R) -> Result<FeatureMatrix, FeatureError> {
        let mut reader = csv::Reader::from_reader(r);
        let header = reader.headers()?.clone();
        if header.len() < 2 || &header[0] != "unit_id" || &header[1] != "label" {
            return Err(FeatureError::BadCsv(
                "header must start with unit_id,label".to_string(),
            ));
        }
        let columns: Vec<String> = header.iter().skip(2).map(|s| s.to_string()).collect();
        let mut m = FeatureMatrix::new(columns);
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != header.len() {
                return Err(FeatureError::BadCsv(format!(
                    "row {} has {} fields, expected {}",
                    line + 1,
                    record.len(),
                    header.len()
                )));
            }
            let label = match &record[1] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(FeatureError::BadCsv(format!(
                        "row {} has label {other:?}, expected 0 or 1",
                        line + 1
                    )))
                }
            };
            let mut values = Vec::with_capacity(m.columns.len());
            for field in record.iter().skip(2) {
                if field.is_empty() {
                    values.push(None);
                } else {
                    let v: f64 = field.parse().map_err(|_| {
                        FeatureError::BadCsv(format!(
                            "row {} has non-numeric value {field:?}",
                            line + 1
                        ))
                    })?;
                    values.push(Some(v));
                }
            }
            m.push(record[0].to_string(), label, values)?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        self.write_csv(io::BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<FeatureMatrix, FeatureError> {
        Self::read_csv(io::BufReader::new(File::open(path)?))
    }
}
