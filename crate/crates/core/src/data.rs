//! Cohort data model, on-disk format, and quality control.
//!
//! A cohort is a set of recorded nights. On disk it is an NDJSON manifest
//! next to one raw little-endian f32 file per signal channel. The manifest
//! header pins the format version; rows are sorted by participant and
//! night so repeated writes of the same cohort are byte-identical.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::Signal;

pub const MANIFEST_FORMAT: &str = "somnadhere-cohort";
pub const MANIFEST_VERSION: u32 = 1;
const EPOCH_LEN_S: f64 = 30.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing signal file {0}")]
    MissingSignalFile(PathBuf),
    #[error("duplicate night key ({participant_id}, {night_id})")]
    DuplicateKey {
        participant_id: String,
        night_id: String,
    },
    #[error("manifest format/version mismatch: found {found}")]
    SchemaVersion { found: String },
    #[error("invalid night ({participant_id}, {night_id}): {msg}")]
    BadNight {
        participant_id: String,
        night_id: String,
        msg: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    W,
    N1,
    N2,
    N3,
    Rem,
}

impl Stage {
    pub fn is_sleep(self) -> bool {
        self != Stage::W
    }

    pub fn code(self) -> char {
        match self {
            Stage::W => 'W',
            Stage::N1 => '1',
            Stage::N2 => '2',
            Stage::N3 => '3',
            Stage::Rem => 'R',
        }
    }

    pub fn from_code(c: char) -> Option<Stage> {
        match c {
            'W' => Some(Stage::W),
            '1' => Some(Stage::N1),
            '2' => Some(Stage::N2),
            '3' => Some(Stage::N3),
            'R' => Some(Stage::Rem),
            _ => None,
        }
    }

    pub const ALL: [Stage; 5] = [Stage::W, Stage::N1, Stage::N2, Stage::N3, Stage::Rem];

    /// Dense index for transition matrices and per-stage tables.
    pub fn index(self) -> usize {
        match self {
            Stage::W => 0,
            Stage::N1 => 1,
            Stage::N2 => 2,
            Stage::N3 => 3,
            Stage::Rem => 4,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::W => "W",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::Rem => "REM",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypnogram {
    pub epochs: Vec<Stage>,
    pub epoch_len_s: f64,
}

impl Hypnogram {
    pub fn new(epochs: Vec<Stage>) -> Self {
        Hypnogram {
            epochs,
            epoch_len_s: EPOCH_LEN_S,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.epochs.len() as f64 * self.epoch_len_s
    }

    pub fn sleep_time_s(&self) -> f64 {
        self.epochs.iter().filter(|s| s.is_sleep()).count() as f64 * self.epoch_len_s
    }

    pub fn encode(&self) -> String {
        self.epochs.iter().map(|s| s.code()).collect()
    }

    pub fn decode(s: &str) -> Option<Hypnogram> {
        let epochs: Option<Vec<Stage>> = s.chars().map(Stage::from_code).collect();
        epochs.filter(|e| !e.is_empty()).map(Hypnogram::new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedicationClass {
    None,
    Ssri,
    Snri,
    Tca,
    Atypical,
    Benzodiazepine,
    Hypnotic,
    Anticonvulsant,
    Antipsychotic,
    Anticholinergic,
}

impl MedicationClass {
    /// The detection target: true for the four antidepressant classes.
    pub fn is_antidepressant(self) -> bool {
        matches!(
            self,
            MedicationClass::Ssri
                | MedicationClass::Snri
                | MedicationClass::Tca
                | MedicationClass::Atypical
        )
    }

    pub const ALL: [MedicationClass; 10] = [
        MedicationClass::None,
        MedicationClass::Ssri,
        MedicationClass::Snri,
        MedicationClass::Tca,
        MedicationClass::Atypical,
        MedicationClass::Benzodiazepine,
        MedicationClass::Hypnotic,
        MedicationClass::Anticonvulsant,
        MedicationClass::Antipsychotic,
        MedicationClass::Anticholinergic,
    ];
}

impl fmt::Display for MedicationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MedicationClass::None => "None",
            MedicationClass::Ssri => "SSRI",
            MedicationClass::Snri => "SNRI",
            MedicationClass::Tca => "TCA",
            MedicationClass::Atypical => "Atypical",
            MedicationClass::Benzodiazepine => "Benzodiazepine",
            MedicationClass::Hypnotic => "Hypnotic",
            MedicationClass::Anticonvulsant => "Anticonvulsant",
            MedicationClass::Antipsychotic => "Antipsychotic",
            MedicationClass::Anticholinergic => "Anticholinergic",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedicationStatus {
    pub class: MedicationClass,
    pub drug: Option<String>,
    pub dose_mg: Option<f64>,
}

impl MedicationStatus {
    pub fn none() -> Self {
        MedicationStatus {
            class: MedicationClass::None,
            drug: None,
            dose_mg: None,
        }
    }

    pub fn label(&self) -> bool {
        self.class.is_antidepressant()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NightRecord {
    pub participant_id: String,
    pub night_id: String,
    pub phase_id: u32,
    pub respiration: Signal,
    pub eeg: Option<Signal>,
    pub hypnogram: Option<Hypnogram>,
    pub meds: MedicationStatus,
    pub ahi: Option<f64>,
    pub age_years: f64,
    pub sex: Sex,
}

impl NightRecord {
    /// Sleep duration for quality control: scored sleep when a hypnogram
    /// exists, otherwise the full recording length.
    pub fn sleep_hours(&self) -> f64 {
        match &self.hypnogram {
            Some(h) => h.sleep_time_s() / 3600.0,
            None => self.respiration.duration_s() / 3600.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| DataError::BadNight {
            participant_id: self.participant_id.clone(),
            night_id: self.night_id.clone(),
            msg,
        };
        for (name, id) in [
            ("participant_id", &self.participant_id),
            ("night_id", &self.night_id),
        ] {
            if id.is_empty()
                || !id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(bad(format!("{name} must be non-empty [A-Za-z0-9_-]")));
            }
        }
        if !(self.respiration.rate_hz > 0.0) || self.respiration.is_empty() {
            return Err(bad("respiration signal empty or rate not positive".into()));
        }
        if let Some(eeg) = &self.eeg {
            if !(eeg.rate_hz > 0.0) || eeg.is_empty() {
                return Err(bad("eeg signal empty or rate not positive".into()));
            }
        }
        if self.meds.dose_mg.is_some() && self.meds.drug.is_none() {
            return Err(bad("dose_mg without drug".into()));
        }
        if let Some(d) = self.meds.dose_mg {
            if !(d >= 0.0) {
                return Err(bad(format!("negative dose_mg {d}")));
            }
        }
        if let Some(a) = self.ahi {
            if !(a >= 0.0) {
                return Err(bad(format!("negative ahi {a}")));
            }
        }
        if let Some(h) = &self.hypnogram {
            if h.epochs.is_empty() {
                return Err(bad("empty hypnogram".into()));
            }
            if h.epoch_len_s != EPOCH_LEN_S {
                return Err(bad(format!(
                    "manifest format stores {EPOCH_LEN_S} s epochs, got {}",
                    h.epoch_len_s
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct Cohort {
    pub nights: Vec<NightRecord>,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn new(mut nights: Vec<NightRecord>, provenance: Provenance) -> Result<Self, DataError> {
        nights.sort_by(|a, b| {
            (a.participant_id.as_str(), a.night_id.as_str())
                .cmp(&(b.participant_id.as_str(), b.night_id.as_str()))
        });
        let mut seen = HashSet::new();
        for n in &nights {
            n.validate()?;
            if !seen.insert((n.participant_id.clone(), n.night_id.clone())) {
                return Err(DataError::DuplicateKey {
                    participant_id: n.participant_id.clone(),
                    night_id: n.night_id.clone(),
                });
            }
        }
        Ok(Cohort { nights, provenance })
    }

    pub fn participant_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .nights
            .iter()
            .map(|n| n.participant_id.clone())
            .collect();
        ids.dedup();
        ids
    }

    pub fn len(&self) -> usize {
        self.nights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nights.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRow {
    participant_id: String,
    night_id: String,
    phase_id: u32,
    resp_file: String,
    resp_hz: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eeg_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eeg_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hypnogram: Option<String>,
    med_class: MedicationClass,
    #[serde(skip_serializing_if = "Option::is_none")]
    drug: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dose_mg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ahi: Option<f64>,
    age: f64,
    sex: Sex,
}

fn write_signal(path: &Path, sig: &Signal) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(sig.samples.len() * 4);
    for &s in &sig.samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_signal(path: &Path, rate_hz: f64) -> Result<Signal, DataError> {
    if !path.exists() {
        return Err(DataError::MissingSignalFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() % 4 != 0 {
        return Err(DataError::Parse {
            line: 0,
            msg: format!("signal file {} size not a multiple of 4", path.display()),
        });
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Signal::new(samples, rate_hz))
}

/// Streaming counterpart of [`write_cohort`]. Signal files are written as
/// nights arrive, so a cohort far larger than memory can be persisted one
/// night at a time; `add_night` takes `&self` and distinct nights touch
/// distinct files, so producers may call it from multiple threads. Manifest
/// rows are buffered, sorted, and checked for duplicates at `finish`, which
/// makes the manifest bytes independent of arrival order.
pub struct CohortWriter {
    dir: PathBuf,
    seed: Option<u64>,
    rows: std::sync::Mutex<Vec<ManifestRow>>,
}

impl CohortWriter {
    pub fn create(dir: &Path, seed: Option<u64>) -> Result<Self, DataError> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(CohortWriter {
            dir: dir.to_path_buf(),
            seed,
            rows: std::sync::Mutex::new(Vec::new()),
        })
    }

    pub fn add_night(&self, n: &NightRecord) -> Result<(), DataError> {
        n.validate()?;
        let resp_file = format!("{}_{}_resp.f32", n.participant_id, n.night_id);
        write_signal(&self.dir.join(&resp_file), &n.respiration)?;
        let eeg_file = match &n.eeg {
            Some(eeg) => {
                let name = format!("{}_{}_eeg.f32", n.participant_id, n.night_id);
                write_signal(&self.dir.join(&name), eeg)?;
                Some(name)
            }
            None => None,
        };
        let row = ManifestRow {
            participant_id: n.participant_id.clone(),
            night_id: n.night_id.clone(),
            phase_id: n.phase_id,
            resp_file,
            resp_hz: n.respiration.rate_hz,
            eeg_file,
            eeg_hz: n.eeg.as_ref().map(|e| e.rate_hz),
            hypnogram: n.hypnogram.as_ref().map(|h| h.encode()),
            med_class: n.meds.class,
            drug: n.meds.drug.clone(),
            dose_mg: n.meds.dose_mg,
            ahi: n.ahi,
            age: n.age_years,
            sex: n.sex,
        };
        self.rows.lock().unwrap().push(row);
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf, DataError> {
        let mut rows = self.rows.into_inner().unwrap();
        rows.sort_by(|a, b| {
            (a.participant_id.as_str(), a.night_id.as_str())
                .cmp(&(b.participant_id.as_str(), b.night_id.as_str()))
        });
        for pair in rows.windows(2) {
            if pair[0].participant_id == pair[1].participant_id
                && pair[0].night_id == pair[1].night_id
            {
                return Err(DataError::DuplicateKey {
                    participant_id: pair[1].participant_id.clone(),
                    night_id: pair[1].night_id.clone(),
                });
            }
        }
        let manifest_path = self.dir.join("manifest.ndjson");
        let mut out = Vec::new();
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            seed: self.seed,
        };
        writeln!(out, "{}", serde_json::to_string(&header).unwrap()).unwrap();
        for row in &rows {
            writeln!(out, "{}", serde_json::to_string(row).unwrap()).unwrap();
        }
        fs::write(&manifest_path, out).map_err(|source| DataError::Io {
            path: manifest_path.clone(),
            source,
        })?;
        Ok(manifest_path)
    }
}

/// Writes the cohort as `manifest.ndjson` plus raw f32 signal files in
/// `dir`, returning the manifest path. Writing the same cohort twice
/// produces identical bytes.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<PathBuf, DataError> {
    let writer = CohortWriter::create(dir, cohort.provenance.seed)?;
    for n in &cohort.nights {
        writer.add_night(n)?;
    }
    writer.finish()
}

/// One manifest row plus the directory it resolves against. Metadata is
/// available immediately; signals stay on disk until [`NightHandle::load`],
/// so a caller can walk a cohort far larger than memory one night at a time.
#[derive(Debug, Clone)]
pub struct NightHandle {
    dir: PathBuf,
    row: ManifestRow,
    line: usize,
}

impl NightHandle {
    pub fn participant_id(&self) -> &str {
        &self.row.participant_id
    }

    pub fn night_id(&self) -> &str {
        &self.row.night_id
    }

    pub fn phase_id(&self) -> u32 {
        self.row.phase_id
    }

    pub fn meds(&self) -> MedicationStatus {
        MedicationStatus {
            class: self.row.med_class,
            drug: self.row.drug.clone(),
            dose_mg: self.row.dose_mg,
        }
    }

    pub fn label(&self) -> bool {
        self.row.med_class.is_antidepressant()
    }

    pub fn ahi(&self) -> Option<f64> {
        self.row.ahi
    }

    pub fn age_years(&self) -> f64 {
        self.row.age
    }

    pub fn sex(&self) -> Sex {
        self.row.sex
    }

    pub fn has_eeg(&self) -> bool {
        self.row.eeg_file.is_some()
    }

    pub fn hypnogram(&self) -> Result<Option<Hypnogram>, DataError> {
        match &self.row.hypnogram {
            Some(s) => Hypnogram::decode(s).map(Some).ok_or(DataError::Parse {
                line: self.line,
                msg: "bad hypnogram string".into(),
            }),
            None => Ok(None),
        }
    }

    /// Sleep duration without reading any signal: scored sleep when a
    /// hypnogram exists, otherwise the respiration file length (raw f32
    /// samples) over its rate. Matches [`NightRecord::sleep_hours`].
    pub fn sleep_hours(&self) -> Result<f64, DataError> {
        if let Some(h) = self.hypnogram()? {
            return Ok(h.sleep_time_s() / 3600.0);
        }
        let path = self.dir.join(&self.row.resp_file);
        let meta = fs::metadata(&path).map_err(|_| DataError::MissingSignalFile(path.clone()))?;
        let n_samples = (meta.len() / 4) as f64;
        Ok(n_samples / self.row.resp_hz / 3600.0)
    }

    /// Paths of this night's signal files, respiration first.
    pub fn signal_files(&self) -> Vec<PathBuf> {
        let mut files = vec![self.dir.join(&self.row.resp_file)];
        if let Some(f) = &self.row.eeg_file {
            files.push(self.dir.join(f));
        }
        files
    }

    /// Reads the signal files and materializes the full record.
    pub fn load(&self) -> Result<NightRecord, DataError> {
        let respiration = read_signal(&self.dir.join(&self.row.resp_file), self.row.resp_hz)?;
        let eeg = match (&self.row.eeg_file, self.row.eeg_hz) {
            (Some(f), Some(hz)) => Some(read_signal(&self.dir.join(f), hz)?),
            _ => None,
        };
        Ok(NightRecord {
            participant_id: self.row.participant_id.clone(),
            night_id: self.row.night_id.clone(),
            phase_id: self.row.phase_id,
            respiration,
            eeg,
            hypnogram: self.hypnogram()?,
            meds: self.meds(),
            ahi: self.row.ahi,
            age_years: self.row.age,
            sex: self.row.sex,
        })
    }
}

/// Parses a manifest into per-night handles without touching signal files.
/// Handles come back sorted by (participant, night) with duplicates rejected,
/// mirroring [`Cohort::new`].
pub fn cohort_handles(manifest_path: &Path) -> Result<(Provenance, Vec<NightHandle>), DataError> {
    let file = fs::File::open(manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header_line) = lines.next().ok_or(DataError::Parse {
        line: 1,
        msg: "empty manifest".into(),
    })?;
    let header_line = header_line.map_err(|source| DataError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let header: ManifestHeader =
        serde_json::from_str(&header_line).map_err(|e| DataError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(DataError::SchemaVersion {
            found: format!("{} v{}", header.format, header.version),
        });
    }

    let mut handles = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|source| DataError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if let (Some(f), None) = (&row.eeg_file, row.eeg_hz) {
            return Err(DataError::Parse {
                line: idx + 1,
                msg: format!("eeg_file {f} without eeg_hz"),
            });
        }
        handles.push(NightHandle {
            dir: dir.clone(),
            row,
            line: idx + 1,
        });
    }
    handles.sort_by(|a, b| {
        (a.participant_id(), a.night_id()).cmp(&(b.participant_id(), b.night_id()))
    });
    for pair in handles.windows(2) {
        if pair[0].participant_id() == pair[1].participant_id()
            && pair[0].night_id() == pair[1].night_id()
        {
            return Err(DataError::DuplicateKey {
                participant_id: pair[1].participant_id().to_string(),
                night_id: pair[1].night_id().to_string(),
            });
        }
    }
    let provenance = Provenance {
        source: manifest_path.display().to_string(),
        seed: header.seed,
    };
    Ok((provenance, handles))
}

/// Loads a cohort from its manifest, materializing all signals.
pub fn load_cohort(manifest_path: &Path) -> Result<Cohort, DataError> {
    let (provenance, handles) = cohort_handles(manifest_path)?;
    let nights = handles
        .iter()
        .map(|h| h.load())
        .collect::<Result<Vec<_>, _>>()?;
    Cohort::new(nights, provenance)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exclusion {
    pub participant_id: String,
    pub night_id: String,
    pub sleep_hours: f64,
    pub reason: String,
}

impl Exclusion {
    pub fn short_sleep(
        participant_id: String,
        night_id: String,
        sleep_hours: f64,
        min_sleep_hours: f64,
    ) -> Exclusion {
        Exclusion {
            participant_id,
            night_id,
            sleep_hours,
            reason: format!("sleep {sleep_hours:.2} h below {min_sleep_hours:.1} h minimum"),
        }
    }
}

/// Drops nights with less than `min_sleep_hours` of sleep (strictly less;
/// exactly the threshold is retained) and logs each exclusion.
pub fn qc_filter(cohort: Cohort, min_sleep_hours: f64) -> (Cohort, Vec<Exclusion>) {
    let mut kept = Vec::with_capacity(cohort.nights.len());
    let mut log = Vec::new();
    for night in cohort.nights {
        let hours = night.sleep_hours();
        if hours < min_sleep_hours {
            log.push(Exclusion::short_sleep(
                night.participant_id.clone(),
                night.night_id.clone(),
                hours,
                min_sleep_hours,
            ));
        } else {
            kept.push(night);
        }
    }
    (
        Cohort {
            nights: kept,
            provenance: cohort.provenance,
        },
        log,
    )
}
