//! On-disk cohort format: round trips, determinism, and quality control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use somnadhere_core::data::{
    cohort_handles, load_cohort, qc_filter, write_cohort, Cohort, CohortWriter, DataError,
    Hypnogram, MedicationClass, MedicationStatus, NightRecord, Provenance, Sex, Stage,
};
use somnadhere_core::dsp::Signal;

fn random_night(rng: &mut ChaCha8Rng, participant: usize, night: usize) -> NightRecord {
    let n_resp = rng.gen_range(600..2000);
    let respiration = Signal::new(
        (0..n_resp).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        10.0,
    );
    let eeg = if rng.gen_bool(0.7) {
        let n = rng.gen_range(1000..4000);
        Some(Signal::new(
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            64.0,
        ))
    } else {
        None
    };
    let hypnogram = if rng.gen_bool(0.7) {
        let n = rng.gen_range(10..900);
        Some(Hypnogram::new(
            (0..n)
                .map(|_| Stage::ALL[rng.gen_range(0..Stage::ALL.len())])
                .collect(),
        ))
    } else {
        None
    };
    let class = MedicationClass::ALL[rng.gen_range(0..MedicationClass::ALL.len())];
    let drug = if class != MedicationClass::None && rng.gen_bool(0.8) {
        Some(format!("drug{}", rng.gen_range(0..5)))
    } else {
        None
    };
    let dose_mg = drug.as_ref().and_then(|_| {
        if rng.gen_bool(0.8) {
            Some(rng.gen_range(5.0..300.0f64).round())
        } else {
            None
        }
    });
    NightRecord {
        participant_id: format!("p{participant:04}"),
        night_id: format!("n{night:03}"),
        phase_id: rng.gen_range(0..3),
        respiration,
        eeg,
        hypnogram,
        meds: MedicationStatus {
            class,
            drug,
            dose_mg,
        },
        ahi: if rng.gen_bool(0.5) {
            Some(rng.gen_range(0.0..40.0))
        } else {
            None
        },
        age_years: rng.gen_range(20.0..85.0f64).round(),
        sex: if rng.gen_bool(0.5) { Sex::F } else { Sex::M },
    }
}

fn random_cohort(seed: u64, n_nights: usize) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nights = (0..n_nights)
        .map(|i| random_night(&mut rng, i / 3, i % 3))
        .collect();
    Cohort::new(
        nights,
        Provenance {
            source: "generated".into(),
            seed: Some(seed),
        },
    )
    .unwrap()
}

#[test]
fn round_trip_preserves_every_field_and_sample() {
    let cohort = random_cohort(42, 50);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_cohort(&cohort, dir.path()).unwrap();
    let loaded = load_cohort(&manifest).unwrap();

    assert_eq!(loaded.nights.len(), cohort.nights.len());
    assert_eq!(loaded.provenance.seed, Some(42));
    for (a, b) in cohort.nights.iter().zip(&loaded.nights) {
        assert_eq!(a, b, "night ({}, {})", a.participant_id, a.night_id);
    }
}

#[test]
fn nights_come_back_sorted_by_participant_and_night() {
    let mut cohort = random_cohort(7, 6);
    cohort.nights.reverse();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_cohort(&cohort, dir.path()).unwrap();
    let loaded = load_cohort(&manifest).unwrap();
    let keys: Vec<(String, String)> = loaded
        .nights
        .iter()
        .map(|n| (n.participant_id.clone(), n.night_id.clone()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn missing_signal_file_is_reported() {
    let cohort = random_cohort(3, 4);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_cohort(&cohort, dir.path()).unwrap();
    let resp = dir.path().join(format!(
        "{}_{}_resp.f32",
        cohort.nights[0].participant_id, cohort.nights[0].night_id
    ));
    std::fs::remove_file(&resp).unwrap();
    match load_cohort(&manifest) {
        Err(DataError::MissingSignalFile(p)) => assert_eq!(p, resp),
        other => panic!("expected missing-file error, got {other:?}"),
    }
}

#[test]
fn duplicate_key_is_rejected() {
    let mut cohort = random_cohort(9, 4);
    let dup = cohort.nights[0].clone();
    cohort.nights.push(dup);
    let nights = cohort.nights;
    match Cohort::new(nights, Provenance::default()) {
        Err(DataError::DuplicateKey { .. }) => {}
        other => panic!("expected duplicate-key error, got {other:?}"),
    }
}

#[test]
fn schema_version_mismatch_is_rejected() {
    let cohort = random_cohort(5, 2);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_cohort(&cohort, dir.path()).unwrap();
    let content = std::fs::read_to_string(&manifest).unwrap();
    let mut lines: Vec<String> = content.lines().map(String::from).collect();
    lines[0] = lines[0].replace("\"version\":1", "\"version\":99");
    std::fs::write(&manifest, lines.join("\n")).unwrap();
    match load_cohort(&manifest) {
        Err(DataError::SchemaVersion { found }) => assert!(found.contains("99")),
        other => panic!("expected schema-version error, got {other:?}"),
    }
}

#[test]
fn empty_cohort_writes_header_only() {
    let cohort = Cohort::new(Vec::new(), Provenance::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_cohort(&cohort, dir.path()).unwrap();
    let content = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(content.lines().count(), 1);
    let files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(files.len(), 1, "only the manifest should exist: {files:?}");
    let loaded = load_cohort(&manifest).unwrap();
    assert!(loaded.is_empty());
}

#[test]
fn respiration_only_night_writes_one_signal_file() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut night = random_night(&mut rng, 0, 0);
    night.eeg = None;
    let cohort = Cohort::new(
        vec![night],
        Provenance {
            source: "generated".into(),
            seed: None,
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_cohort(&cohort, dir.path()).unwrap();
    let signal_files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|f| f.ends_with(".f32"))
        .collect();
    assert_eq!(signal_files.len(), 1, "{signal_files:?}");
}

#[test]
fn repeated_writes_hash_identically() {
    let cohort = random_cohort(11, 20);
    let hash_of = |dir: &std::path::Path| -> Vec<u8> {
        let manifest = write_cohort(&cohort, dir).unwrap();
        let bytes = std::fs::read(manifest).unwrap();
        Sha256::digest(&bytes).to_vec()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    assert_eq!(hash_of(d1.path()), hash_of(d2.path()));
}

fn night_with_sleep_hours(id: usize, hours: f64) -> NightRecord {
    let n_epochs = (hours * 3600.0 / 30.0).round() as usize;
    let mut epochs = vec![Stage::N2; n_epochs];
    epochs.insert(0, Stage::W);
    NightRecord {
        participant_id: format!("p{id:04}"),
        night_id: "n000".into(),
        phase_id: 0,
        respiration: Signal::new(vec![0.1; 100], 10.0),
        eeg: None,
        hypnogram: Some(Hypnogram::new(epochs)),
        meds: MedicationStatus::none(),
        ahi: None,
        age_years: 40.0,
        sex: Sex::F,
    }
}

#[test]
fn qc_excludes_short_nights_strictly() {
    let nights = vec![
        night_with_sleep_hours(0, 3.9),
        night_with_sleep_hours(1, 4.0),
        night_with_sleep_hours(2, 7.5),
    ];
    let cohort = Cohort::new(nights, Provenance::default()).unwrap();
    let (kept, log) = qc_filter(cohort, 4.0);
    assert_eq!(kept.len(), 2);
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].participant_id, "p0000");
    assert!((log[0].sleep_hours - 3.9).abs() < 1e-9);
    assert!(kept.nights.iter().any(|n| n.participant_id == "p0001"));
}

#[test]
fn qc_on_100_nights_with_7_short() {
    let mut nights = Vec::new();
    for i in 0..100 {
        let hours = if i < 7 { 2.0 + (i as f64) * 0.25 } else { 6.0 };
        nights.push(night_with_sleep_hours(i, hours));
    }
    let cohort = Cohort::new(nights, Provenance::default()).unwrap();
    let (kept, log) = qc_filter(cohort, 4.0);
    assert_eq!(kept.len(), 93);
    assert_eq!(log.len(), 7);
}

#[test]
fn qc_is_idempotent() {
    let mut nights: Vec<NightRecord> = (0..30)
        .map(|i| night_with_sleep_hours(i, 2.0 + (i as f64) * 0.2))
        .collect();
    // Some nights without hypnograms fall back to recording duration.
    for n in nights.iter_mut().step_by(5) {
        n.hypnogram = None;
        n.respiration = Signal::new(vec![0.1; 3 * 3600 * 10], 10.0);
    }
    let cohort = Cohort::new(nights, Provenance::default()).unwrap();
    let (once, log1) = qc_filter(cohort, 4.0);
    let kept_once: Vec<_> = once
        .nights
        .iter()
        .map(|n| n.participant_id.clone())
        .collect();
    let (twice, log2) = qc_filter(once, 4.0);
    let kept_twice: Vec<_> = twice
        .nights
        .iter()
        .map(|n| n.participant_id.clone())
        .collect();
    assert_eq!(kept_once, kept_twice);
    assert!(!log1.is_empty());
    assert!(log2.is_empty());
}

#[test]
fn qc_without_hypnogram_uses_recording_duration() {
    let mut short = night_with_sleep_hours(0, 8.0);
    short.hypnogram = None;
    short.respiration = Signal::new(vec![0.1; 3 * 3600 * 10], 10.0);
    let mut long = night_with_sleep_hours(1, 8.0);
    long.hypnogram = None;
    long.respiration = Signal::new(vec![0.1; 5 * 3600 * 10], 10.0);
    let cohort = Cohort::new(vec![short, long], Provenance::default()).unwrap();
    let (kept, log) = qc_filter(cohort, 4.0);
    assert_eq!(kept.len(), 1);
    assert_eq!(log.len(), 1);
    assert_eq!(kept.nights[0].participant_id, "p0001");
}

#[test]
fn label_is_pure_function_of_class() {
    for class in MedicationClass::ALL {
        let status = MedicationStatus {
            class,
            drug: None,
            dose_mg: None,
        };
        let expected = matches!(
            class,
            MedicationClass::Ssri
                | MedicationClass::Snri
                | MedicationClass::Tca
                | MedicationClass::Atypical
        );
        assert_eq!(status.label(), expected, "{class}");
        assert_eq!(class.is_antidepressant(), expected, "{class}");
    }
}

#[test]
fn dose_without_drug_fails_validation() {
    let mut night = night_with_sleep_hours(0, 8.0);
    night.meds = MedicationStatus {
        class: MedicationClass::Ssri,
        drug: None,
        dose_mg: Some(20.0),
    };
    assert!(night.validate().is_err());
}

#[test]
fn handles_expose_metadata_and_load_full_records() {
    let cohort = random_cohort(21, 30);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_cohort(&cohort, dir.path()).unwrap();
    let loaded = load_cohort(&manifest).unwrap();
    let (provenance, handles) = cohort_handles(&manifest).unwrap();

    assert_eq!(provenance.seed, Some(21));
    assert_eq!(handles.len(), loaded.nights.len());
    for (h, n) in handles.iter().zip(&loaded.nights) {
        assert_eq!(h.participant_id(), n.participant_id);
        assert_eq!(h.night_id(), n.night_id);
        assert_eq!(h.phase_id(), n.phase_id);
        assert_eq!(h.meds(), n.meds);
        assert_eq!(h.label(), n.meds.label());
        assert_eq!(h.ahi(), n.ahi);
        assert_eq!(h.age_years(), n.age_years);
        assert_eq!(h.sex(), n.sex);
        assert_eq!(h.has_eeg(), n.eeg.is_some());
        assert_eq!(h.hypnogram().unwrap(), n.hypnogram);
        assert_eq!(&h.load().unwrap(), n);
    }
}

#[test]
fn handle_sleep_hours_needs_no_signal_read() {
    let with_hyp = night_with_sleep_hours(0, 6.5);
    let mut without = night_with_sleep_hours(1, 8.0);
    without.hypnogram = None;
    without.respiration = Signal::new(vec![0.1; 5 * 3600 * 10], 10.0);
    let expected: Vec<f64> = [&with_hyp, &without]
        .iter()
        .map(|n| n.sleep_hours())
        .collect();
    let cohort = Cohort::new(vec![with_hyp, without], Provenance::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_cohort(&cohort, dir.path()).unwrap();

    let (_, handles) = cohort_handles(&manifest).unwrap();
    for (h, want) in handles.iter().zip(&expected) {
        assert!((h.sleep_hours().unwrap() - want).abs() < 1e-9);
    }
    // The hypnogram-backed night answers even with its signal file gone.
    std::fs::remove_file(dir.path().join("p0000_n000_resp.f32")).unwrap();
    assert!((handles[0].sleep_hours().unwrap() - expected[0]).abs() < 1e-9);
}

#[test]
fn streaming_writer_output_is_arrival_order_independent() {
    let cohort = random_cohort(13, 24);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    write_cohort(&cohort, dir_a.path()).unwrap();

    let writer = CohortWriter::create(dir_b.path(), cohort.provenance.seed).unwrap();
    for n in cohort.nights.iter().rev() {
        writer.add_night(n).unwrap();
    }
    writer.finish().unwrap();

    let tree_hash = |dir: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                let bytes = std::fs::read(e.path()).unwrap();
                (
                    e.file_name().into_string().unwrap(),
                    Sha256::digest(&bytes).to_vec(),
                )
            })
            .collect();
        entries.sort();
        entries
    };
    assert_eq!(tree_hash(dir_a.path()), tree_hash(dir_b.path()));
}

#[test]
fn streaming_writer_is_deterministic_under_concurrency() {
    let cohort = random_cohort(17, 36);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    write_cohort(&cohort, dir_a.path()).unwrap();

    let writer = CohortWriter::create(dir_b.path(), cohort.provenance.seed).unwrap();
    cohort
        .nights
        .par_iter()
        .try_for_each(|n| writer.add_night(n))
        .unwrap();
    let manifest_b = writer.finish().unwrap();

    let a = std::fs::read(dir_a.path().join("manifest.ndjson")).unwrap();
    let b = std::fs::read(manifest_b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn streaming_writer_rejects_duplicates_at_finish() {
    let cohort = random_cohort(19, 4);
    let dir = tempfile::tempdir().unwrap();
    let writer = CohortWriter::create(dir.path(), None).unwrap();
    writer.add_night(&cohort.nights[0]).unwrap();
    writer.add_night(&cohort.nights[0]).unwrap();
    match writer.finish() {
        Err(DataError::DuplicateKey { .. }) => {}
        other => panic!("expected duplicate-key error, got {other:?}"),
    }
}

#[test]
fn hypnogram_string_round_trips() {
    let h = Hypnogram::new(vec![Stage::W, Stage::N1, Stage::N2, Stage::N3, Stage::Rem]);
    let encoded = h.encode();
    assert_eq!(encoded, "W123R");
    assert_eq!(Hypnogram::decode(&encoded).unwrap(), h);
    assert!(Hypnogram::decode("W12X").is_none());
    assert!(Hypnogram::decode("").is_none());
}
