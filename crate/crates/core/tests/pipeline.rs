use headgan_core::audio::Extractors;
use headgan_core::inference::{self, Driver, Source};
use headgan_core::networks::ArchConfig;
use headgan_core::synthetic::{Dataset, SynthConfig};
use headgan_core::training::{self, TrainConfig, TrainData};
use headgan_core::Error;

fn small_dataset() -> Dataset {
    Dataset::generate(21, 2, 4, &SynthConfig::default()).unwrap()
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset();
    let manifest = ds.save(dir.path(), 21).unwrap();
    assert_eq!(manifest.num_sequences, 2);
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.model, ds.model);
    assert_eq!(back.sequences, ds.sequences);
}

#[test]
fn trained_checkpoint_reenacts_any_driver() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset();
    let config = TrainConfig {
        steps: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let ex = Extractors::toy();
    let data = TrainData::new(ds.clone(), &config.arch(), config.audio_half_window, &ex).unwrap();
    let mut seen = Vec::new();
    let out = training::train(&config, &data, dir.path(), None, |r| seen.push(r.step)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    let log = training::read_log(&out.log).unwrap();
    assert!(!log.is_empty());
    assert!(log
        .iter()
        .all(|r| (1..=2).contains(&r.step) && r.value.is_finite()));

    let source = Source::from_sequence(&ds.sequences[0]);
    let driver = Driver::from_sequence(&ds.sequences[1]);
    let r = inference::reenact_checkpoint(
        &out.final_checkpoint,
        Some(&ArchConfig::desk()),
        &ds.model,
        &source,
        &driver,
        &ex,
    )
    .unwrap();
    assert_eq!(r.frames.len(), driver.len());
    for f in &r.frames {
        assert_eq!(f.shape(), &[3, 64, 64]);
        assert!(f.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    let wrong = ArchConfig::paper();
    let err = inference::reenact_checkpoint(
        &out.final_checkpoint,
        Some(&wrong),
        &ds.model,
        &source,
        &driver,
        &ex,
    )
    .unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch(_)));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Dataset::load(&dir.path().join("nope")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
}
