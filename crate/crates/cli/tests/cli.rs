use std::fs;
use std::path::Path;

use assert_cmd::Command;
use headgan_core::training::{TrainConfig, Trainer};
use predicates::str::contains;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn lab() -> Command {
    let mut c = Command::cargo_bin("headgan-lab").unwrap();
    c.env("HEADGAN_LAB_THREADS", "1").env("RUST_LOG", "warn");
    c
}

fn dir_digest(dir: &Path) -> String {
    let mut names: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&p).unwrap());
    }
    hex::encode(h.finalize())
}

fn synth(dir: &Path, seed: u64, n: usize, frames: usize) {
    lab()
        .args([
            "synth",
            "--seed",
            &seed.to_string(),
            "--num-sequences",
            &n.to_string(),
        ])
        .args(["--frames", &frames.to_string(), "--out"])
        .arg(dir)
        .assert()
        .success();
}

fn train(data: &Path, out: &Path, steps: u64) {
    lab()
        .args(["train", "--steps", &steps.to_string(), "--data"])
        .arg(data)
        .arg("--out")
        .arg(out)
        .assert()
        .success();
}

#[test]
fn synth_is_deterministic_and_counts_sequences() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 5, 2, 3);
    synth(&b, 5, 2, 3);
    assert_eq!(dir_digest(&a), dir_digest(&b));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["num_sequences"], 2);
    assert_eq!(manifest["frames"], 3);
}

#[test]
fn synth_rejects_non_empty_output_without_force() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("keep.txt"), "x").unwrap();
    lab()
        .args(["synth", "--frames", "3", "--num-sequences", "1", "--out"])
        .arg(tmp.path())
        .assert()
        .code(2)
        .stderr(contains("--force"));
    lab()
        .args([
            "synth",
            "--frames",
            "3",
            "--num-sequences",
            "1",
            "--force",
            "--out",
        ])
        .arg(tmp.path())
        .assert()
        .success();
}

#[test]
fn synth_rejects_fewer_than_three_frames() {
    let tmp = TempDir::new().unwrap();
    lab()
        .args(["synth", "--frames", "2", "--out"])
        .arg(tmp.path().join("d"))
        .assert()
        .code(2);
}

#[test]
fn print_config_lists_defaults() {
    lab()
        .args(["train", "--print-config"])
        .assert()
        .success()
        .stdout(contains("learning_rate = 0.0002"))
        .stdout(contains("batch_size = 4"));
}

#[test]
fn config_errors_use_config_exit_code() {
    let tmp = TempDir::new().unwrap();
    let bad_key = tmp.path().join("a.cfg");
    fs::write(&bad_key, "steps = 1\nwarp_speed = 9\n").unwrap();
    lab()
        .args(["train", "--print-config", "--config"])
        .arg(&bad_key)
        .assert()
        .code(3)
        .stderr(contains("warp_speed"));
    let bad_line = tmp.path().join("b.cfg");
    fs::write(&bad_line, "# comment\nbatch_size four\n").unwrap();
    lab()
        .args(["train", "--print-config", "--config"])
        .arg(&bad_line)
        .assert()
        .code(3)
        .stderr(contains("line 2"));
}

#[test]
fn zero_steps_writes_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("run"));
    synth(&data, 1, 1, 3);
    train(&data, &out, 0);
    let init = tmp.path().join("init.hgla");
    Trainer::new(TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    })
    .unwrap()
    .save(&init)
    .unwrap();
    assert_eq!(
        fs::read(out.join("final.hgla")).unwrap(),
        fs::read(&init).unwrap()
    );
    assert_eq!(fs::read_to_string(out.join("loss_log.jsonl")).unwrap(), "");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 1, 4);
    let straight = tmp.path().join("straight");
    train(&data, &straight, 2);
    let split = tmp.path().join("split");
    train(&data, &split, 1);
    lab()
        .args(["train", "--steps", "2", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&split)
        .arg("--resume")
        .arg(split.join("final.hgla"))
        .assert()
        .success();
    for f in ["final.hgla", "loss_log.jsonl"] {
        assert_eq!(
            fs::read(straight.join(f)).unwrap(),
            fs::read(split.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn reenact_writes_one_frame_per_driver_frame_deterministically() {
    let tmp = TempDir::new().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    synth(&data, 3, 2, 5);
    train(&data, &run, 0);
    let reenact = |out: &Path| {
        lab()
            .arg("reenact")
            .arg("--checkpoint")
            .arg(run.join("final.hgla"))
            .arg("--source")
            .arg(data.join("sequence_0000.hgla"))
            .arg("--driver")
            .arg(data.join("sequence_0001.hgla"))
            .arg("--out")
            .arg(out)
            .assert()
            .success();
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    reenact(&a);
    reenact(&b);
    let pngs = fs::read_dir(&a)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count();
    assert_eq!(pngs, 5);
    assert_eq!(dir_digest(&a), dir_digest(&b));
}

#[test]
fn reenact_rejects_mismatched_preset_before_writing() {
    let tmp = TempDir::new().unwrap();
    let (data, run, out) = (
        tmp.path().join("data"),
        tmp.path().join("run"),
        tmp.path().join("out"),
    );
    synth(&data, 3, 1, 3);
    train(&data, &run, 0);
    lab()
        .arg("reenact")
        .arg("--checkpoint")
        .arg(run.join("final.hgla"))
        .arg("--source")
        .arg(data.join("sequence_0000.hgla"))
        .arg("--driver")
        .arg(data.join("sequence_0000.hgla"))
        .args(["--preset", "paper", "--out"])
        .arg(&out)
        .assert()
        .code(4)
        .stderr(contains("preset"));
    assert!(!out.exists());
}

#[test]
fn eval_of_identical_data_reports_requested_metrics() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 2, 4);
    let report = tmp.path().join("report.txt");
    lab()
        .args(["eval", "--metrics", "csim,fid", "--data"])
        .arg(&data)
        .arg("--fake-data")
        .arg(&data)
        .arg("--report")
        .arg(&report)
        .assert()
        .success();
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("NOT comparable"));
    let rows: Vec<(&str, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once('\t').unwrap();
            (k, v.parse().unwrap())
        })
        .collect();
    assert_eq!(
        rows.iter().map(|r| r.0).collect::<Vec<_>>(),
        ["CSIM", "FID"]
    );
    assert!((rows[0].1 - 1.0).abs() < 1e-6);
    assert!(rows[1].1.abs() < 1e-6);
}

#[test]
fn eval_with_missing_checkpoint_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 1, 3);
    lab()
        .args(["eval", "--metrics", "fid", "--data"])
        .arg(&data)
        .arg("--checkpoint")
        .arg(tmp.path().join("nope.hgla"))
        .assert()
        .code(4)
        .stderr(contains("nope.hgla"));
}

#[test]
fn preview_grids_and_plots() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 6, 1, 3);
    let seq_grid = tmp.path().join("seq.png");
    lab()
        .args(["preview", "--grid", "3", "--in"])
        .arg(data.join("sequence_0000.hgla"))
        .arg("--out")
        .arg(&seq_grid)
        .assert()
        .success()
        .stdout(contains("200x134"));

    let frames = tmp.path().join("frames");
    fs::create_dir(&frames).unwrap();
    let tile = image::RgbImage::new(5, 4);
    for i in 0..7 {
        tile.save(frames.join(format!("f{i}.png"))).unwrap();
    }
    let grid = tmp.path().join("grid.png");
    lab()
        .args(["preview", "--grid", "3", "--in"])
        .arg(&frames)
        .arg("--out")
        .arg(&grid)
        .assert()
        .success();
    assert_eq!(image::open(&grid).unwrap().height(), 3 * (4 + 2) + 2);

    let log = tmp.path().join("loss_log.jsonl");
    let lines: String = (1..=10)
        .map(|s| {
            format!(
                "{{\"step\":{s},\"name\":\"g_l1\",\"value\":{}}}\n",
                1.0 / s as f64
            )
        })
        .collect();
    fs::write(&log, lines).unwrap();
    let (p1, p2) = (tmp.path().join("p1.png"), tmp.path().join("p2.png"));
    for p in [&p1, &p2] {
        lab()
            .args(["preview", "--in"])
            .arg(&log)
            .arg("--out")
            .arg(p)
            .assert()
            .success();
    }
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

    fs::write(&log, "").unwrap();
    lab()
        .args(["preview", "--in"])
        .arg(&log)
        .arg("--out")
        .arg(tmp.path().join("empty.png"))
        .assert()
        .failure()
        .stderr(contains("nothing to plot"));
}

#[test]
fn zero_threads_is_a_usage_error() {
    lab()
        .env("HEADGAN_LAB_THREADS", "0")
        .args(["train", "--print-config"])
        .assert()
        .code(2);
}
