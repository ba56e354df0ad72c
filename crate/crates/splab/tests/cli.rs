//! Pins the command-line contract: exit codes, stream routing, and the
//! fast subcommands that need no trained models.

#![cfg(feature = "cli")]

use std::path::Path;
use std::process::{Command, Output};

fn splab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero_on_stdout() {
    for args in [&["--help"][..], &["run", "--help"][..], &["--version"][..]] {
        let out = splab(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
        assert!(!stdout(&out).is_empty(), "{args:?} should print to stdout");
    }
    assert!(stdout(&splab(&["--help"])).contains("Usage"));
}

#[test]
fn unknown_flags_and_subcommands_exit_one_with_usage() {
    let out = splab(&["run", "--config", "x.cfg", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("--frobnicate"), "{err}");
    assert!(err.contains("Usage"), "{err}");
    assert!(stdout(&out).is_empty());

    let out = splab(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn config_problems_exit_one() {
    let dir = tempfile::tempdir().unwrap();

    // missing config file
    let missing = dir.path().join("nope.cfg");
    let out = splab(&["run", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "io error is a runtime failure");

    // unknown key names the key
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "dataset = mnist\narch = mlp\nlern_rate = 0.1\n").unwrap();
    let out = splab(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("lern_rate"), "{}", stderr(&out));

    // unsupported report kind
    let out = splab(&["report", "figure9", "--in", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_over_an_empty_tree_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = splab(&["report", "figure2", "--in", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no records"), "{}", stderr(&out));
}

#[test]
fn score_on_a_missing_checkpoint_is_a_runtime_failure() {
    let out = splab(&["score", "--checkpoint", "/nonexistent/model.ckpt", "--dataset", "mnist"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn viz_pattern_writes_a_readable_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r2.pgm");
    let out = splab(&["viz", "pattern", "--pattern", "R2", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let bytes = std::fs::read(&path).unwrap();
    let header = String::from_utf8_lossy(&bytes[..15.min(bytes.len())]).into_owned();
    assert!(header.starts_with("P5\n28 28\n255\n"), "unexpected header {header:?}");
    assert_eq!(bytes.len(), "P5\n28 28\n255\n".len() + 28 * 28);

    // bar pattern only fits the grayscale shape
    let bad = splab(&[
        "viz",
        "pattern",
        "--pattern",
        "Co",
        "--dataset",
        "cifar10",
        "--out",
        dir.path().join("co.pgm").to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1), "{}", stderr(&bad));
}

#[test]
fn probe_requires_dataset_files() {
    // missing data directory is a runtime failure, not a panic
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    // write a real checkpoint so the failure is attributable to the data
    let spec = splab::nn::ArchSpec::new(splab::nn::ArchKind::SmallMlp, (28, 28, 1), 10).unwrap();
    let model = splab::nn::build_model::<f32>(&spec, 0).unwrap();
    splab::checkpoint::save(&ckpt, &model).unwrap();
    let out = splab(&[
        "probe",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        "mnist",
        "--data-dir",
        dir.path().join("nodata").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn probe_emits_the_curve_csv_when_data_is_present() {
    let Ok(data_dir) = std::env::var("SPLAB_DATA_DIR") else {
        eprintln!("probe csv test: skipped (set SPLAB_DATA_DIR)");
        return;
    };
    if !Path::new(&data_dir).join("mnist").is_dir() {
        eprintln!("probe csv test: skipped (no mnist under SPLAB_DATA_DIR)");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let spec = splab::nn::ArchSpec::new(splab::nn::ArchKind::SmallMlp, (28, 28, 1), 10).unwrap();
    let model = splab::nn::build_model::<f32>(&spec, 0).unwrap();
    splab::checkpoint::save(&ckpt, &model).unwrap();
    let out = splab(&[
        "probe",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        "mnist",
        "--data-dir",
        &data_dir,
        "--num-images",
        "16",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# splab-csv v1"));
    assert_eq!(lines.next(), Some("fraction,mean_prob,stderr"));
    assert_eq!(lines.count(), 51, "51 removal fractions from 0.0 to 1.0");
}
