use std::path::Path;
use std::process::{Command, Output};

fn rpim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpim"))
        .args(args)
        .current_dir(dir)
        .env("RPIM_WORKERS", "1")
        .output()
        .unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "classes=4",
    "--set",
    "dim=4",
    "--set",
    "samples_per_class=10",
    "--epochs",
    "3",
];

#[test]
fn missing_lambda_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rpim(&[&["run"], SMALL].concat(), dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = rpim(&["run", "--lambda", "0.5", "--set", "learnig_rate=1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_feature_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rpim(&["run", "--lambda", "0.5", "--features", "nope.bin", "--sidecar", "nope.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn generated_files_train_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let gen = rpim(&[&["gen-synthetic", "--features-out", "f.bin", "--sidecar-out", "s.csv"], SMALL].concat(), dir.path());
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let run = rpim(
        &["run", "--lambda", "0.5", "--epochs", "3", "--features", "f.bin", "--sidecar", "s.csv", "--out", "out"],
        dir.path(),
    );
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let ckpt = dir.path().join("out/runs/pim+h+lr+ls/seed0/model.ckpt");
    assert!(ckpt.exists());

    let eval = rpim(
        &["eval-only", "--features", "f.bin", "--sidecar", "s.csv", "--checkpoint", ckpt.to_str().unwrap()],
        dir.path(),
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("setting"));
}
