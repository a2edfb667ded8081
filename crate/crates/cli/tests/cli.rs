use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use styleddg::data::Dataset;

const SMALL: &[&str] = &[
    "train_per_domain=16",
    "test_per_domain=8",
    "channels=4,8,8",
    "batch=8",
    "iterations=3",
    "targets=1",
];

fn styleddg(args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_styleddg"));
    cmd.args(args);
    for kv in SMALL.iter().chain(extra) {
        cmd.args(["--override", kv]);
    }
    cmd.output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_a_table_and_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = styleddg(&["run", "--out", path(&out), "--seeds", "1,2"], &["methods=dsgd,styleddg"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.lines().next().unwrap().trim_end().ends_with("Avg"));
    assert!(stdout.contains("status: complete"));
    let rows = fs::read_to_string(out.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().filter(|l| !l.starts_with('#')).count(), 1 + 4);

    // The snapshot reproduces the run.
    let again = tmp.path().join("again");
    let o = Command::new(env!("CARGO_BIN_EXE_styleddg"))
        .args(["run", "--config", path(&out.join("config.txt")), "--out", path(&again)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(rows, fs::read_to_string(again.join("rows.csv")).unwrap());
}

#[test]
fn mode_override_selects_one_method() {
    let tmp = tempfile::tempdir().unwrap();
    let o = styleddg(&["run", "--out", path(tmp.path()), "--seeds", "1"], &["mode=dsgd"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let rows = fs::read_to_string(tmp.path().join("rows.csv")).unwrap();
    assert!(rows.lines().skip(2).all(|l| l.starts_with("dsgd,")), "{rows}");
}

#[test]
fn bad_settings_exit_with_a_named_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = styleddg(&["run", "--out", path(tmp.path())], &["learning_rat=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("learning_rat"));
    let o = styleddg(&["run", "--out", path(tmp.path())], &["batch=7", "mode=styleddg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("even"), "{}", text(&o.stderr));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_styleddg"));
    cmd.env("STYLEDDG_OUT", tmp.path()).args(["gen-data"]);
    for kv in SMALL {
        cmd.args(["--override", kv]);
    }
    let o = cmd.output().unwrap();
    assert!(o.status.success(), "{}", text(&o.stderr));
    let train = Dataset::load(&tmp.path().join("data/train.bin")).unwrap();
    let test = Dataset::load(&tmp.path().join("data/test.bin")).unwrap();
    assert_eq!((train.len(), test.len()), (64, 32));
}

#[test]
fn sweep_reports_rho_per_radius() {
    let tmp = tempfile::tempdir().unwrap();
    let o = styleddg(&["sweep-radius", "--out", path(tmp.path()), "--radii", "0.9,1.5", "--seeds", "1"], &["m=4", "methods=dsgd"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("random_geometric(0.9) dsgd target 1: rho"));
    assert!(stdout.contains("random_geometric(1.5) dsgd target 1: rho 0.0000"), "{stdout}");
}

#[test]
fn verify_passes_and_detects_a_broken_mixing_matrix() {
    let only = ["verify", "--only", "consensus,style_size"];
    let o = styleddg(&only, &[]);
    assert!(o.status.success(), "{}", text(&o.stdout));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("PASS consensus") && stdout.contains("PASS style_size"));
    assert!(stdout.contains("2 checks, 0 failed"));

    let o = styleddg(&[&only[..], &["--corrupt-mixing"]].concat(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stdout).contains("FAIL consensus"));

    let o = styleddg(&["verify", "--only", "nope"], &[]);
    assert_eq!(o.status.code(), Some(2));
}
