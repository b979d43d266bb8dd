//! The `dualcast` binary: exit codes, error categories and the config
//! snapshot.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "synth.n_points=260",
    "--set",
    "split.lookback=12",
    "--horizon",
    "4",
    "--set",
    "train.stage1_epochs=1",
    "--set",
    "train.stage2_epochs=1",
    "--set",
    "train.stage3_epochs=2",
];

fn dualcast(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualcast"))
        .args(args)
        .args(SMALL)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn evaluate_before_train_names_the_missing_step() {
    let d = tempfile::tempdir().unwrap();
    let o = dualcast(d.path(), &["evaluate"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.starts_with("error[dependency]") && e.contains("`train`"), "{e}");
    let o = dualcast(d.path(), &["predict"]);
    assert!(stderr(&o).contains("`train`"));
}

#[test]
fn seeded_training_is_repeatable() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        let o = dualcast(out, &["train", "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let report = |p: &Path| std::fs::read(p.join("h4/train_report.json")).unwrap();
    assert_eq!(report(&a), report(&b));
    let o = dualcast(&a, &["train", "--seed", "7"]);
    assert!(o.status.success());
    assert_eq!(report(&a), report(&b));
    let o = dualcast(&a, &["evaluate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("avg"));
}

#[test]
fn snapshot_reflects_flag_precedence() {
    let d = tempfile::tempdir().unwrap();
    let file = d.path().join("c.json");
    std::fs::write(&file, r#"{"run.seed": 3, "split.lookback": 12, "fusion.low_frac": 0.2}"#).unwrap();
    let out = d.path().join("run");
    let o = dualcast(&out, &["prepare", "--config", file.to_str().unwrap(), "--set", "run.seed=5", "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snap: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["run.seed"], 9);
    assert_eq!(snap["fusion.low_frac"], 0.2);
    assert_eq!(snap["split.horizons"], serde_json::json!([4]));
    assert!(out.join("h4/prepared/meta.json").exists());
}

#[test]
fn bad_arguments_are_reported() {
    let d = tempfile::tempdir().unwrap();
    let o = dualcast(d.path(), &["prepare", "--variant", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[argument]") && stderr(&o).contains("ts-only"));
    let o = dualcast(d.path(), &["prepare", "--set", "nope.key=1"]);
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));
    let o = dualcast(d.path(), &["prepare", "--set", "fusion.low_frac=0.9"]);
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));
}
