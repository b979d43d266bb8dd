//! End-to-end runs on small synthetic data with the offline oracle client.

use std::path::Path;

use dualcast::config::RunConfig;
use dualcast::event::{OracleClient, RecordingClient};
use dualcast::pipeline::Pipeline;

fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("synth.n_points", "260"),
        ("synth.event_rate", "0.08"),
        ("split.lookback", "12"),
        ("split.horizons", "[4]"),
        ("train.stage1_epochs", "1"),
        ("train.stage2_epochs", "1"),
        ("train.stage3_epochs", "2"),
        ("train.stage3_lrs", "[0.001]"),
    ] {
        cfg = cfg.set(k, v).unwrap();
    }
    cfg.run.out = out.to_path_buf();
    cfg
}

#[test]
fn rerun_makes_no_client_calls() {
    let d = tempfile::tempdir().unwrap();
    let oracle = OracleClient::new();
    let first = RecordingClient::new(&oracle);
    let a = Pipeline::new(small(d.path()), &first).unwrap().run().unwrap();
    assert!(first.calls() > 0);
    let second = RecordingClient::new(&oracle);
    let b = Pipeline::new(small(d.path()), &second).unwrap().run().unwrap();
    assert_eq!(second.calls(), 0);
    assert_eq!(a, b);
}

#[test]
fn individual_steps_match_a_full_run() {
    let d = tempfile::tempdir().unwrap();
    let oracle = OracleClient::new();
    let whole = Pipeline::new(small(&d.path().join("whole")), &oracle).unwrap().run().unwrap();

    let steps = Pipeline::new(small(&d.path().join("steps")), &oracle).unwrap();
    let p = steps.prepare(4).unwrap();
    let ev = steps.precompute_events(&p).unwrap();
    let kb = steps.build_kb(&p, &ev).unwrap();
    assert!(!kb.is_empty());
    steps.train_horizon(4).unwrap();
    assert_eq!(steps.predict_horizon(4).unwrap().len(), p.test.len());
    assert_eq!(steps.evaluate().unwrap(), whole);
    for f in ["report.json", "h4/kb.jsonl", "h4/checkpoints/stage3.json", "h4/predictions.jsonl"] {
        assert_eq!(std::fs::read(d.path().join("whole").join(f)).unwrap(), std::fs::read(d.path().join("steps").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn analysis_writes_plots() {
    let d = tempfile::tempdir().unwrap();
    let oracle = OracleClient::new();
    let p = Pipeline::new(small(d.path()), &oracle).unwrap();
    p.run().unwrap();
    let a = p.analyze_horizon(4).unwrap();
    assert_eq!(a.plots.len(), 3);
    for f in &a.plots {
        assert!(std::fs::read_to_string(f).unwrap().starts_with("<svg"));
    }
    assert!(a.sweep.iter().all(|c| c.mse.is_finite()));
}

#[test]
fn perturbed_test_text_changes_only_event_inputs() {
    let d = tempfile::tempdir().unwrap();
    let oracle = OracleClient::new();
    let clean = Pipeline::new(small(&d.path().join("clean")), &oracle).unwrap().run().unwrap();
    let cfg = small(&d.path().join("noisy")).set("event.perturb", "noise").unwrap().set("event.perturb_rate", "1.0").unwrap();
    let noisy = Pipeline::new(cfg, &oracle).unwrap().run().unwrap();
    let read = |dir: &str, f: &str| std::fs::read(d.path().join(dir).join("h4").join(f)).unwrap();
    assert_eq!(read("clean", "kb.jsonl"), read("noisy", "kb.jsonl"));
    assert_ne!(read("clean", "events/test.summaries.jsonl"), read("noisy", "events/test.summaries.jsonl"));
    assert_eq!(clean.horizons[0].count, noisy.horizons[0].count);
}
