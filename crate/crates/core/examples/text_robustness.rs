//! Degrade the exogenous text three ways and measure the effect on the
//! test windows.

use dualcast::config::RunConfig;
use dualcast::dataset::{make_windows, synthesize_event_dataset, temporal_split, SplitConfig};
use dualcast::evaluation::{perturb_text, PerturbMode};
use dualcast::pipeline::run_full;

fn main() -> dualcast::Result<()> {
    let series = synthesize_event_dataset(300, 0.08, 1.0, 0.1, 5)?;
    let cfg = SplitConfig::new(16, 6);
    let windows = make_windows(&temporal_split(&series, &cfg)?.test, &cfg)?;
    let w = windows.iter().position(|w| !w.exogenous.is_empty()).unwrap_or(0);
    println!("original: {:?}", windows[w].exogenous.iter().map(|t| &t.text).collect::<Vec<_>>());
    for mode in [PerturbMode::MaskDiscrete, PerturbMode::MaskContiguous, PerturbMode::Noise] {
        let out = perturb_text(&windows, mode, 0.5, 1)?;
        println!("{mode:?}: {:?}", out[w].exogenous.iter().map(|t| &t.text).collect::<Vec<_>>());
    }

    let base = RunConfig::default().set("synth.n_points", "600")?.set("split.lookback", "24")?.set("split.horizons", "[8]")?;
    for (name, mode) in [("clean", None), ("noise", Some("noise")), ("mask-discrete", Some("mask-discrete"))] {
        let mut c = base.clone().set("event.perturb_rate", "0.5")?;
        if let Some(m) = mode {
            c = c.set("event.perturb", m)?;
        }
        c.run.out = std::env::temp_dir().join(format!("dualcast-example-robust-{name}"));
        c.run.cache_dir = Some(std::env::temp_dir().join("dualcast-example-robust-cache"));
        let r = run_full(&c)?;
        let ev = r.segment(8, "fused").and_then(|s| s.event).map_or(f64::NAN, |m| m.mse);
        println!("{name:>14}: avg MSE {:.4}, event-window MSE {ev:.4}", r.avg_mse);
    }
    Ok(())
}
