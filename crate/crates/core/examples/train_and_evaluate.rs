//! Full run on synthetic data: events, three training stages, test metrics.

use dualcast::config::RunConfig;
use dualcast::pipeline::run_full;

fn main() -> dualcast::Result<()> {
    let mut cfg = RunConfig::default()
        .set("synth.n_points", "800")?
        .set("synth.noise_std", "0.2")?
        .set("split.lookback", "32")?
        .set("split.horizons", "[8, 12]")?;
    cfg.run.out = std::env::temp_dir().join("dualcast-example-run");
    let report = run_full(&cfg)?;
    print!("{}", report.to_text());
    println!("artifacts under {}", cfg.run.out.display());
    Ok(())
}
