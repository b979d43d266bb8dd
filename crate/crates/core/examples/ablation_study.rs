//! Compare a handful of ablation variants on the same data.

use dualcast::config::{RunConfig, Variant};
use dualcast::evaluation::comparison_table;
use dualcast::event::OracleClient;
use dualcast::pipeline::ablate;

fn main() -> dualcast::Result<()> {
    let mut cfg = RunConfig::default()
        .set("synth.n_points", "800")?
        .set("synth.noise_std", "0.2")?
        .set("split.lookback", "24")?
        .set("split.horizons", "[8]")?
        .set("train.stage3_epochs", "10")?;
    cfg.run.out = std::env::temp_dir().join("dualcast-example-ablation");
    let variants: Vec<Variant> = ["full", "no-event", "no-hic", "ts-only", "fusion:mlp", "text:random"]
        .iter()
        .map(|v| v.parse())
        .collect::<dualcast::Result<_>>()?;
    let reports = ablate(&cfg, &variants, &OracleClient::new())?;
    print!("{}", comparison_table(&reports));
    Ok(())
}
