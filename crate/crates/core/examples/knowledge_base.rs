//! Build the correction knowledge base from training windows and retrieve
//! in-context examples for a test summary.

use dualcast::config::RunConfig;
use dualcast::encoders::embed_summary;
use dualcast::event::OracleClient;
use dualcast::hic::{guidance, retrieve, RetrievalMode};
use dualcast::pipeline::Pipeline;

fn main() -> dualcast::Result<()> {
    let mut cfg = RunConfig::default().set("synth.n_points", "400")?.set("split.horizons", "[6]")?.set("split.lookback", "16")?;
    cfg.run.out = std::env::temp_dir().join("dualcast-example-kb");
    let oracle = OracleClient::new();
    let p = Pipeline::new(cfg, &oracle)?;
    let prepared = p.prepare(6)?;
    let events = p.precompute_events(&prepared)?;
    let kb = p.build_kb(&prepared, &events)?;
    println!("{} corrected training windows stored in {}", kb.len(), p.cfg.run.out.join("h6/kb.jsonl").display());

    let query = &events.test_summaries[0];
    let q = embed_summary(p.encoder(), &query.text())?;
    for r in retrieve(&kb, &q, 3)? {
        println!("window {:>4}  cosine {:.4}", r.window_id, r.score);
    }
    let lookback = prepared.test[0].target_history();
    if let Some(example) = guidance(&kb, RetrievalMode::Full, 1, &q, &lookback)? {
        println!("\nguidance for test window {}:\n{}", query.window_id, example.lines().take(6).collect::<Vec<_>>().join("\n"));
    }
    Ok(())
}
