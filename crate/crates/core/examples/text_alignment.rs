//! Pretrain the series encoder, then align it with statistics text and
//! watch the contrastive loss fall.

use dualcast::config::RunConfig;
use dualcast::event::OracleClient;
use dualcast::pipeline::Pipeline;
use dualcast::trainer::{stage1_pretrain, stage2_align};

fn main() -> dualcast::Result<()> {
    let mut cfg = RunConfig::default().set("synth.n_points", "500")?.set("split.horizons", "[8]")?.set("split.lookback", "24")?.set("event.enabled", "false")?;
    cfg.run.out = std::env::temp_dir().join("dualcast-example-align");
    let oracle = OracleClient::new();
    let p = Pipeline::new(cfg, &oracle)?;
    let prepared = p.prepare(8)?;
    let sets = p.sample_sets(&prepared, None)?;
    let tokens = sets.train[0].tokens.as_ref().map_or(0, |t| t.rows());
    println!("{} training windows, {} text tokens in the first", sets.train.len(), tokens);

    let mut model = p.new_model(&prepared)?;
    let mut tc = p.cfg.train_config();
    tc.stage1_epochs = 3;
    tc.stage2_epochs = 8;
    let s1 = stage1_pretrain(&mut model, &sets.train, &sets.val, &tc)?;
    println!("stage 1 forecast loss {:.4} -> {:.4}", s1.initial_train, s1.train.last().copied().unwrap_or(f64::NAN));
    let s2 = stage2_align(&mut model, &sets.train, &sets.val, &tc)?;
    println!("stage 2 alignment loss {:.4} -> {:.4}", s2.initial_train, s2.train.last().copied().unwrap_or(f64::NAN));
    for (e, l) in s2.train.iter().enumerate() {
        println!("  epoch {:>2}  {l:.4}", e + 1);
    }
    Ok(())
}
