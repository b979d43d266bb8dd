//! Template, summary and reasoning for one window with the offline oracle.

use dualcast::dataset::{make_windows, synthesize_event_dataset, temporal_split, SplitConfig};
use dualcast::event::{generate_template, reason, sample_pairs, summarize, EventContext, Llm, OracleClient, ResponseCache};

fn main() -> dualcast::Result<()> {
    let series = synthesize_event_dataset(400, 0.06, 1.0, 0.1, 3)?;
    let cfg = SplitConfig::new(16, 6);
    let split = temporal_split(&series, &cfg)?;
    let cache = ResponseCache::new(std::env::temp_dir().join("dualcast-example-cache"))?;
    let oracle = OracleClient::new();
    let llm = Llm::new(&oracle).with_cache(&cache);
    let ctx = EventContext { dataset_name: "synthetic".into(), dataset_description: "A seasonal series with announced level shifts.".into() };

    let template = generate_template(&llm, &ctx.dataset_description, &sample_pairs(&split.train, 5))?;
    println!("template:\n{}\n", template.to_json());

    let windows = make_windows(&split.test, &cfg)?;
    let w = windows.iter().find(|w| w.is_event == Some(true)).unwrap_or(&windows[0]);
    let summary = summarize(&llm, &ctx, &template, w)?;
    println!("summary of window {}: {}", w.window_id, summary.text());
    let pred = reason(&llm, &ctx, &summary, w, cfg.horizon, None)?;
    println!("forecast {:?} ({:?})", pred.prediction.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(), pred.provenance);
    println!("actual   {:?}", w.target_future().iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    println!("reasoning: {}", pred.reasoning);
    Ok(())
}
