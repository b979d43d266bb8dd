//! Generate the synthetic event dataset and show how it splits into windows.

use dualcast::dataset::{make_windows, synthesize_event_dataset, temporal_split, window_count, SplitConfig};

fn main() -> dualcast::Result<()> {
    let series = synthesize_event_dataset(600, 0.05, 1.0, 0.2, 7)?;
    let events = series.event_labels.as_ref().map_or(0, |l| l.iter().filter(|e| **e).count());
    println!("{} rows, {} variables, {} text records, {} event rows", series.len(), series.n_vars(), series.texts.len(), events);
    for t in series.texts.iter().take(3) {
        println!("  #{:<3} {}", t.id, t.text);
    }

    let cfg = SplitConfig::new(24, 8);
    let split = temporal_split(&series, &cfg)?;
    println!("validation starts at row {}, test at row {}", split.val_start, split.test_start);
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let windows = make_windows(part, &cfg)?;
        let flagged = windows.iter().filter(|w| w.is_event == Some(true)).count();
        assert_eq!(windows.len(), window_count(part.len(), cfg.lookback, cfg.horizon));
        println!("{name:>5}: {:>4} rows -> {:>4} windows ({flagged} with an event in the horizon)", part.len(), windows.len());
    }
    let w = &make_windows(&split.test, &cfg)?[0];
    println!("first test window statistics text: {}", w.endogenous);
    Ok(())
}
