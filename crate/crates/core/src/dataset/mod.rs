//! Aligned numeric/text data: loading, chronological splits, sliding windows,
//! z-score normalization, endogenous text, and synthetic event datasets.

mod endogenous;
mod io;
mod synth;
mod time;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use endogenous::{dominant_period, generate_endogenous_text, trend_direction, Trend};
pub use io::{load_dataset, load_event_labels, write_event_labels, write_series_csv, write_text_csv};
pub use synth::{synthesize_event_dataset, SynthConfig, EVENT_TEXT_PREFIX};
pub use time::{format_instant, parse_instant, Instant};

/// One text record with the interval it describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    /// Position in the source text file; stable across splits and windows.
    pub id: usize,
    pub start: Instant,
    pub end: Instant,
    pub text: String,
}

impl TextRecord {
    pub fn overlaps(&self, start: Instant, end: Instant) -> bool {
        self.start <= end && self.end >= start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSeries {
    pub timestamps: Vec<Instant>,
    /// `T × N` observations.
    pub values: Matrix,
    pub texts: Vec<TextRecord>,
    pub variable_names: Vec<String>,
    pub target_index: usize,
    /// Per-row event flags when ground truth is known.
    pub event_labels: Option<Vec<bool>>,
    /// Row index of the first row within the source series.
    pub row_offset: usize,
}

impl MultimodalSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.values.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.rows() != self.timestamps.len() {
            return Err(Error::Shape(format!(
                "{} value rows for {} timestamps",
                self.values.rows(),
                self.timestamps.len()
            )));
        }
        if let Some(w) = self.timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::Ordering(format!(
                "timestamps not strictly increasing at row {} ({} then {})",
                w + 1,
                format_instant(&self.timestamps[w]),
                format_instant(&self.timestamps[w + 1])
            )));
        }
        if let Some(t) = self.texts.iter().find(|t| t.start > t.end) {
            return Err(Error::Ordering(format!("text record {} starts after it ends", t.id)));
        }
        if self.variable_names.len() != self.values.cols() || self.target_index >= self.values.cols() {
            return Err(Error::Shape("variable names do not match value columns".into()));
        }
        if let Some(l) = &self.event_labels {
            if l.len() != self.len() {
                return Err(Error::Shape(format!("{} event labels for {} rows", l.len(), self.len())));
            }
        }
        Ok(())
    }

    /// Rows `start..end` with texts chosen by `keep_text`.
    fn slice(&self, start: usize, end: usize, keep_text: impl Fn(&TextRecord) -> bool) -> Self {
        let cols = self.values.cols();
        let values = Matrix::from_vec(end - start, cols, self.values.data()[start * cols..end * cols].to_vec());
        Self {
            timestamps: self.timestamps[start..end].to_vec(),
            values,
            texts: self.texts.iter().filter(|t| keep_text(t)).cloned().collect(),
            variable_names: self.variable_names.clone(),
            target_index: self.target_index,
            event_labels: self.event_labels.as_ref().map(|l| l[start..end].to_vec()),
            row_offset: self.row_offset + start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub lookback: usize,
    pub horizon: usize,
    pub label_len: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            lookback: 96,
            horizon: 48,
            label_len: 48,
        }
    }
}

impl SplitConfig {
    pub fn new(lookback: usize, horizon: usize) -> Self {
        Self {
            lookback,
            horizon,
            label_len: lookback / 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| *f <= 0.0 || !f.is_finite()) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        if self.lookback < 2 {
            return Err(Error::Config("lookback must be at least 2".into()));
        }
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSplit {
    pub train: MultimodalSeries,
    pub val: MultimodalSeries,
    pub test: MultimodalSeries,
    /// First validation row in the source series.
    pub val_start: usize,
    /// First test row in the source series.
    pub test_start: usize,
}

impl TemporalSplit {
    /// Instant of the first validation row; every knowledge-base entry must
    /// end strictly before it.
    pub fn val_boundary(&self) -> Instant {
        self.val.timestamps[0]
    }
}

fn floor_frac(total: usize, frac: f64) -> usize {
    ((total as f64) * frac + 1e-9).floor() as usize
}

/// Contiguous chronological train/val/test partition. Text records go to the
/// split whose time range contains their end instant.
pub fn temporal_split(series: &MultimodalSeries, cfg: &SplitConfig) -> Result<TemporalSplit> {
    cfg.validate()?;
    if series.is_empty() {
        return Err(Error::InsufficientData("series is empty".into()));
    }
    let t = series.len();
    let val_start = floor_frac(t, cfg.train_frac);
    let test_start = floor_frac(t, 1.0 - cfg.test_frac);
    let need = cfg.lookback + cfg.horizon;
    for (name, rows) in [("train", val_start), ("val", test_start - val_start), ("test", t - test_start)] {
        if rows < need {
            return Err(Error::InsufficientData(format!(
                "{name} split has {rows} rows, needs at least lookback+horizon = {need}"
            )));
        }
    }
    let val_first = series.timestamps[val_start];
    let test_first = series.timestamps[test_start];
    let train = series.slice(0, val_start, |r| r.end < val_first);
    let val = series.slice(val_start, test_start, |r| r.end >= val_first && r.end < test_first);
    let test = series.slice(test_start, t, |r| r.end >= test_first);
    Ok(TemporalSplit {
        train,
        val,
        test,
        val_start,
        test_start,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalWindow {
    /// Source-series row of the first look-back step; unique across splits.
    pub window_id: usize,
    /// `L × N` look-back values.
    pub x: Matrix,
    /// `H × N` targets.
    pub y: Matrix,
    /// Instants of the `L + H` rows.
    pub timestamps: Vec<Instant>,
    pub exogenous: Vec<TextRecord>,
    pub endogenous: String,
    pub variable_names: Vec<String>,
    pub target_index: usize,
    /// Whether an event instant falls inside the horizon.
    pub is_event: Option<bool>,
}

impl MultimodalWindow {
    pub fn lookback(&self) -> usize {
        self.x.rows()
    }

    pub fn horizon(&self) -> usize {
        self.y.rows()
    }

    /// Whole window `[first look-back instant, last horizon instant]`.
    pub fn span(&self) -> (Instant, Instant) {
        (self.timestamps[0], *self.timestamps.last().expect("non-empty window"))
    }

    pub fn lookback_span(&self) -> (Instant, Instant) {
        (self.timestamps[0], self.timestamps[self.lookback() - 1])
    }

    pub fn horizon_span(&self) -> (Instant, Instant) {
        (self.timestamps[self.lookback()], *self.timestamps.last().expect("non-empty window"))
    }

    pub fn target_history(&self) -> Vec<f64> {
        self.x.column(self.target_index)
    }

    pub fn target_future(&self) -> Vec<f64> {
        self.y.column(self.target_index)
    }

    pub fn last_target(&self) -> f64 {
        self.x[(self.lookback() - 1, self.target_index)]
    }
}

/// Number of stride-1 windows a split of `rows` rows yields.
pub fn window_count(rows: usize, lookback: usize, horizon: usize) -> usize {
    (rows + 1).saturating_sub(lookback + horizon)
}

/// All stride-1 windows of a split, including the last one (no drop-last).
/// Endogenous text is rendered for every window.
pub fn make_windows(split: &MultimodalSeries, cfg: &SplitConfig) -> Result<Vec<MultimodalWindow>> {
    let (l, h) = (cfg.lookback, cfg.horizon);
    if split.len() < l + h {
        return Err(Error::InsufficientData(format!(
            "split has {} rows, needs lookback+horizon = {}",
            split.len(),
            l + h
        )));
    }
    let n = split.n_vars();
    let count = window_count(split.len(), l, h);
    let mut out = Vec::with_capacity(count);
    for s in 0..count {
        let x = Matrix::from_vec(l, n, split.values.data()[s * n..(s + l) * n].to_vec());
        let y = Matrix::from_vec(h, n, split.values.data()[(s + l) * n..(s + l + h) * n].to_vec());
        let timestamps = split.timestamps[s..s + l + h].to_vec();
        let (lb_start, lb_end) = (timestamps[0], timestamps[l - 1]);
        let exogenous = split
            .texts
            .iter()
            .filter(|t| t.overlaps(lb_start, lb_end))
            .cloned()
            .collect();
        let is_event = split
            .event_labels
            .as_ref()
            .map(|lab| lab[s + l..s + l + h].iter().any(|&e| e));
        let mut w = MultimodalWindow {
            window_id: split.row_offset + s,
            x,
            y,
            timestamps,
            exogenous,
            endogenous: String::new(),
            variable_names: split.variable_names.clone(),
            target_index: split.target_index,
            is_event,
        };
        w.endogenous = generate_endogenous_text(&w);
        out.push(w);
    }
    Ok(out)
}

/// Per-variable training-split mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Population statistics of the given (training) split.
    pub fn from_series(train: &MultimodalSeries) -> Self {
        let n = train.n_vars();
        let t = train.len() as f64;
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for c in 0..n {
            let col = train.values.column(c);
            let m = col.iter().sum::<f64>() / t;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / t;
            mean[c] = m;
            std[c] = v.sqrt();
            if std[c] < STD_FLOOR {
                log::warn!(
                    "variable `{}` has zero variance in the training split; std floored at {STD_FLOOR:e}",
                    train.variable_names[c]
                );
                std[c] = STD_FLOOR;
            }
        }
        Self { mean, std }
    }

    pub fn normalize_matrix(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize_matrix(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }

    pub fn normalize_value(&self, var: usize, v: f64) -> f64 {
        (v - self.mean[var]) / self.std[var]
    }

    pub fn denormalize_value(&self, var: usize, v: f64) -> f64 {
        v * self.std[var] + self.mean[var]
    }
}

/// Z-score the look-back and target matrices of every window.
pub fn normalize(windows: &[MultimodalWindow], stats: &NormStats) -> Vec<MultimodalWindow> {
    windows
        .iter()
        .map(|w| MultimodalWindow {
            x: stats.normalize_matrix(&w.x),
            y: stats.normalize_matrix(&w.y),
            ..w.clone()
        })
        .collect()
}

/// Map an `H × N` prediction back to the original scale.
pub fn denormalize(pred: &Matrix, stats: &NormStats) -> Matrix {
    stats.denormalize_matrix(pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_series(rows: usize, n: usize) -> MultimodalSeries {
        let start = parse_instant("2020-01-01").unwrap();
        let timestamps = (0..rows).map(|i| start + chrono::Duration::days(i as i64)).collect();
        let values = Matrix::from_vec(rows, n, (0..rows * n).map(|i| i as f64).collect());
        let mut names: Vec<String> = (0..n.saturating_sub(1)).map(|i| format!("v{i}")).collect();
        names.push("OT".into());
        MultimodalSeries {
            timestamps,
            values,
            texts: Vec::new(),
            variable_names: names,
            target_index: n - 1,
            event_labels: None,
            row_offset: 0,
        }
    }

    #[test]
    fn split_100_rows_defaults() {
        let s = toy_series(100, 1);
        let cfg = SplitConfig::new(4, 2);
        let sp = temporal_split(&s, &cfg).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (70, 10, 20));
        assert_eq!(sp.val.row_offset, 70);
        assert_eq!(sp.test.row_offset, 80);
        assert!(sp.train.timestamps.last() < sp.val.timestamps.first());
        assert!(sp.val.timestamps.last() < sp.test.timestamps.first());
    }

    #[test]
    fn split_1000_rows_boundaries() {
        let s = toy_series(1000, 1);
        let sp = temporal_split(&s, &SplitConfig::new(8, 6)).unwrap();
        // floor(1000 * 0.7) and floor(1000 * 0.8)
        assert_eq!((sp.val_start, sp.test_start), (700, 800));
    }

    #[test]
    fn split_too_small() {
        let s = toy_series(10, 1);
        let err = temporal_split(&s, &SplitConfig::new(8, 6)).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn text_assignment_by_end_instant() {
        let mut s = toy_series(100, 1);
        let day = |d: i64| s.timestamps[0] + chrono::Duration::days(d);
        s.texts = vec![
            TextRecord { id: 0, start: day(60), end: day(69), text: "train".into() },
            TextRecord { id: 1, start: day(65), end: day(72), text: "val".into() },
            TextRecord { id: 2, start: day(79), end: day(85), text: "test".into() },
        ];
        let sp = temporal_split(&s, &SplitConfig::new(4, 2)).unwrap();
        assert_eq!(sp.train.texts.len(), 1);
        assert_eq!(sp.val.texts[0].text, "val");
        assert_eq!(sp.test.texts[0].text, "test");
    }

    #[test]
    fn window_counts() {
        let s = toy_series(70, 2);
        let w = make_windows(&s, &SplitConfig::new(8, 6)).unwrap();
        assert_eq!(w.len(), 57);
        let exact = toy_series(14, 2);
        assert_eq!(make_windows(&exact, &SplitConfig::new(8, 6)).unwrap().len(), 1);
        for h in [6, 8, 10, 12] {
            let w = make_windows(&s, &SplitConfig::new(8, h)).unwrap();
            assert_eq!(w.len(), 70 - 8 - h + 1);
        }
    }

    #[test]
    fn windows_do_not_overlap_targets() {
        let s = toy_series(30, 2);
        for w in make_windows(&s, &SplitConfig::new(5, 3)).unwrap() {
            let (_, lb_end) = w.lookback_span();
            let (h_start, _) = w.horizon_span();
            assert!(lb_end < h_start);
            assert_eq!(w.x.rows(), 5);
            assert_eq!(w.y.rows(), 3);
            // y follows x directly
            assert_eq!(w.y[(0, 0)], w.x[(4, 0)] + 2.0);
        }
    }

    #[test]
    fn windows_carry_only_lookback_texts() {
        let mut s = toy_series(20, 1);
        let day = |d: i64| s.timestamps[0] + chrono::Duration::days(d);
        s.texts = vec![
            TextRecord { id: 0, start: day(2), end: day(3), text: "early".into() },
            TextRecord { id: 1, start: day(6), end: day(6), text: "horizon".into() },
        ];
        let w = make_windows(&s, &SplitConfig::new(5, 3)).unwrap();
        // window 0: look-back days 0..=4, horizon 5..=7
        assert_eq!(w[0].exogenous.len(), 1);
        assert_eq!(w[0].exogenous[0].text, "early");
        // window 2: look-back days 2..=6
        assert_eq!(w[2].exogenous.len(), 2);
    }

    #[test]
    fn zscore_examples() {
        let stats = NormStats { mean: vec![3.0], std: vec![1.0] };
        let m = Matrix::from_vec(2, 1, vec![2.0, 4.0]);
        assert_eq!(stats.normalize_matrix(&m).data(), &[-1.0, 1.0]);
        let id = NormStats::identity(1);
        assert_eq!(id.normalize_matrix(&m), m);
    }

    #[test]
    fn zero_variance_is_floored() {
        let mut s = toy_series(10, 1);
        s.values = Matrix::filled(10, 1, 4.0);
        let st = NormStats::from_series(&s);
        assert_eq!(st.std[0], STD_FLOOR);
        assert_eq!(st.mean[0], 4.0);
    }
}
