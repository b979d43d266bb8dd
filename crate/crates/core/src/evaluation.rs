//! Metrics, event/non-event segments, band correlations, text
//! perturbations and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aff::bandpass_filter;
use crate::dataset::MultimodalWindow;
use crate::error::{Error, Result};

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("prediction has {} entries, truth has {}", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty arrays".into()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Scored windows.
    pub count: usize,
}

fn metrics_over(preds: &[&Vec<f64>], truths: &[&Vec<f64>]) -> Result<Option<Metrics>> {
    if preds.is_empty() {
        return Ok(None);
    }
    let p: Vec<f64> = preds.iter().flat_map(|v| v.iter().copied()).collect();
    let t: Vec<f64> = truths.iter().flat_map(|v| v.iter().copied()).collect();
    Ok(Some(Metrics { mse: mse(&p, &t)?, mae: mae(&p, &t)?, count: preds.len() }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub branch: String,
    /// Absent when no window is flagged.
    pub event: Option<Metrics>,
    pub non_event: Option<Metrics>,
    pub overall: Metrics,
}

/// Metrics over event-flagged windows, the rest, and all of them.
pub fn segment_metrics(preds: &[Vec<f64>], truths: &[Vec<f64>], labels: &[bool], branch: &str) -> Result<SegmentMetrics> {
    if preds.len() != truths.len() || labels.len() != preds.len() {
        return Err(Error::Shape(format!("{} predictions, {} truths, {} labels", preds.len(), truths.len(), labels.len())));
    }
    let pick = |flag: Option<bool>| -> Result<Option<Metrics>> {
        let idx: Vec<usize> = (0..preds.len()).filter(|&i| flag.map_or(true, |f| labels[i] == f)).collect();
        metrics_over(&idx.iter().map(|&i| &preds[i]).collect::<Vec<_>>(), &idx.iter().map(|&i| &truths[i]).collect::<Vec<_>>())
    };
    Ok(SegmentMetrics {
        branch: branch.to_string(),
        event: pick(Some(true))?,
        non_event: pick(Some(false))?,
        overall: pick(None)?.ok_or_else(|| Error::Shape("no windows to score".into()))?,
    })
}

/// Sample Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let den = (saa * sbb).sqrt();
    if den <= 1e-12 * (1.0 + saa.max(sbb)) || den == 0.0 {
        None
    } else {
        Some((sab / den).clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Band {
    Low,
    High,
}

/// Correlation of the band-filtered prediction and truth.
pub fn band_pearson(pred: &[f64], truth: &[f64], band: Band, low_frac: f64, high_frac: f64) -> Result<Option<f64>> {
    check(pred, truth)?;
    if pred.len() < 3 {
        return Err(Error::Precondition("band correlation needs at least 3 points".into()));
    }
    let (lo, hi) = match band {
        Band::Low => (0.0, low_frac),
        Band::High => (high_frac, 1.0),
    };
    Ok(pearson(&bandpass_filter(pred, lo, hi)?, &bandpass_filter(truth, lo, hi)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    MaskDiscrete,
    MaskContiguous,
    Noise,
}

impl FromStr for PerturbMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask-discrete" => Ok(Self::MaskDiscrete),
            "mask-contiguous" => Ok(Self::MaskContiguous),
            "noise" => Ok(Self::Noise),
            other => Err(Error::Argument(format!("unknown perturbation `{other}` (mask-discrete, mask-contiguous, noise)"))),
        }
    }
}

pub const VOCABULARY: [&str; 40] = [
    "lorem", "ipsum", "dolor", "sit", "amet", "consectetur", "adipiscing", "elit", "sed", "do", "eiusmod", "tempor", "incididunt", "ut",
    "labore", "et", "dolore", "magna", "aliqua", "enim", "ad", "minim", "veniam", "quis", "nostrud", "exercitation", "ullamco",
    "laboris", "nisi", "aliquip", "ex", "ea", "commodo", "consequat", "duis", "aute", "irure", "in", "reprehenderit", "voluptate",
];

/// `n` seeded vocabulary words.
pub fn random_words(n: usize, rng: &mut impl Rng) -> String {
    (0..n).map(|_| *VOCABULARY.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

fn ceil_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Degrade the exogenous text. Records are identified by id, so a record
/// shared by several windows is removed or rewritten identically in all.
pub fn perturb_text(windows: &[MultimodalWindow], mode: PerturbMode, rate: f64, seed: u64) -> Result<Vec<MultimodalWindow>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Argument(format!("perturbation rate {rate} outside [0, 1]")));
    }
    let ids: Vec<usize> = windows.iter().flat_map(|w| w.exogenous.iter().map(|t| t.id)).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ceil_count(rate, ids.len());
    let removed: BTreeSet<usize> = match mode {
        PerturbMode::MaskDiscrete => ids.choose_multiple(&mut rng, k).copied().collect(),
        PerturbMode::MaskContiguous if k > 0 => {
            let start = rng.gen_range(0..=ids.len() - k);
            ids[start..start + k].iter().copied().collect()
        }
        _ => BTreeSet::new(),
    };
    Ok(windows
        .iter()
        .map(|w| {
            let mut w = w.clone();
            w.exogenous.retain(|t| !removed.contains(&t.id));
            if mode == PerturbMode::Noise {
                for t in &mut w.exogenous {
                    let mut r = ChaCha8Rng::seed_from_u64(seed ^ (t.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let mut words: Vec<String> = t.text.split_whitespace().map(str::to_string).collect();
                    let n = ceil_count(rate, words.len());
                    let pos: Vec<usize> = (0..words.len()).collect::<Vec<_>>().choose_multiple(&mut r, n).copied().collect();
                    for p in pos {
                        words[p] = VOCABULARY.choose(&mut r).expect("non-empty").to_string();
                    }
                    t.text = words.join(" ");
                }
            }
            w
        })
        .collect())
}

/// One scored test window on the original scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub window_id: usize,
    pub is_event: Option<bool>,
    /// Row-major `H × N`.
    pub truth: Vec<f64>,
    pub y_final: Vec<f64>,
    pub y_num: Vec<f64>,
    /// Target variable only.
    pub y_event: Option<Vec<f64>>,
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonResult {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
    pub segments: Vec<SegmentMetrics>,
    pub band_pearson_low: Option<f64>,
    pub band_pearson_high: Option<f64>,
    pub provenance: BTreeMap<String, usize>,
}

fn target_col(flat: &[f64], n: usize, t: usize) -> Vec<f64> {
    flat.iter().skip(t).step_by(n).copied().collect()
}

fn mean_some(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Score every record (no drop-last) for one horizon.
pub fn evaluate_records(records: &[PredictionRecord], horizon: usize, n_vars: usize, target: usize, low_frac: f64, high_frac: f64) -> Result<HorizonResult> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no test windows".into()));
    }
    let p: Vec<f64> = records.iter().flat_map(|r| r.y_final.iter().copied()).collect();
    let t: Vec<f64> = records.iter().flat_map(|r| r.truth.iter().copied()).collect();
    let truth_t: Vec<Vec<f64>> = records.iter().map(|r| target_col(&r.truth, n_vars, target)).collect();
    let fused_t: Vec<Vec<f64>> = records.iter().map(|r| target_col(&r.y_final, n_vars, target)).collect();
    let num_t: Vec<Vec<f64>> = records.iter().map(|r| target_col(&r.y_num, n_vars, target)).collect();
    let mut segments = Vec::new();
    if records.iter().all(|r| r.is_event.is_some()) {
        let labels: Vec<bool> = records.iter().map(|r| r.is_event.unwrap_or(false)).collect();
        segments.push(segment_metrics(&fused_t, &truth_t, &labels, "fused")?);
        segments.push(segment_metrics(&num_t, &truth_t, &labels, "numerical")?);
        if records.iter().all(|r| r.y_event.is_some()) {
            let ev: Vec<Vec<f64>> = records.iter().map(|r| r.y_event.clone().expect("checked")).collect();
            segments.push(segment_metrics(&ev, &truth_t, &labels, "event")?);
        }
    }
    let (low, high) = if horizon >= 3 {
        let band = |b: Band| -> Result<Option<f64>> {
            let each: Vec<Option<f64>> = fused_t.iter().zip(&truth_t).map(|(a, b2)| band_pearson(a, b2, b, low_frac, high_frac)).collect::<Result<_>>()?;
            Ok(mean_some(each.into_iter()))
        };
        (band(Band::Low)?, band(Band::High)?)
    } else {
        (None, None)
    };
    let mut provenance = BTreeMap::new();
    for r in records {
        if let Some(p) = &r.provenance {
            *provenance.entry(p.clone()).or_insert(0) += 1;
        }
    }
    Ok(HorizonResult {
        horizon,
        mse: mse(&p, &t)?,
        mae: mae(&p, &t)?,
        count: records.len(),
        segments,
        band_pearson_low: low,
        band_pearson_high: high,
        provenance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub variant: String,
    pub horizons: Vec<HorizonResult>,
    pub avg_mse: f64,
    pub avg_mae: f64,
}

impl EvaluationReport {
    pub fn new(variant: &str, mut horizons: Vec<HorizonResult>) -> Result<Self> {
        if horizons.is_empty() {
            return Err(Error::InsufficientData("no horizon results".into()));
        }
        horizons.sort_by_key(|h| h.horizon);
        let k = horizons.len() as f64;
        let avg_mse = horizons.iter().map(|h| h.mse).sum::<f64>() / k;
        let avg_mae = horizons.iter().map(|h| h.mae).sum::<f64>() / k;
        Ok(Self { variant: variant.to_string(), horizons, avg_mse, avg_mae })
    }

    /// Segment metrics of one branch at one horizon.
    pub fn segment(&self, horizon: usize, branch: &str) -> Option<&SegmentMetrics> {
        self.horizons.iter().find(|h| h.horizon == horizon)?.segments.iter().find(|s| s.branch == branch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,horizon,mse,mae,count,event_mse,non_event_mse\n");
        let f = |m: Option<Metrics>| m.map(|m| m.mse.to_string()).unwrap_or_default();
        for h in &self.horizons {
            let fused = h.segments.iter().find(|s| s.branch == "fused");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.variant,
                h.horizon,
                h.mse,
                h.mae,
                h.count,
                f(fused.and_then(|s| s.event)),
                f(fused.and_then(|s| s.non_event))
            );
        }
        let _ = writeln!(out, "{},avg,{},{},,,", self.variant, self.avg_mse, self.avg_mae);
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("variant: {}\n{:>8}  {:>12}  {:>12}  {:>7}\n", self.variant, "horizon", "MSE", "MAE", "windows");
        for h in &self.horizons {
            let _ = writeln!(out, "{:>8}  {:>12.6}  {:>12.6}  {:>7}", h.horizon, h.mse, h.mae, h.count);
        }
        let _ = writeln!(out, "{:>8}  {:>12.6}  {:>12.6}", "avg", self.avg_mse, self.avg_mae);
        for h in &self.horizons {
            for s in &h.segments {
                let m = |x: Option<Metrics>| x.map_or("-".to_string(), |m| format!("{:.6}", m.mse));
                let _ = writeln!(out, "H={} {:<9} event {}  non-event {}  overall {:.6}", h.horizon, s.branch, m(s.event), m(s.non_event), s.overall.mse);
            }
        }
        out
    }
}

/// Side-by-side averages for several reports.
pub fn comparison_table(reports: &[EvaluationReport]) -> String {
    let mut out = format!("{:<28}  {:>12}  {:>12}  {:>12}\n", "variant", "avg MSE", "avg MAE", "event MSE");
    for r in reports {
        let ev = mean_some(r.horizons.iter().map(|h| h.segments.iter().find(|s| s.branch == "fused").and_then(|s| s.event).map(|m| m.mse)));
        let _ = writeln!(out, "{:<28}  {:>12.6}  {:>12.6}  {:>12}", r.variant, r.avg_mse, r.avg_mae, ev.map_or("-".into(), |v| format!("{v:.6}")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_windows, synthesize_event_dataset, SplitConfig};

    #[test]
    fn metric_definitions() {
        assert_eq!(mse(&[1.0, 3.0], &[2.0, 5.0]).unwrap(), 2.5);
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 5.0]).unwrap(), 1.5);
        let t = [0.5, -1.0, 2.0];
        let p: Vec<f64> = t.iter().map(|v| v + 0.3).collect();
        assert!((mse(&p, &t).unwrap() - 0.09).abs() < 1e-12);
        assert!((mae(&p, &t).unwrap() - 0.3).abs() < 1e-12);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn segments_by_hand() {
        let preds = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let truth = vec![vec![0.0], vec![0.0], vec![0.0], vec![0.0]];
        let s = segment_metrics(&preds, &truth, &[true, false, true, false], "fused").unwrap();
        assert_eq!(s.event.unwrap().mse, 5.0);
        assert_eq!(s.non_event.unwrap().mse, 10.0);
        assert_eq!(s.overall.mse, 7.5);
        let none = segment_metrics(&preds, &truth, &[false; 4], "fused").unwrap();
        assert!(none.event.is_none());
        assert_eq!(none.non_event.unwrap(), none.overall);
    }

    #[test]
    fn pearson_against_covariance_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
        let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sb = (b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((pearson(&a, &b).unwrap() - cov / (sa * sb)).abs() < 1e-9);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 1.3).sin()).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((band_pearson(&x, &x, Band::High, 0.1, 0.7).unwrap().unwrap() - 1.0).abs() < 1e-9);
        assert!((band_pearson(&neg, &x, Band::High, 0.1, 0.7).unwrap().unwrap() + 1.0).abs() < 1e-9);
        assert_eq!(pearson(&[1.0; 4], &x[..4]), None);
    }

    #[test]
    fn perturbation_counts() {
        let s = synthesize_event_dataset(400, 0.3, 1.0, 0.1, 9).unwrap();
        let ws = make_windows(&s, &SplitConfig::new(400 - 20, 20)).unwrap();
        let total: BTreeSet<usize> = ws.iter().flat_map(|w| w.exogenous.iter().map(|t| t.id)).collect();
        assert!(total.len() > 20);
        assert_eq!(perturb_text(&ws, PerturbMode::MaskDiscrete, 0.0, 1).unwrap(), ws);
        let all = perturb_text(&ws, PerturbMode::MaskDiscrete, 1.0, 1).unwrap();
        assert!(all.iter().all(|w| w.exogenous.is_empty()));
        for mode in [PerturbMode::MaskDiscrete, PerturbMode::MaskContiguous] {
            let p = perturb_text(&ws, mode, 0.1, 3).unwrap();
            let left: BTreeSet<usize> = p.iter().flat_map(|w| w.exogenous.iter().map(|t| t.id)).collect();
            assert_eq!(total.len() - left.len(), ceil_count(0.1, total.len()));
            assert_eq!(p, perturb_text(&ws, mode, 0.1, 3).unwrap());
        }
        let noisy = perturb_text(&ws, PerturbMode::Noise, 0.2, 3).unwrap();
        assert_eq!(noisy[0].exogenous.len(), ws[0].exogenous.len());
    }

    #[test]
    fn ceil_count_exact() {
        assert_eq!(ceil_count(0.1, 100), 10);
        assert_eq!(ceil_count(0.2, 7), 2);
        assert_eq!(ceil_count(0.0, 7), 0);
    }
}
