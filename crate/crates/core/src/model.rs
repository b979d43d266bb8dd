//! The dual-branch forecaster: numerical branch plus fusion with an
//! externally supplied event forecast, over one parameter store.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aff::{fuse_graph, init_fusion_params, partition_bands, BandPartition, FusionStrategy, FusionWeights};
use crate::error::{Error, Result};
use crate::numerical::{NumericBatch, NumericConfig, NumericalBranch, TextBatch};
use crate::tensor::{Graph, Matrix, ParamId, ParamStore, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub numeric: NumericConfig,
    /// Variable the event branch forecasts.
    pub target_index: usize,
    pub fusion: FusionStrategy,
    /// When false the numerical prediction is the final output.
    pub use_event: bool,
    pub low_frac: f64,
    pub high_frac: f64,
    pub fusion_init: f64,
}

impl ModelConfig {
    pub fn new(numeric: NumericConfig, target_index: usize) -> Self {
        Self { numeric, target_index, fusion: FusionStrategy::Aff, use_event: true, low_frac: 0.1, high_frac: 0.7, fusion_init: 0.5 }
    }
}

/// One window on the dataset-normalized scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub window_id: usize,
    /// `L × N`.
    pub x: Matrix,
    /// `H × N`.
    pub y: Matrix,
    /// Endogenous-text token embeddings.
    pub tokens: Option<Matrix>,
    /// Event-branch forecast of the target, length `H`.
    pub event: Option<Vec<f64>>,
    pub is_event: bool,
}

/// Row-per-series matrix (`B·N × cols`) from per-sample `cols × N` matrices.
pub fn series_rows(samples: &[&Sample], pick: impl Fn(&Sample) -> &Matrix) -> Matrix {
    let first = pick(samples[0]);
    let (len, n) = first.shape();
    let mut out = Matrix::zeros(samples.len() * n, len);
    for (b, s) in samples.iter().enumerate() {
        let m = pick(s);
        for v in 0..n {
            out.row_mut(b * n + v).copy_from_slice(&m.column(v));
        }
    }
    out
}

/// Inverse of [`series_rows`] for prediction rows.
pub fn sample_matrices(rows: &Matrix, n: usize) -> Vec<Matrix> {
    let h = rows.cols();
    (0..rows.rows() / n)
        .map(|b| {
            let mut m = Matrix::zeros(h, n);
            for v in 0..n {
                m.set_column(v, rows.row(b * n + v));
            }
            m
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Ts,
    Numeric,
    Full,
}

pub struct ModelForward {
    pub y_ts: Var,
    pub y_num: Var,
    pub y_final: Var,
    pub align_loss: Option<Var>,
    /// `B·N × H` ground truth.
    pub target: Matrix,
}

/// Per-sample `H × N` outputs on the normalized scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub y_ts: Vec<Matrix>,
    pub y_num: Vec<Matrix>,
    pub y_final: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub branch: NumericalBranch,
    pub partition: BandPartition,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    stage: u8,
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let branch = NumericalBranch::new(cfg.numeric.clone())?;
        let partition = partition_bands(cfg.numeric.horizon, cfg.low_frac, cfg.high_frac)?;
        let mut store = ParamStore::new();
        branch.init_params(&mut store, seed);
        let init = FusionWeights { w: [[cfg.fusion_init; 3]; 2], trainable: true };
        init_fusion_params(&mut store, cfg.numeric.horizon, &init, seed);
        Ok(Self { cfg, branch, partition, store })
    }

    pub fn fusion_weights(&self) -> FusionWeights {
        FusionWeights::from_store(&self.store).expect("fusion parameters registered")
    }

    /// Parameters the given stage may update.
    pub fn stage_params(&self, stage: u8) -> Vec<ParamId> {
        let c = &self.cfg;
        let mut prefixes: Vec<&str> = match stage {
            1 => vec!["encoder.", "head."],
            2 => vec!["align."],
            _ => vec!["encoder.", "head."],
        };
        if stage == 3 {
            if c.numeric.use_eta {
                prefixes.push("align.");
            }
            if c.use_event {
                match c.fusion {
                    FusionStrategy::Aff => prefixes.extend(["fusion.num.", "fusion.event."]),
                    FusionStrategy::Mlp => prefixes.push("fusion.mlp."),
                    FusionStrategy::CrossAttention => prefixes.push("fusion.xattn."),
                }
            }
        }
        let mut ids: Vec<ParamId> = prefixes.iter().flat_map(|p| self.store.group(p)).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Full forward: numerical branch then fusion with the event forecast.
    pub fn forward(&self, g: &mut Graph, samples: &[&Sample], rng: Option<&mut ChaCha8Rng>) -> Result<ModelForward> {
        self.forward_mode(g, samples, rng, Mode::Full)
    }

    /// Encoder and head only; every output is `Ŷ_ts`.
    pub fn forward_ts(&self, g: &mut Graph, samples: &[&Sample], rng: Option<&mut ChaCha8Rng>) -> Result<ModelForward> {
        self.forward_mode(g, samples, rng, Mode::Ts)
    }

    /// Numerical branch without fusion.
    pub fn forward_numeric(&self, g: &mut Graph, samples: &[&Sample], rng: Option<&mut ChaCha8Rng>) -> Result<ModelForward> {
        self.forward_mode(g, samples, rng, Mode::Numeric)
    }

    fn forward_mode(&self, g: &mut Graph, samples: &[&Sample], rng: Option<&mut ChaCha8Rng>, mode: Mode) -> Result<ModelForward> {
        if samples.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let c = &self.cfg.numeric;
        let n = c.n_vars;
        for s in samples {
            if s.x.shape() != (c.lookback, n) || s.y.shape() != (c.horizon, n) {
                return Err(Error::Shape(format!(
                    "window {} has x {:?} and y {:?}, expected ({}, {n}) and ({}, {n})",
                    s.window_id,
                    s.x.shape(),
                    s.y.shape(),
                    c.lookback,
                    c.horizon
                )));
            }
        }
        let ts_branch;
        let branch = if mode == Mode::Ts && c.use_eta {
            let mut cfg = c.clone();
            cfg.use_eta = false;
            ts_branch = NumericalBranch { cfg };
            &ts_branch
        } else {
            &self.branch
        };
        let text = if branch.cfg.use_eta {
            let tokens: Vec<&Matrix> = samples
                .iter()
                .map(|s| s.tokens.as_ref().ok_or_else(|| Error::Precondition(format!("window {} has no text embeddings", s.window_id))))
                .collect::<Result<_>>()?;
            Some(TextBatch::from_samples(&tokens))
        } else {
            None
        };
        let batch = NumericBatch { x: series_rows(samples, |s| &s.x), samples: samples.len(), text };
        let target = series_rows(samples, |s| &s.y);
        let f = branch.forward(g, &self.store, &batch, rng)?;
        let y_final = if self.cfg.use_event && mode == Mode::Full {
            let missing: Vec<usize> = samples.iter().filter(|s| s.event.is_none()).map(|s| s.window_id).collect();
            if !missing.is_empty() {
                return Err(Error::MissingEvents(missing));
            }
            let h = c.horizon;
            let mut ev = Matrix::zeros(samples.len(), h);
            for (b, s) in samples.iter().enumerate() {
                let e = s.event.as_ref().expect("checked");
                if e.len() != h {
                    return Err(Error::Length { expected: h, got: e.len() });
                }
                ev.row_mut(b).copy_from_slice(e);
            }
            let ev = g.input(ev);
            self.fuse_target_rows(g, f.y_num, ev, samples.len())
        } else {
            f.y_num
        };
        Ok(ModelForward { y_ts: f.y_ts, y_num: f.y_num, y_final, align_loss: f.align_loss, target })
    }

    /// Fuse the target row of every sample with its event forecast; the
    /// other variables keep the numerical prediction.
    fn fuse_target_rows(&self, g: &mut Graph, y_num: Var, event: Var, b: usize) -> Var {
        let n = self.cfg.numeric.n_vars;
        let t = self.target_index();
        if n == 1 {
            return fuse_graph(g, &self.store, self.cfg.fusion, &self.partition, y_num, event);
        }
        let rows: Vec<Var> = (0..b).map(|i| g.slice_rows(y_num, i * n + t, 1)).collect();
        let num_t = g.concat_rows(&rows);
        let fused = fuse_graph(g, &self.store, self.cfg.fusion, &self.partition, num_t, event);
        let mut parts = Vec::with_capacity(3 * b);
        for i in 0..b {
            if t > 0 {
                parts.push(g.slice_rows(y_num, i * n, t));
            }
            parts.push(g.slice_rows(fused, i, 1));
            if t + 1 < n {
                parts.push(g.slice_rows(y_num, i * n + t + 1, n - t - 1));
            }
        }
        g.concat_rows(&parts)
    }

    pub fn target_index(&self) -> usize {
        self.cfg.target_index
    }

    pub fn predict(&self, samples: &[Sample], batch_size: usize) -> Result<Predictions> {
        let n = self.cfg.numeric.n_vars;
        let mut out = Predictions { y_ts: Vec::new(), y_num: Vec::new(), y_final: Vec::new() };
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let mut g = Graph::new();
            let f = self.forward(&mut g, &refs, None)?;
            out.y_ts.extend(sample_matrices(g.value(f.y_ts), n));
            out.y_num.extend(sample_matrices(g.value(f.y_num), n));
            out.y_final.extend(sample_matrices(g.value(f.y_final), n));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, stage: u8) -> Result<()> {
        let ck = Checkpoint { version: CHECKPOINT_VERSION, stage, config: self.cfg.clone(), params: self.store.clone() };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, serde_json::to_vec(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, u8)> {
        let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&body).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Compatibility(format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", ck.version)));
        }
        let mut store = ck.params;
        store.reindex();
        let branch = NumericalBranch::new(ck.config.numeric.clone())?;
        let partition = partition_bands(ck.config.numeric.horizon, ck.config.low_frac, ck.config.high_frac)?;
        Ok((Self { cfg: ck.config, branch, partition, store }, ck.stage))
    }
}
