//! Numerical branch: patch-transformer series encoder, dual-query text
//! component extraction, ts-text cross attention, decomposed contrastive
//! alignment, and the shared forecasting head.
//!
//! Batches use a row-per-series layout: row `b * N + v` holds variable `v`
//! of sample `b`. Look-back rows are `L` wide and prediction rows `H` wide.

mod decompose;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{normal_matrix, xavier, AttnGroup, Graph, Matrix, ParamStore, Var};

pub use decompose::{clamp_kernel, decompose, decompose_rows, moving_average};

const LN_EPS: f64 = 1e-5;
const COS_EPS: f64 = 1e-8;
const REVIN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesEncoderConfig {
    pub d_ts: usize,
    pub n_layers: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl SeriesEncoderConfig {
    /// Patch length `max(2, L/4)` and half-overlapping stride.
    pub fn for_lookback(lookback: usize) -> Self {
        let patch_len = (lookback / 4).max(2);
        Self {
            d_ts: 16,
            n_layers: 2,
            patch_len,
            patch_stride: (patch_len / 2).max(1),
            dropout: 0.0,
            pooling: Pooling::Mean,
        }
    }

    pub fn validate(&self, lookback: usize) -> Result<()> {
        if self.patch_len > lookback {
            return Err(Error::Config(format!(
                "patch_len {} exceeds lookback {lookback}",
                self.patch_len
            )));
        }
        if self.patch_stride == 0 || self.n_layers == 0 || self.d_ts == 0 || self.patch_len == 0 {
            return Err(Error::Config("patch_len, stride, n_layers and d_ts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Patch start offsets; a final patch is aligned to the end when the
    /// stride does not land there.
    pub fn patch_starts(&self, lookback: usize) -> Vec<usize> {
        let mut s: Vec<usize> = (0..=lookback - self.patch_len).step_by(self.patch_stride).collect();
        if *s.last().expect("at least one patch") != lookback - self.patch_len {
            s.push(lookback - self.patch_len);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub n_vars: usize,
    pub encoder: SeriesEncoderConfig,
    pub d_text: usize,
    /// Moving-average kernel before clamping to the look-back.
    pub decomp_kernel: usize,
    /// Per-window instance normalization around the encoder.
    pub revin: bool,
    pub temperature: f64,
    pub use_eta: bool,
    /// Trend/seasonal contrastive pairs; when false a single ts-text pair.
    pub decomposition: bool,
    /// Whether the alignment loss is computed at all.
    pub contrastive: bool,
}

impl NumericConfig {
    pub fn new(lookback: usize, horizon: usize, n_vars: usize) -> Self {
        Self {
            lookback,
            horizon,
            n_vars,
            encoder: SeriesEncoderConfig::for_lookback(lookback),
            d_text: 32,
            decomp_kernel: 25,
            revin: true,
            temperature: 1.0,
            use_eta: true,
            decomposition: true,
            contrastive: true,
        }
    }

    pub fn kernel(&self) -> usize {
        clamp_kernel(self.decomp_kernel, self.lookback)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.lookback)?;
        if self.horizon == 0 || self.n_vars == 0 || self.d_text == 0 {
            return Err(Error::Config("horizon, n_vars and d_text must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Token embeddings of one text per sample, stacked.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub tokens: Matrix,
    pub ranges: Vec<Range<usize>>,
}

impl TextBatch {
    pub fn from_samples(samples: &[&Matrix]) -> Self {
        let mut ranges = Vec::with_capacity(samples.len());
        let mut start = 0;
        for m in samples {
            ranges.push(start..start + m.rows());
            start += m.rows();
        }
        Self {
            tokens: Matrix::vstack(samples),
            ranges,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NumericBatch {
    /// `B·N × L` look-back rows.
    pub x: Matrix,
    pub samples: usize,
    pub text: Option<TextBatch>,
}

#[derive(Debug, Clone, Copy)]
pub struct Aligned {
    pub e_tr: Var,
    pub e_se: Var,
    pub z_tr: Var,
    pub z_se: Var,
    pub zt_tr: Var,
    pub zt_se: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NumericForward {
    pub h_ts: Var,
    pub h_tr: Option<Var>,
    pub h_se: Option<Var>,
    pub aligned: Option<Aligned>,
    /// `B·N × H` prediction without text.
    pub y_ts: Var,
    /// `B·N × H` numerical-branch prediction.
    pub y_num: Var,
    pub align_loss: Option<Var>,
}

/// Stateless view over the numerical-branch parameters in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericalBranch {
    pub cfg: NumericConfig,
}

fn p(g: &mut Graph, store: &ParamStore, name: &str) -> Var {
    let id = store.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    g.param(store, id)
}

fn dropout(g: &mut Graph, a: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(r) if rate > 0.0 => {
            let n = g.value(a).data().len();
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..n).map(|_| if r.gen_bool(rate) { 0.0 } else { keep }).collect();
            g.dropout(a, mask)
        }
        _ => a,
    }
}

/// Per-row mean and `sqrt(var + eps)`.
pub fn revin_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let l = x.cols() as f64;
    (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / l;
            let v = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / l;
            (m, (v + REVIN_EPS).sqrt())
        })
        .unzip()
}

impl NumericalBranch {
    pub fn new(cfg: NumericConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Register every numerical-branch parameter. Each group draws from its
    /// own stream of `seed` so toggling one component never shifts another.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let c = &self.cfg;
        let e = &c.encoder;
        let d = e.d_ts;
        let n_patches = e.patch_starts(c.lookback).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        store.add("encoder.patch.w", xavier(&mut rng, e.patch_len, d));
        store.add("encoder.patch.b", Matrix::zeros(1, d));
        store.add("encoder.pos", normal_matrix(&mut rng, n_patches, d, 0.02));
        for l in 0..e.n_layers {
            let pre = format!("encoder.l{l}");
            store.add(format!("{pre}.ln1.g"), Matrix::filled(1, d, 1.0));
            store.add(format!("{pre}.ln1.b"), Matrix::zeros(1, d));
            for w in ["wq", "wk", "wv", "wo"] {
                store.add(format!("{pre}.{w}"), xavier(&mut rng, d, d));
            }
            store.add(format!("{pre}.bo"), Matrix::zeros(1, d));
            store.add(format!("{pre}.ln2.g"), Matrix::filled(1, d, 1.0));
            store.add(format!("{pre}.ln2.b"), Matrix::zeros(1, d));
            store.add(format!("{pre}.ff1.w"), xavier(&mut rng, d, 2 * d));
            store.add(format!("{pre}.ff1.b"), Matrix::zeros(1, 2 * d));
            store.add(format!("{pre}.ff2.w"), xavier(&mut rng, 2 * d, d));
            store.add(format!("{pre}.ff2.b"), Matrix::zeros(1, d));
        }
        store.add("encoder.lnf.g", Matrix::filled(1, d, 1.0));
        store.add("encoder.lnf.b", Matrix::zeros(1, d));
        if e.pooling == Pooling::Flatten {
            store.add("encoder.pool.w", xavier(&mut rng, n_patches * d, d));
            store.add("encoder.pool.b", Matrix::zeros(1, d));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        store.add("head.w", xavier(&mut rng, d, c.horizon));
        store.add("head.b", Matrix::zeros(1, c.horizon));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let q_std = 1.0 / (c.d_text as f64).sqrt();
        store.add("align.q_tr", normal_matrix(&mut rng, c.n_vars, c.d_text, q_std));
        store.add("align.q_se", normal_matrix(&mut rng, c.n_vars, c.d_text, q_std));
        store.add("align.proj.w", xavier(&mut rng, d, c.d_text));
        store.add("align.proj.b", Matrix::zeros(1, c.d_text));
        store.add("align.proj_inv.w", xavier(&mut rng, c.d_text, d));
        store.add("align.proj_inv.b", Matrix::zeros(1, d));
    }

    fn affine_norm(&self, g: &mut Graph, store: &ParamStore, h: Var, name: &str) -> Var {
        let n = g.layer_norm(h, LN_EPS);
        let gain = p(g, store, &format!("{name}.g"));
        let bias = p(g, store, &format!("{name}.b"));
        let n = g.mul_row(n, gain);
        g.add_row(n, bias)
    }

    /// Encode `R × L` rows to `R × d_ts`, one row per series.
    pub fn encode_series(&self, g: &mut Graph, store: &ParamStore, x: &Matrix, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let e = &self.cfg.encoder;
        if x.cols() < e.patch_len {
            return Err(Error::Config(format!("lookback {} shorter than patch_len {}", x.cols(), e.patch_len)));
        }
        let starts = e.patch_starts(x.cols());
        let np = starts.len();
        let rows = x.rows();
        let mut patches = Matrix::zeros(rows * np, e.patch_len);
        for r in 0..rows {
            for (k, &s) in starts.iter().enumerate() {
                patches.row_mut(r * np + k).copy_from_slice(&x.row(r)[s..s + e.patch_len]);
            }
        }
        let inp = g.input(patches);
        let w = p(g, store, "encoder.patch.w");
        let b = p(g, store, "encoder.patch.b");
        let mut h = g.linear(inp, w, b);
        let pos = p(g, store, "encoder.pos");
        let pos = g.tile_rows(pos, rows);
        h = g.add(h, pos);
        let groups: Vec<AttnGroup> = (0..rows)
            .map(|r| AttnGroup { q: r * np..(r + 1) * np, kv: r * np..(r + 1) * np })
            .collect();
        let scale = 1.0 / (e.d_ts as f64).sqrt();
        for l in 0..e.n_layers {
            let pre = format!("encoder.l{l}");
            let a = self.affine_norm(g, store, h, &format!("{pre}.ln1"));
            let wq = p(g, store, &format!("{pre}.wq"));
            let wk = p(g, store, &format!("{pre}.wk"));
            let wv = p(g, store, &format!("{pre}.wv"));
            let wo = p(g, store, &format!("{pre}.wo"));
            let bo = p(g, store, &format!("{pre}.bo"));
            let q = g.matmul(a, wq);
            let k = g.matmul(a, wk);
            let v = g.matmul(a, wv);
            let att = g.attention(q, k, v, groups.clone(), scale);
            let o = g.linear(att, wo, bo);
            let o = dropout(g, o, e.dropout, &mut rng);
            h = g.add(h, o);
            let a = self.affine_norm(g, store, h, &format!("{pre}.ln2"));
            let w1 = p(g, store, &format!("{pre}.ff1.w"));
            let b1 = p(g, store, &format!("{pre}.ff1.b"));
            let w2 = p(g, store, &format!("{pre}.ff2.w"));
            let b2 = p(g, store, &format!("{pre}.ff2.b"));
            let f = g.linear(a, w1, b1);
            let f = g.gelu(f);
            let f = g.linear(f, w2, b2);
            let f = dropout(g, f, e.dropout, &mut rng);
            h = g.add(h, f);
        }
        let h = self.affine_norm(g, store, h, "encoder.lnf");
        Ok(match e.pooling {
            Pooling::Mean => g.group_mean(h, np),
            Pooling::Flatten => {
                let flat = g.reshape(h, rows, np * e.d_ts);
                let w = p(g, store, "encoder.pool.w");
                let b = p(g, store, "encoder.pool.b");
                g.linear(flat, w, b)
            }
        })
    }

    /// Dual-query attention over each sample's tokens: `B·N × d_text` twice.
    pub fn extract_text_components(&self, g: &mut Graph, store: &ParamStore, text: &TextBatch) -> Result<(Var, Var)> {
        let n = self.cfg.n_vars;
        if text.tokens.cols() != self.cfg.d_text {
            return Err(Error::Shape(format!(
                "text width {} does not match d_text {}",
                text.tokens.cols(),
                self.cfg.d_text
            )));
        }
        if text.ranges.iter().any(|r| r.is_empty()) {
            return Err(Error::Shape("every sample needs at least one token".into()));
        }
        let b = text.ranges.len();
        let tokens = g.input(text.tokens.clone());
        let groups: Vec<AttnGroup> = text
            .ranges
            .iter()
            .enumerate()
            .map(|(i, r)| AttnGroup { q: i * n..(i + 1) * n, kv: r.clone() })
            .collect();
        let scale = 1.0 / (self.cfg.d_text as f64).sqrt();
        let mut out = [None, None];
        for (slot, name) in out.iter_mut().zip(["align.q_tr", "align.q_se"]) {
            let q = p(g, store, name);
            let q = g.tile_rows(q, b);
            *slot = Some(g.attention(q, tokens, tokens, groups.clone(), scale));
        }
        Ok((out[0].unwrap(), out[1].unwrap()))
    }

    /// Cross attention from projected series embeddings onto the text
    /// components of the same sample, then back to the series space.
    pub fn align(&self, g: &mut Graph, store: &ParamStore, h_ts: Var, e_tr: Var, e_se: Var) -> Result<Aligned> {
        let n = self.cfg.n_vars;
        let rows = g.value(h_ts).rows();
        for (name, v, width) in [("H_ts", h_ts, self.cfg.encoder.d_ts), ("E_tr", e_tr, self.cfg.d_text), ("E_se", e_se, self.cfg.d_text)] {
            let (r, c) = g.value(v).shape();
            if r != rows || c != width || rows % n != 0 {
                return Err(Error::Shape(format!("{name} is {r}×{c}, expected {rows}×{width}")));
            }
        }
        let groups: Vec<AttnGroup> = (0..rows / n)
            .map(|b| AttnGroup { q: b * n..(b + 1) * n, kv: b * n..(b + 1) * n })
            .collect();
        let scale = 1.0 / (self.cfg.d_text as f64).sqrt();
        let pw = p(g, store, "align.proj.w");
        let pb = p(g, store, "align.proj.b");
        let query = g.linear(h_ts, pw, pb);
        let z_tr = g.attention(query, e_tr, e_tr, groups.clone(), scale);
        let z_se = g.attention(query, e_se, e_se, groups, scale);
        let iw = p(g, store, "align.proj_inv.w");
        let ib = p(g, store, "align.proj_inv.b");
        let zt_tr = g.linear(z_tr, iw, ib);
        let zt_se = g.linear(z_se, iw, ib);
        Ok(Aligned { e_tr, e_se, z_tr, z_se, zt_tr, zt_se })
    }

    /// Shared linear head `d_ts → H`.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, rep: Var) -> Var {
        let w = p(g, store, "head.w");
        let b = p(g, store, "head.b");
        g.linear(rep, w, b)
    }

    pub fn predict_ts_only(&self, g: &mut Graph, store: &ParamStore, h_ts: Var) -> Var {
        self.head(g, store, h_ts)
    }

    /// `head(½·H_ts + ½·(Zt_tr + Zt_se))`.
    pub fn predict_numeric(&self, g: &mut Graph, store: &ParamStore, h_ts: Var, zt_tr: Var, zt_se: Var) -> Var {
        let z = g.add(zt_tr, zt_se);
        let z = g.scale(z, 0.5);
        let h = g.scale(h_ts, 0.5);
        let rep = g.add(h, z);
        self.head(g, store, rep)
    }

    /// Full forward pass over a batch. `rng` enables dropout (training).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &NumericBatch, mut rng: Option<&mut ChaCha8Rng>) -> Result<NumericForward> {
        let c = &self.cfg;
        let rows = batch.x.rows();
        if rows != batch.samples * c.n_vars || batch.x.cols() != c.lookback {
            return Err(Error::Shape(format!(
                "batch is {}×{}, expected {}×{}",
                rows,
                batch.x.cols(),
                batch.samples * c.n_vars,
                c.lookback
            )));
        }
        let (mean, std) = if c.revin {
            revin_stats(&batch.x)
        } else {
            (vec![0.0; rows], vec![1.0; rows])
        };
        let mut xn = batch.x.clone();
        for r in 0..rows {
            for v in xn.row_mut(r) {
                *v = (*v - mean[r]) / std[r];
            }
        }
        let need_components = c.use_eta && c.contrastive && c.decomposition;
        let (h_ts, h_tr, h_se) = if need_components {
            let (tr, se) = decompose_rows(&xn, c.kernel())?;
            let all = Matrix::vstack(&[&xn, &tr, &se]);
            let h = self.encode_series(g, store, &all, rng.as_deref_mut())?;
            let h_ts = g.slice_rows(h, 0, rows);
            let h_tr = g.slice_rows(h, rows, rows);
            let h_se = g.slice_rows(h, 2 * rows, rows);
            (h_ts, Some(h_tr), Some(h_se))
        } else {
            (self.encode_series(g, store, &xn, rng.as_deref_mut())?, None, None)
        };

        let denorm = |g: &mut Graph, y: Var| {
            if c.revin {
                g.row_affine(y, std.clone(), mean.clone())
            } else {
                y
            }
        };
        let y_ts_n = self.predict_ts_only(g, store, h_ts);
        let y_ts = denorm(g, y_ts_n);
        if !c.use_eta {
            return Ok(NumericForward { h_ts, h_tr, h_se, aligned: None, y_ts, y_num: y_ts, align_loss: None });
        }
        let text = batch
            .text
            .as_ref()
            .ok_or_else(|| Error::Precondition("text alignment enabled but batch has no token embeddings".into()))?;
        if text.ranges.len() != batch.samples {
            return Err(Error::Shape(format!("{} texts for {} samples", text.ranges.len(), batch.samples)));
        }
        let (e_tr, e_se) = self.extract_text_components(g, store, text)?;
        let aligned = self.align(g, store, h_ts, e_tr, e_se)?;
        let y_num_n = self.predict_numeric(g, store, h_ts, aligned.zt_tr, aligned.zt_se);
        let y_num = denorm(g, y_num_n);

        let align_loss = if !c.contrastive {
            None
        } else {
            let n = c.n_vars;
            let mean_over_vars = |g: &mut Graph, v: Var| g.group_mean(v, n);
            if c.decomposition {
                let (h_tr, h_se) = (h_tr.expect("components encoded"), h_se.expect("components encoded"));
                let ht = mean_over_vars(g, h_tr);
                let hs = mean_over_vars(g, h_se);
                let zt = mean_over_vars(g, aligned.zt_tr);
                let zs = mean_over_vars(g, aligned.zt_se);
                Some(contrastive_loss(g, &[(ht, zt), (hs, zs)], c.temperature))
            } else {
                let h = mean_over_vars(g, h_ts);
                let z = g.add(aligned.zt_tr, aligned.zt_se);
                let z = g.scale(z, 0.5);
                let z = mean_over_vars(g, z);
                Some(contrastive_loss(g, &[(h, z)], c.temperature))
            }
        };
        Ok(NumericForward { h_ts, h_tr, h_se, aligned: Some(aligned), y_ts, y_num, align_loss })
    }
}

/// Symmetric cosine InfoNCE summed over component pairs and halved.
/// Each pair is `(H̄, Z̄)` with one row per sample.
pub fn contrastive_loss(g: &mut Graph, pairs: &[(Var, Var)], temperature: f64) -> Var {
    let mut terms = Vec::with_capacity(2 * pairs.len());
    for &(h, z) in pairs {
        assert_eq!(g.value(h).shape(), g.value(z).shape(), "contrastive pair shape mismatch");
        let hn = g.row_normalize(h, COS_EPS);
        let zn = g.row_normalize(z, COS_EPS);
        let sim = g.matmul_t(hn, zn);
        let sim = if temperature == 1.0 { sim } else { g.scale(sim, 1.0 / temperature) };
        terms.push((g.info_nce(sim, false), 0.5));
        terms.push((g.info_nce(sim, true), 0.5));
    }
    g.weighted_sum(&terms)
}

/// Value-only convenience wrapper: trend and seasonal pairs as matrices.
pub fn contrastive_loss_value(h_tr: &Matrix, h_se: &Matrix, z_tr: &Matrix, z_se: &Matrix, temperature: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = [h_tr, z_tr, h_se, z_se].iter().map(|m| g.input((*m).clone())).collect();
    let l = contrastive_loss(&mut g, &[(vars[0], vars[1]), (vars[2], vars[3])], temperature);
    g.scalar(l)
}

/// Stack per-sample `L × N` look-backs into `B·N × L` rows.
pub fn rows_from_samples(samples: &[&Matrix]) -> Matrix {
    let n = samples.first().map_or(0, |m| m.cols());
    let l = samples.first().map_or(0, |m| m.rows());
    let mut out = Matrix::zeros(samples.len() * n, l);
    for (b, m) in samples.iter().enumerate() {
        for v in 0..n {
            out.row_mut(b * n + v).copy_from_slice(&m.column(v));
        }
    }
    out
}

/// Inverse of [`rows_from_samples`] for predictions: `B·N × H` rows to
/// `B` matrices of `H × N`.
pub fn samples_from_rows(rows: &Matrix, n: usize) -> Vec<Matrix> {
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
