//! Adaptive frequency fusion: both branch forecasts are split into
//! low/mid/high spectral bands and recombined with six learnable weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{filter_bins, frac_to_bin, irfft, one_sided_len, range_mask, rfft};
use crate::tensor::{normal_matrix, xavier, AttnGroup, Graph, Matrix, ParamStore, Var};

pub const BANDS: [&str; 3] = ["low", "mid", "high"];
pub const BRANCHES: [&str; 2] = ["num", "event"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPartition {
    pub horizon: usize,
    pub bins: usize,
    pub low_frac: f64,
    pub high_frac: f64,
    /// Low, mid and high masks over the one-sided bins.
    pub masks: [Vec<bool>; 3],
}

impl BandPartition {
    pub fn band_bins(&self, band: usize) -> Vec<usize> {
        (0..self.bins).filter(|k| self.masks[band][*k]).collect()
    }
}

/// Bin boundaries `⌈low·F⌉` and `⌈high·F⌉`, repaired so every band is
/// non-empty when `F ≥ 3`. With `F = 2` the mid band is empty.
pub fn partition_bands(horizon: usize, low_frac: f64, high_frac: f64) -> Result<BandPartition> {
    if horizon < 2 {
        return Err(Error::Argument(format!("horizon must be at least 2, got {horizon}")));
    }
    if !(0.0 < low_frac && low_frac < high_frac && high_frac < 1.0) {
        return Err(Error::Argument(format!(
            "band fractions must satisfy 0 < low < high < 1, got {low_frac}, {high_frac}"
        )));
    }
    let f = one_sided_len(horizon);
    let mut lo = frac_to_bin(low_frac, f).clamp(1, f);
    let mut hi = frac_to_bin(high_frac, f).clamp(lo, f);
    if hi >= f {
        hi = f - 1;
    }
    if f >= 3 {
        lo = lo.min(f - 2);
        hi = hi.max(lo);
        if hi == lo {
            // empty mid: take a bin from the larger neighbour
            if lo > f - hi {
                lo -= 1;
            } else {
                hi += 1;
            }
        }
    }
    let low = (0..f).map(|k| k < lo).collect();
    let mid = (0..f).map(|k| k >= lo && k < hi).collect();
    let high = (0..f).map(|k| k >= hi).collect();
    Ok(BandPartition {
        horizon,
        bins: f,
        low_frac,
        high_frac,
        masks: [low, mid, high],
    })
}

/// `w[branch][band]`, branch 0 = numerical, 1 = event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w: [[f64; 3]; 2],
    pub trainable: bool,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { w: [[0.5; 3]; 2], trainable: true }
    }
}

impl FusionWeights {
    pub fn single_branch(branch: usize) -> Self {
        let mut w = [[0.0; 3]; 2];
        w[branch] = [1.0; 3];
        Self { w, trainable: false }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().flatten().all(|v| v.is_finite())
    }

    pub fn param_name(branch: usize, band: usize) -> String {
        format!("fusion.{}.{}", BRANCHES[branch], BANDS[band])
    }

    pub fn from_store(store: &ParamStore) -> Option<Self> {
        let mut w = [[0.0; 3]; 2];
        for (b, row) in w.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = store.get(store.id(&Self::param_name(b, k))?)[(0, 0)];
            }
        }
        Some(Self { w, trainable: true })
    }

    pub fn write_to(&self, store: &mut ParamStore) {
        for b in 0..2 {
            for k in 0..3 {
                let id = store.id(&Self::param_name(b, k)).expect("fusion parameters registered");
                store.get_mut(id)[(0, 0)] = self.w[b][k];
            }
        }
    }
}

/// One-sided spectra of both branch predictions, one vector per variable.
#[derive(Debug, Clone)]
pub struct SpectralPair {
    pub num: Vec<Vec<Complex64>>,
    pub event: Vec<Vec<Complex64>>,
}

impl SpectralPair {
    pub fn of(y_num: &Matrix, y_event: &Matrix) -> Self {
        let spec = |m: &Matrix| (0..m.cols()).map(|c| rfft(&m.column(c))).collect();
        Self { num: spec(y_num), event: spec(y_event) }
    }
}

fn check_pair(y_num: &Matrix, y_event: &Matrix, p: &BandPartition) -> Result<()> {
    if y_num.shape() != y_event.shape() || y_num.rows() != p.horizon {
        return Err(Error::Shape(format!(
            "fusion inputs {:?} and {:?} do not match horizon {}",
            y_num.shape(),
            y_event.shape(),
            p.horizon
        )));
    }
    for (name, m) in [("num", y_num), ("event", y_event)] {
        if !m.is_finite() {
            return Err(Error::Value(format!("non-finite value in the {name} branch prediction")));
        }
    }
    Ok(())
}

/// Per variable: transform, weight each band of each branch, sum, invert.
/// Inputs and output are `H × N`.
pub fn fuse(y_num: &Matrix, y_event: &Matrix, weights: &FusionWeights, p: &BandPartition) -> Result<Matrix> {
    check_pair(y_num, y_event, p)?;
    let sp = SpectralPair::of(y_num, y_event);
    let mut out = Matrix::zeros(y_num.rows(), y_num.cols());
    for c in 0..y_num.cols() {
        let fused: Vec<Complex64> = (0..p.bins)
            .map(|k| {
                let band = (0..3).find(|b| p.masks[*b][k]).expect("partition covers every bin");
                sp.num[c][k] * weights.w[0][band] + sp.event[c][k] * weights.w[1][band]
            })
            .collect();
        out.set_column(c, &irfft(&fused, p.horizon));
    }
    Ok(out)
}

/// Band component of every column of `m`.
pub fn band_component(m: &Matrix, p: &BandPartition, band: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for c in 0..m.cols() {
        out.set_column(c, &filter_bins(&m.column(c), &p.masks[band]));
    }
    out
}

/// `∂ MSE(fuse(..), Y) / ∂ w[branch][band]`, using linearity of the fusion
/// in the weights: `2/(H·N) · ⟨Ŷ_final − Y, bandpass(Ŷ_branch)⟩`.
pub fn fuse_weight_gradient(
    y_num: &Matrix,
    y_event: &Matrix,
    weights: &FusionWeights,
    p: &BandPartition,
    y: &Matrix,
) -> Result<[[f64; 3]; 2]> {
    if y.shape() != y_num.shape() {
        return Err(Error::Shape("target shape differs from predictions".into()));
    }
    let fused = fuse(y_num, y_event, weights, p)?;
    let resid = fused.zip_map(y, |a, b| a - b);
    let scale = 2.0 / resid.data().len() as f64;
    let mut grad = [[0.0; 3]; 2];
    for (b, src) in [y_num, y_event].into_iter().enumerate() {
        for (k, gk) in grad[b].iter_mut().enumerate() {
            let comp = band_component(src, p, k);
            *gk = scale * crate::tensor::dot(resid.data(), comp.data());
        }
    }
    Ok(grad)
}

/// Keep one-sided bins in `[⌈lo·F⌉, ⌈hi·F⌉)`.
pub fn bandpass_filter(series: &[f64], lo_frac: f64, hi_frac: f64) -> Result<Vec<f64>> {
    if !(0.0 <= lo_frac && lo_frac < hi_frac && hi_frac <= 1.0) {
        return Err(Error::Argument(format!("invalid band [{lo_frac}, {hi_frac})")));
    }
    let mask = range_mask(one_sided_len(series.len()), lo_frac, hi_frac);
    Ok(filter_bins(series, &mask))
}

/// Low-pass, band-pass and high-pass components with the analysis
/// boundaries; they sum back to the input.
pub fn analysis_components(series: &[f64], low_frac: f64, high_frac: f64) -> Result<[Vec<f64>; 3]> {
    Ok([
        bandpass_filter(series, 0.0, low_frac)?,
        bandpass_filter(series, low_frac, high_frac)?,
        bandpass_filter(series, high_frac, 1.0)?,
    ])
}

/// Rows-as-signals fusion on the autodiff tape (`R × H` inputs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    Aff,
    Mlp,
    CrossAttention,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aff" => Ok(Self::Aff),
            "mlp" => Ok(Self::Mlp),
            "cross-attention" => Ok(Self::CrossAttention),
            other => Err(Error::Argument(format!(
                "unknown fusion strategy `{other}` (expected aff, mlp, cross-attention)"
            ))),
        }
    }
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Aff => "aff",
            Self::Mlp => "mlp",
            Self::CrossAttention => "cross-attention",
        }
    }
}

pub const CROSS_DIM: usize = 8;

/// Register parameters for every strategy so switching strategies leaves
/// the rest of the model's initialization untouched.
pub fn init_fusion_params(store: &mut ParamStore, horizon: usize, init: &FusionWeights, seed: u64) {
    for b in 0..2 {
        for k in 0..3 {
            store.add(FusionWeights::param_name(b, k), Matrix::filled(1, 1, init.w[b][k]));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let hid = 2 * horizon;
    store.add("fusion.mlp.w1", xavier(&mut rng, 2 * horizon, hid));
    store.add("fusion.mlp.b1", Matrix::zeros(1, hid));
    store.add("fusion.mlp.w2", xavier(&mut rng, hid, horizon));
    store.add("fusion.mlp.b2", Matrix::zeros(1, horizon));
    store.add("fusion.xattn.wq", normal_matrix(&mut rng, 1, CROSS_DIM, 0.5));
    store.add("fusion.xattn.wk", normal_matrix(&mut rng, 1, CROSS_DIM, 0.5));
    store.add("fusion.xattn.wv", normal_matrix(&mut rng, 1, CROSS_DIM, 0.5));
    store.add("fusion.xattn.wo", normal_matrix(&mut rng, CROSS_DIM, 1, 0.1));
}

fn p(g: &mut Graph, store: &ParamStore, name: &str) -> Var {
    g.param(store, store.id(name).unwrap_or_else(|| panic!("missing parameter {name}")))
}

/// Fused `R × H` prediction from numerical and event rows.
pub fn fuse_graph(
    g: &mut Graph,
    store: &ParamStore,
    strategy: FusionStrategy,
    partition: &BandPartition,
    num: Var,
    event: Var,
) -> Var {
    match strategy {
        FusionStrategy::Aff => {
            let mut acc: Option<Var> = None;
            for (b, src) in [num, event].into_iter().enumerate() {
                for k in 0..3 {
                    if !partition.masks[k].iter().any(|m| *m) {
                        continue;
                    }
                    let comp = g.band_pass(src, partition.masks[k].clone());
                    let w = p(g, store, &FusionWeights::param_name(b, k));
                    let term = g.scale_by(comp, w);
                    acc = Some(match acc {
                        Some(a) => g.add(a, term),
                        None => term,
                    });
                }
            }
            acc.expect("at least one band")
        }
        FusionStrategy::Mlp => {
            let x = g.concat_cols(num, event);
            let w1 = p(g, store, "fusion.mlp.w1");
            let b1 = p(g, store, "fusion.mlp.b1");
            let w2 = p(g, store, "fusion.mlp.w2");
            let b2 = p(g, store, "fusion.mlp.b2");
            let h = g.linear(x, w1, b1);
            let h = g.gelu(h);
            g.linear(h, w2, b2)
        }
        FusionStrategy::CrossAttention => {
            // horizon steps as tokens: numerical steps query event steps
            let (rows, h) = g.value(num).shape();
            let qn = g.reshape(num, rows * h, 1);
            let ke = g.reshape(event, rows * h, 1);
            let wq = p(g, store, "fusion.xattn.wq");
            let wk = p(g, store, "fusion.xattn.wk");
            let wv = p(g, store, "fusion.xattn.wv");
            let wo = p(g, store, "fusion.xattn.wo");
            let q = g.matmul(qn, wq);
            let k = g.matmul(ke, wk);
            let v = g.matmul(ke, wv);
            let groups = (0..rows).map(|r| AttnGroup { q: r * h..(r + 1) * h, kv: r * h..(r + 1) * h }).collect();
            let a = g.attention(q, k, v, groups, 1.0 / (CROSS_DIM as f64).sqrt());
            let o = g.matmul(a, wo);
            let o = g.reshape(o, rows, h);
            g.add(num, o)
        }
    }
}

/// Least-squares refit of the six weights on `(num, event, truth)` triples
/// of `H × N` matrices, with a small ridge term.
pub fn fit_weights(samples: &[(&Matrix, &Matrix, &Matrix)], p: &BandPartition, ridge: f64) -> FusionWeights {
    let mut ata = [[0.0; 6]; 6];
    let mut atb = [0.0; 6];
    for (num, event, y) in samples {
        let comps: Vec<Matrix> = (0..6)
            .map(|j| band_component(if j < 3 { num } else { event }, p, j % 3))
            .collect();
        for i in 0..6 {
            atb[i] += crate::tensor::dot(comps[i].data(), y.data());
            for j in 0..6 {
                ata[i][j] += crate::tensor::dot(comps[i].data(), comps[j].data());
            }
        }
    }
    for (i, row) in ata.iter_mut().enumerate() {
        row[i] += ridge;
    }
    let x = solve6(ata, atb);
    FusionWeights { w: [[x[0], x[1], x[2]], [x[3], x[4], x[5]]], trainable: false }
}

/// Gaussian elimination with partial pivoting; singular directions get 0.
fn solve6(mut a: [[f64; 6]; 6], mut b: [f64; 6]) -> [f64; 6] {
    let n = 6;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        a.swap(col, piv);
        b.swap(col, piv);
        if a[col][col].abs() < 1e-12 {
            continue;
        }
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 6];
    for r in (0..n).rev() {
        if a[r][r].abs() < 1e-12 {
            continue;
        }
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// One heat-map cell of the boundary sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub low_frac: f64,
    pub high_frac: f64,
    pub mse: f64,
    pub weights: [[f64; 3]; 2],
}

/// For each boundary pair: refit weights on `fit`, score MSE on `eval`.
/// Pairs that do not satisfy `low < high` are skipped.
pub fn sensitivity_sweep(
    fit: &[(&Matrix, &Matrix, &Matrix)],
    eval: &[(&Matrix, &Matrix, &Matrix)],
    horizon: usize,
    lows: &[f64],
    highs: &[f64],
) -> Result<Vec<SweepCell>> {
    let mut out = Vec::new();
    for &lo in lows {
        for &hi in highs {
            if lo >= hi {
                continue;
            }
            let part = partition_bands(horizon, lo, hi)?;
            let w = fit_weights(fit, &part, 1e-9);
            let (mut se, mut n) = (0.0, 0usize);
            for (num, ev, y) in eval {
                let f = fuse(num, ev, &w, &part)?;
                se += f.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                n += y.data().len();
            }
            out.push(SweepCell { low_frac: lo, high_frac: hi, mse: se / n.max(1) as f64, weights: w.w });
        }
    }
    Ok(out)
}
