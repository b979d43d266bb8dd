//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter through
//! [`Graph::param`], which records the [`ParamId`] so that [`Graph::backward`]
//! can hand back one gradient per parameter.

use std::collections::HashMap;
use std::ops::Range;

use super::matrix::{dot, Matrix};
use super::params::{ParamId, ParamStore};
use crate::spectral;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention block: queries `q` attend over keys/values `kv`.
#[derive(Debug, Clone)]
pub struct AttnGroup {
    pub q: Range<usize>,
    pub kv: Range<usize>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm { a: Var, inv_std: Vec<f64> },
    RowNormalize { a: Var, norms: Vec<f64>, eps: f64 },
    GroupMean { a: Var, group: usize },
    Tile { a: Var, times: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    ConcatCols(Var, Var),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, groups: Vec<AttnGroup>, scale: f64, probs: Vec<Matrix> },
    BandPass { a: Var, mask: Vec<bool> },
    RowAffine { a: Var, scale: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    Mse { a: Var, target: Matrix },
    InfoNce { sim: Var, transposed: bool, probs: Matrix },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients from one backward pass, keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Matrix)> {
        self.by_param.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(Matrix::is_finite)
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m[(0, 0)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    /// Parameter leaf. Repeated calls for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// `a + 1·b` with `b` a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(bm.rows(), 1);
        assert_eq!(am.cols(), bm.cols());
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(bm.row(0)) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    /// `a ⊙ 1·b` with `b` a single row broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(bm.rows(), 1);
        assert_eq!(am.cols(), bm.cols());
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(bm.row(0)) {
                *o *= x;
            }
        }
        self.push(out, Op::MulRow(a, b))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// `a · s` where `s` is a 1×1 node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = self.value(a).scale(sv);
        self.push(out, Op::ScaleBy(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let am = self.value(a);
        let c = am.cols() as f64;
        let mut out = am.clone();
        let mut inv_std = Vec::with_capacity(am.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { a, inv_std })
    }

    /// Divide each row by `max(‖row‖, eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let am = self.value(a);
        let mut out = am.clone();
        let mut norms = Vec::with_capacity(am.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = dot(row, row).sqrt();
            if n <= eps {
                log::warn!("row_normalize: near-zero row norm {n:e}, guarded with eps");
            }
            let d = n.max(eps);
            for x in row.iter_mut() {
                *x /= d;
            }
            norms.push(n);
        }
        self.push(out, Op::RowNormalize { a, norms, eps })
    }

    /// Mean over consecutive blocks of `group` rows.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let am = self.value(a);
        assert!(group > 0 && am.rows() % group == 0, "rows not divisible by group");
        let n = am.rows() / group;
        let mut out = Matrix::zeros(n, am.cols());
        for g in 0..n {
            for r in 0..group {
                for (o, x) in out.row_mut(g).iter_mut().zip(am.row(g * group + r)) {
                    *o += x;
                }
            }
        }
        let out = out.scale(1.0 / group as f64);
        self.push(out, Op::GroupMean { a, group })
    }

    /// Stack `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let am = self.value(a);
        let parts: Vec<&Matrix> = std::iter::repeat(am).take(times).collect();
        let out = Matrix::vstack(&parts);
        self.push(out, Op::Tile { a, times })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::vstack(&mats);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..start+len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows { a, start })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.rows(), bm.rows());
        let mut out = Matrix::zeros(am.rows(), am.cols() + bm.cols());
        for r in 0..am.rows() {
            out.row_mut(r)[..am.cols()].copy_from_slice(am.row(r));
            out.row_mut(r)[am.cols()..].copy_from_slice(bm.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Reinterpret the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = Matrix::from_vec(rows, cols, self.value(a).data().to_vec());
        self.push(out, Op::Reshape(a))
    }

    /// Scaled dot-product attention evaluated independently per group:
    /// `softmax(q_g k_gᵀ · scale) v_g`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: Vec<AttnGroup>, scale: f64) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qm.cols(), km.cols(), "attention q/k width mismatch");
        assert_eq!(km.rows(), vm.rows(), "attention k/v length mismatch");
        let mut out = Matrix::zeros(qm.rows(), vm.cols());
        let mut probs = Vec::with_capacity(groups.len());
        for g in &groups {
            let mut p = Matrix::zeros(g.q.len(), g.kv.len());
            for (i, qi) in g.q.clone().enumerate() {
                let row = p.row_mut(i);
                for (j, kj) in g.kv.clone().enumerate() {
                    row[j] = dot(qm.row(qi), km.row(kj)) * scale;
                }
                softmax_in_place(row);
                let orow = out.row_mut(qi);
                for (j, kj) in g.kv.clone().enumerate() {
                    let w = row[j];
                    for (o, x) in orow.iter_mut().zip(vm.row(kj)) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, groups, scale, probs })
    }

    /// Attention weights recorded by an attention node, one matrix per group.
    pub fn attention_weights(&self, v: Var) -> Option<&[Matrix]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Keep only the masked one-sided spectral bins of every row.
    pub fn band_pass(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let am = self.value(a);
        let mut out = Matrix::zeros(am.rows(), am.cols());
        for r in 0..am.rows() {
            let f = spectral::filter_bins(am.row(r), &mask);
            out.row_mut(r).copy_from_slice(&f);
        }
        self.push(out, Op::BandPass { a, mask })
    }

    /// `row_r * scale[r] + shift[r]` with constant per-row coefficients.
    pub fn row_affine(&mut self, a: Var, scale: Vec<f64>, shift: Vec<f64>) -> Var {
        let am = self.value(a);
        assert_eq!(scale.len(), am.rows());
        assert_eq!(shift.len(), am.rows());
        let mut out = am.clone();
        for r in 0..out.rows() {
            for x in out.row_mut(r) {
                *x = *x * scale[r] + shift[r];
            }
        }
        self.push(out, Op::RowAffine { a, scale })
    }

    /// Elementwise multiply by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let am = self.value(a);
        assert_eq!(mask.len(), am.data().len());
        let out = Matrix::from_vec(
            am.rows(),
            am.cols(),
            am.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        );
        self.push(out, Op::Dropout { a, mask })
    }

    /// Mean squared error against a constant target; 1×1 output.
    pub fn mse(&mut self, a: Var, target: &Matrix) -> Var {
        let am = self.value(a);
        assert_eq!(am.shape(), target.shape(), "mse shape mismatch");
        let n = am.data().len() as f64;
        let v = am
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| (x - t).powi(2))
            .sum::<f64>()
            / n;
        self.push(Matrix::filled(1, 1, v), Op::Mse { a, target: target.clone() })
    }

    /// Mean over rows of `-log softmax(row)_diag` for a square similarity
    /// matrix, or of its transpose when `transposed`.
    pub fn info_nce(&mut self, sim: Var, transposed: bool) -> Var {
        let sm = self.value(sim);
        assert_eq!(sm.rows(), sm.cols(), "similarity matrix must be square");
        let s = if transposed { sm.transpose() } else { sm.clone() };
        let b = s.rows();
        let mut probs = s.clone();
        let mut total = 0.0;
        for i in 0..b {
            let row = s.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[i];
            softmax_in_place(probs.row_mut(i));
        }
        let v = total / b as f64;
        self.push(Matrix::filled(1, 1, v), Op::InfoNce { sim, transposed, probs })
    }

    /// `Σ wᵢ·sᵢ` over 1×1 nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|(t, w)| self.scalar(*t) * w).sum();
        self.push(Matrix::filled(1, 1, v), Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_t(bm));
                    acc(&mut grads, *b, am.t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(bm));
                    acc(&mut grads, *b, g.t_matmul(am));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scale(-1.0));
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga[(r, c)] = g[(r, c)] * bm[(0, c)];
                            gb[(0, c)] += g[(r, c)] * am[(r, c)];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::ScaleBy(a, s) => {
                    let sv = self.scalar(*s);
                    let gs = dot(g.data(), self.value(*a).data());
                    acc(&mut grads, *s, Matrix::filled(1, 1, gs));
                    acc(&mut grads, *a, g.scale(sv));
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { a, inv_std } => {
                    let y = &node.value;
                    let c = y.cols() as f64;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mg = gr.iter().sum::<f64>() / c;
                        let mgy = dot(gr, yr) / c;
                        for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowNormalize { a, norms, eps } => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        if norms[r] > *eps {
                            let yr = y.row(r);
                            let yg = dot(yr, gr);
                            for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                                *o = (gr[j] - yr[j] * yg) / norms[r];
                            }
                        } else {
                            for (o, x) in ga.row_mut(r).iter_mut().zip(gr) {
                                *o = x / eps;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GroupMean { a, group } => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    let inv = 1.0 / *group as f64;
                    for r in 0..am.rows() {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(r / group)) {
                            *o = x * inv;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Tile { a, times } => {
                    let am = self.value(*a);
                    let n = am.rows();
                    let mut ga = Matrix::zeros(n, am.cols());
                    for t in 0..*times {
                        ga.add_assign(&g.slice_rows(t * n, n));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).rows();
                        acc(&mut grads, *p, g.slice_rows(start, n));
                        start += n;
                    }
                }
                Op::SliceRows { a, start } => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut ga = Matrix::zeros(g.rows(), ca);
                    let mut gb = Matrix::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Matrix::from_vec(r, c, g.into_vec()));
                }
                Op::Attention { q, k, v, groups, scale, probs } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut gq = Matrix::zeros(qm.rows(), qm.cols());
                    let mut gk = Matrix::zeros(km.rows(), km.cols());
                    let mut gv = Matrix::zeros(vm.rows(), vm.cols());
                    for (grp, p) in groups.iter().zip(probs) {
                        for (i, qi) in grp.q.clone().enumerate() {
                            let go = g.row(qi);
                            // dP_ij = <dO_i, v_j>; dS = P ⊙ (dP - <dP, P>)
                            let dp: Vec<f64> = grp.kv.clone().map(|kj| dot(go, vm.row(kj))).collect();
                            let pr = p.row(i);
                            let inner = dot(&dp, pr);
                            for (j, kj) in grp.kv.clone().enumerate() {
                                let w = pr[j];
                                for (o, x) in gv.row_mut(kj).iter_mut().zip(go) {
                                    *o += w * x;
                                }
                                let ds = w * (dp[j] - inner) * scale;
                                if ds != 0.0 {
                                    for (o, x) in gq.row_mut(qi).iter_mut().zip(km.row(kj)) {
                                        *o += ds * x;
                                    }
                                    for (o, x) in gk.row_mut(kj).iter_mut().zip(qm.row(qi)) {
                                        *o += ds * x;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::BandPass { a, mask } => {
                    // The masked projector is symmetric, so its adjoint is itself.
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let f = spectral::filter_bins(g.row(r), mask);
                        ga.row_mut(r).copy_from_slice(&f);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowAffine { a, scale } => {
                    let mut ga = g;
                    for (r, s) in scale.iter().enumerate() {
                        for x in ga.row_mut(r) {
                            *x *= s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Dropout { a, mask } => {
                    let ga = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(mask).map(|(x, m)| x * m).collect(),
                    );
                    acc(&mut grads, *a, ga);
                }
                Op::Mse { a, target } => {
                    let gs = g[(0, 0)];
                    let am = self.value(*a);
                    let n = am.data().len() as f64;
                    let ga = am.zip_map(target, |x, t| 2.0 * (x - t) / n * gs);
                    acc(&mut grads, *a, ga);
                }
                Op::InfoNce { sim, transposed, probs } => {
                    let gs = g[(0, 0)];
                    let b = probs.rows();
                    let mut gm = probs.scale(gs / b as f64);
                    for i in 0..b {
                        gm[(i, i)] -= gs / b as f64;
                    }
                    let gm = if *transposed { gm.transpose() } else { gm };
                    acc(&mut grads, *sim, gm);
                }
                Op::WeightedSum(terms) => {
                    let gs = g[(0, 0)];
                    for (t, w) in terms {
                        acc(&mut grads, *t, Matrix::filled(1, 1, gs * w));
                    }
                }
            }
        }

        let mut by_param = HashMap::new();
        for (id, v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                by_param.insert(*id, g);
            }
        }
        Gradients { by_param }
    }
}
