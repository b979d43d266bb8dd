//! Central finite-difference checking of tape gradients.

use super::{Graph, Matrix, ParamId, ParamStore, Var};

/// Worst relative error between finite-difference and tape gradients over
/// every entry of `ids`, using `|a - n| / max(|a| + |n|, floor)`.
pub fn max_relative_error<F>(store: &ParamStore, ids: &[ParamId], eps: f64, floor: f64, forward: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = forward(&mut g, store);
    let grads = g.backward(loss);
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for &id in ids {
        let (rows, cols) = store.get(id).shape();
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(rows, cols));
        for i in 0..rows * cols {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let mut gp = Graph::new();
            let lp = forward(&mut gp, &probe);
            let fp = gp.scalar(lp);
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let mut gm = Graph::new();
            let lm = forward(&mut gm, &probe);
            let fm = gm.scalar(lm);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
