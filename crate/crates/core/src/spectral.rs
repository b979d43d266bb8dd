//! One-sided real spectral transforms shared by the fusion module, the
//! autodiff band-pass op, and the endogenous-text period detector.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Number of one-sided bins for a real signal of length `n`.
pub fn one_sided_len(n: usize) -> usize {
    n / 2 + 1
}

/// Forward transform keeping the `n/2 + 1` non-redundant bins.
pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n).process(&mut buf));
    buf.truncate(one_sided_len(n));
    buf
}

/// Inverse of [`rfft`]; the missing half is rebuilt by conjugate symmetry so the
/// output is exactly real.
pub fn irfft(spec: &[Complex64], n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    assert_eq!(spec.len(), one_sided_len(n), "spectrum length mismatch");
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[..spec.len()].copy_from_slice(spec);
    // DC and (for even n) Nyquist bins of a real signal are real.
    full[0].im = 0.0;
    if n % 2 == 0 {
        full[n / 2].im = 0.0;
    }
    for k in spec.len()..n {
        full[k] = spec[n - k].conj();
    }
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n).process(&mut full));
    let inv = 1.0 / n as f64;
    full.iter().map(|c| c.re * inv).collect()
}

/// Real signal made of only the one-sided bins where `mask` is true.
pub fn filter_bins(x: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut spec = rfft(x);
    assert_eq!(spec.len(), mask.len(), "mask length mismatch");
    for (c, keep) in spec.iter_mut().zip(mask) {
        if !keep {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    irfft(&spec, x.len())
}

/// `ceil(frac * bins)` with a guard against representation error (`0.7 * 10`
/// must give 7, not 8).
pub fn frac_to_bin(frac: f64, bins: usize) -> usize {
    let x = frac * bins as f64;
    let c = (x - 1e-9).ceil();
    c.max(0.0) as usize
}

/// Mask keeping bins in `[ceil(lo*F), ceil(hi*F))`.
pub fn range_mask(bins: usize, lo_frac: f64, hi_frac: f64) -> Vec<bool> {
    let lo = frac_to_bin(lo_frac, bins).min(bins);
    let hi = frac_to_bin(hi_frac, bins).min(bins);
    (0..bins).map(|k| k >= lo && k < hi).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive DFT, independent of rustfft.
    fn naive_dft_bin(x: &[f64], k: usize) -> Complex64 {
        let n = x.len() as f64;
        x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (t, &v)| {
            let ang = -2.0 * std::f64::consts::PI * (k as f64) * (t as f64) / n;
            acc + Complex64::new(v * ang.cos(), v * ang.sin())
        })
    }

    #[test]
    fn rfft_matches_naive_dft() {
        let x = [0.3, -1.2, 2.5, 0.0, 4.1, -0.7, 1.1];
        let spec = rfft(&x);
        assert_eq!(spec.len(), 4);
        for (k, c) in spec.iter().enumerate() {
            let r = naive_dft_bin(&x, k);
            assert!((c - r).norm() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_even_and_odd() {
        for n in [1usize, 2, 3, 8, 13, 96] {
            let x: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
            let back = irfft(&rfft(&x), n);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9, "n={n}");
            }
        }
    }

    #[test]
    fn frac_to_bin_guards_representation_error() {
        assert_eq!(frac_to_bin(0.7, 10), 7);
        assert_eq!(frac_to_bin(0.1, 10), 1);
        assert_eq!(frac_to_bin(0.1, 7), 1);
        assert_eq!(frac_to_bin(0.7, 7), 5);
        assert_eq!(frac_to_bin(1.0, 7), 7);
        assert_eq!(frac_to_bin(0.0, 7), 0);
    }
}
