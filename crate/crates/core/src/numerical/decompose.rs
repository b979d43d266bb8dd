use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Centered moving average with edge padding by repetition.
pub fn moving_average(x: &[f64], kernel: usize) -> Vec<f64> {
    let n = x.len();
    let half = kernel / 2;
    let at = |i: isize| x[i.clamp(0, n as isize - 1) as usize];
    (0..n as isize)
        .map(|t| (t - half as isize..=t + half as isize).map(at).sum::<f64>() / kernel as f64)
        .collect()
}

/// Largest odd kernel not exceeding `lookback`, capped at `kernel`.
pub fn clamp_kernel(kernel: usize, lookback: usize) -> usize {
    let k = kernel.min(lookback).max(1);
    if k % 2 == 0 {
        k - 1
    } else {
        k
    }
}

fn check_kernel(kernel: usize, len: usize) -> Result<()> {
    if kernel % 2 == 0 {
        return Err(Error::Argument(format!("decomposition kernel must be odd, got {kernel}")));
    }
    if kernel == 0 || kernel > len {
        return Err(Error::Argument(format!("kernel {kernel} outside 1..={len}")));
    }
    Ok(())
}

/// Split `x` (`L × N`) into trend and seasonal parts column by column;
/// `x_tr + x_se == x`.
pub fn decompose(x: &Matrix, kernel: usize) -> Result<(Matrix, Matrix)> {
    check_kernel(kernel, x.rows())?;
    let mut tr = Matrix::zeros(x.rows(), x.cols());
    for c in 0..x.cols() {
        tr.set_column(c, &moving_average(&x.column(c), kernel));
    }
    let se = x.zip_map(&tr, |a, b| a - b);
    Ok((tr, se))
}

/// Same as [`decompose`] for series stored one per row.
pub fn decompose_rows(x: &Matrix, kernel: usize) -> Result<(Matrix, Matrix)> {
    check_kernel(kernel, x.cols())?;
    let mut tr = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        tr.row_mut(r).copy_from_slice(&moving_average(x.row(r), kernel));
    }
    let se = x.zip_map(&tr, |a, b| a - b);
    Ok((tr, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_average() {
        let x = Matrix::from_vec(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let (tr, se) = decompose(&x, 3).unwrap();
        let want = [4.0 / 3.0, 2.0, 3.0, 4.0, 14.0 / 3.0];
        for (a, b) in tr.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((se[(0, 0)] + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_and_identity_kernel() {
        let x = Matrix::filled(6, 2, 3.5);
        let (tr, se) = decompose(&x, 5).unwrap();
        assert_eq!(tr, x);
        assert!(se.data().iter().all(|v| *v == 0.0));
        let y = Matrix::from_vec(3, 1, vec![1.0, -2.0, 7.0]);
        let (tr, se) = decompose(&y, 1).unwrap();
        assert_eq!(tr, y);
        assert!(se.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Matrix::zeros(6, 1);
        assert!(matches!(decompose(&x, 4), Err(Error::Argument(_))));
        assert_eq!(clamp_kernel(25, 8), 7);
        assert_eq!(clamp_kernel(25, 96), 25);
    }

    proptest! {
        #[test]
        fn reconstruction(values in proptest::collection::vec(-100.0f64..100.0, 9..40), k in 0usize..4) {
            let kernel = 2 * k + 1;
            let x = Matrix::from_vec(values.len(), 1, values);
            let (tr, se) = decompose(&x, kernel).unwrap();
            let back = tr.zip_map(&se, |a, b| a + b);
            prop_assert!(back.max_abs_diff(&x) < 1e-9);
        }
    }
}
