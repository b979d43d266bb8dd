//! Split two forecasts into spectral bands and recombine them.

use dualcast::aff::{analysis_components, fit_weights, fuse, partition_bands, FusionWeights, BANDS};
use dualcast::tensor::Matrix;

fn column(v: Vec<f64>) -> Matrix {
    Matrix::from_vec(v.len(), 1, v)
}

fn main() -> dualcast::Result<()> {
    let h = 24;
    let p = partition_bands(h, 0.1, 0.7)?;
    for (b, name) in BANDS.iter().enumerate() {
        println!("{name:>4} band bins {:?}", p.band_bins(b));
    }

    // the truth is a smooth wave plus a level shift
    let wave: Vec<f64> = (0..h).map(|t| (t as f64 * std::f64::consts::TAU / 12.0).sin()).collect();
    let step: Vec<f64> = (0..h).map(|t| if t >= 6 { 1.5 } else { 0.0 }).collect();
    let truth = column(wave.iter().zip(&step).map(|(a, b)| a + b).collect());
    let num = column(wave.clone());
    // the event branch gets the shift right but adds a high-frequency ripple
    let event = column(step.iter().enumerate().map(|(t, s)| s + if t % 2 == 0 { 0.2 } else { -0.2 }).collect());

    let mse = |m: &Matrix| m.data().iter().zip(truth.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / h as f64;
    let even = fuse(&num, &event, &FusionWeights::default(), &p)?;
    println!("numerical only {:.4}, event only {:.4}, equal weights {:.4}", mse(&num), mse(&event), mse(&even));

    let w = fit_weights(&[(&num, &event, &truth)], &p, 1e-6);
    let fitted = fuse(&num, &event, &w, &p)?;
    println!("fitted weights num {:?} event {:?} -> {:.4}", round(w.w[0]), round(w.w[1]), mse(&fitted));

    let [low, mid, high] = analysis_components(truth.data(), 0.1, 0.7)?;
    let worst = (0..h).map(|t| (low[t] + mid[t] + high[t] - truth.data()[t]).abs()).fold(0.0, f64::max);
    println!("low+mid+high reconstructs the truth to {worst:.1e}");
    Ok(())
}

fn round(w: [f64; 3]) -> [f64; 3] {
    w.map(|v| (v * 1000.0).round() / 1000.0)
}
