use std::fmt::Write;

use crate::spectral::rfft;

use super::MultimodalWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    Increasing,
    Decreasing,
    Flat,
}

impl Trend {
    pub fn as_str(self) -> &'static str {
        match self {
            Trend::Increasing => "increasing",
            Trend::Decreasing => "decreasing",
            Trend::Flat => "flat",
        }
    }
}

/// Sign of the least-squares slope.
pub fn trend_direction(x: &[f64]) -> Trend {
    let n = x.len();
    if n < 2 {
        return Trend::Flat;
    }
    let tm = (n - 1) as f64 / 2.0;
    let xm = x.iter().sum::<f64>() / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (t, v) in x.iter().enumerate() {
        let dt = t as f64 - tm;
        num += dt * (v - xm);
        den += dt * dt;
    }
    let slope = num / den;
    let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if slope.abs() <= 1e-12 * scale {
        Trend::Flat
    } else if slope > 0.0 {
        Trend::Increasing
    } else {
        Trend::Decreasing
    }
}

/// Period `L / k` of the largest-magnitude bin `k ∈ 1..=⌊L/2⌋`, lower
/// frequency on ties. `None` when the signal has no non-DC energy.
pub fn dominant_period(x: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let spec = rfft(x);
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in spec.iter().enumerate().take(n / 2 + 1).skip(1) {
        let mag = c.norm();
        if best.map_or(true, |(_, m)| mag > m * (1.0 + 1e-12) + 1e-300) {
            best = Some((k, mag));
        }
    }
    let scale: f64 = x.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
    match best {
        Some((k, mag)) if mag > 1e-9 * scale => Some(n as f64 / k as f64),
        _ => None,
    }
}

/// Deterministic per-variable statistical description of the look-back.
pub fn generate_endogenous_text(window: &MultimodalWindow) -> String {
    let l = window.x.rows();
    let mut out = format!("Look-back of {l} steps.");
    for (c, name) in window.variable_names.iter().enumerate() {
        let col = window.x.column(c);
        let mean = col.iter().sum::<f64>() / l as f64;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l as f64).sqrt();
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let last = col[l - 1];
        let period = match dominant_period(&col) {
            Some(p) => format!("{p:.4}"),
            None => "none".to_string(),
        };
        let _ = write!(
            out,
            " {name}: mean {mean:.4}, std {std:.4}, min {min:.4}, max {max:.4}, last {last:.4}, trend {}, dominant period {period}.",
            trend_direction(&col).as_str()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn window(x: Vec<f64>) -> MultimodalWindow {
        let l = x.len();
        let t0 = super::super::parse_instant("2020-01-01").unwrap();
        MultimodalWindow {
            window_id: 0,
            x: Matrix::from_vec(l, 1, x),
            y: Matrix::zeros(1, 1),
            timestamps: (0..=l).map(|i| t0 + chrono::Duration::days(i as i64)).collect(),
            exogenous: vec![],
            endogenous: String::new(),
            variable_names: vec!["OT".into()],
            target_index: 0,
            is_event: None,
        }
    }

    #[test]
    fn constant_series() {
        let t = generate_endogenous_text(&window(vec![5.0; 8]));
        assert!(t.contains("mean 5.0000"), "{t}");
        assert!(t.contains("trend flat"));
        assert!(t.contains("dominant period none"));
    }

    #[test]
    fn ramp_series() {
        let t = generate_endogenous_text(&window(vec![1.0, 2.0, 3.0, 4.0]));
        assert!(t.contains("mean 2.5000"));
        assert!(t.contains("trend increasing"));
        assert!(t.contains("std 1.1180"));
        assert!(t.contains("last 4.0000"));
    }

    #[test]
    fn deterministic() {
        let w = window(vec![0.1, -0.4, 2.2, 0.9, 1.3]);
        assert_eq!(generate_endogenous_text(&w), generate_endogenous_text(&w.clone()));
    }

    #[test]
    fn dominant_period_of_sinusoid() {
        let x: Vec<f64> = (0..32).map(|t| (2.0 * std::f64::consts::PI * t as f64 / 8.0).sin()).collect();
        assert!((dominant_period(&x).unwrap() - 8.0).abs() < 1e-9);
        // equal energy at bins 2 and 4: lower frequency wins
        let y: Vec<f64> = (0..16)
            .map(|t| {
                let a = 2.0 * std::f64::consts::PI * t as f64 / 16.0;
                (2.0 * a).cos() + (4.0 * a).cos()
            })
            .collect();
        assert!((dominant_period(&y).unwrap() - 8.0).abs() < 1e-9);
    }

    #[test]
    fn decreasing_trend() {
        assert_eq!(trend_direction(&[3.0, 2.0, 1.5, 0.0]), Trend::Decreasing);
    }
}
