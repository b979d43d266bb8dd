use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::time::parse_instant;
use super::{MultimodalSeries, TextRecord};

pub const EVENT_TEXT_PREFIX: &str = "EVENT: level shift of ";

/// Seasonal series with announced level shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_points: usize,
    pub event_rate: f64,
    pub shift_magnitude: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub amplitude: f64,
    pub period: f64,
    /// Steps before the shift at which its announcement starts.
    pub announce_lead: usize,
    /// Emit a neutral report every this many steps (0 disables).
    pub routine_every: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_points: 1000,
            event_rate: 0.05,
            shift_magnitude: 1.0,
            noise_std: 0.1,
            seed: 0,
            amplitude: 1.0,
            period: 16.0,
            announce_lead: 12,
            routine_every: 0,
        }
    }
}

impl SynthConfig {
    pub fn generate(&self) -> Result<MultimodalSeries> {
        if self.n_points == 0 {
            return Err(Error::Argument("n_points must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.event_rate) {
            return Err(Error::Argument(format!("event_rate {} outside [0, 1]", self.event_rate)));
        }
        if !(self.noise_std >= 0.0) || !(self.period > 0.0) {
            return Err(Error::Argument("noise_std must be ≥ 0 and period > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("valid std");
        let start = parse_instant("2000-01-01").expect("literal date");
        let ts: Vec<_> = (0..self.n_points)
            .map(|i| start + chrono::Duration::days(i as i64))
            .collect();

        let d = self.shift_magnitude;
        let mut level = 0.0;
        let mut values = Vec::with_capacity(self.n_points);
        let mut labels = vec![false; self.n_points];
        let mut texts = Vec::new();
        for t in 0..self.n_points {
            if t > 0 && rng.gen_bool(self.event_rate) {
                let mut sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                // keep the level within ±2d
                if (level + sign * d).abs() > 2.0 * d + 1e-12 {
                    sign = -sign;
                }
                let shift = sign * d;
                level += shift;
                labels[t] = true;
                texts.push((t.saturating_sub(self.announce_lead), t, format!("{EVENT_TEXT_PREFIX}{shift:+.4}")));
            }
            if self.routine_every > 0 && t % self.routine_every == 0 {
                texts.push((t, t, "Routine report: operations normal, no scheduled changes.".to_string()));
            }
            let seasonal = self.amplitude * (2.0 * std::f64::consts::PI * t as f64 / self.period).sin();
            values.push(seasonal + level + noise.sample(&mut rng));
        }
        texts.sort_by_key(|(s, e, _)| (*s, *e));
        let texts = texts
            .into_iter()
            .enumerate()
            .map(|(id, (s, e, text))| TextRecord {
                id,
                start: ts[s],
                end: ts[e],
                text,
            })
            .collect();
        Ok(MultimodalSeries {
            timestamps: ts,
            values: Matrix::from_vec(self.n_points, 1, values),
            texts,
            variable_names: vec!["OT".into()],
            target_index: 0,
            event_labels: Some(labels),
            row_offset: 0,
        })
    }
}

pub fn synthesize_event_dataset(
    n_points: usize,
    event_rate: f64,
    shift_magnitude: f64,
    noise_std: f64,
    seed: u64,
) -> Result<MultimodalSeries> {
    SynthConfig {
        n_points,
        event_rate,
        shift_magnitude,
        noise_std,
        seed,
        ..SynthConfig::default()
    }
    .generate()
}
