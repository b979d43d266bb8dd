//! Three-stage training: backbone pretraining, alignment with a frozen
//! encoder, then joint fine-tuning of everything including the fusion
//! weights, with the stage-3 learning rate picked on validation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelForward, Sample};
use crate::tensor::{Adam, Graph, Matrix, ParamId, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    /// Initial rate of the cosine schedule.
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    /// Candidates tried in turn; the best on validation is kept.
    pub stage3_lrs: Vec<f64>,
    pub batch_size: usize,
    /// Taken from the run seed.
    #[serde(skip)]
    pub seed: u64,
    /// Keep the alignment loss in the stage-3 objective.
    pub align_in_stage3: bool,
    pub w_ts: f64,
    pub w_align: f64,
    pub w_final: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 10,
            stage2_epochs: 10,
            stage3_epochs: 30,
            stage1_lr: 1e-4,
            stage2_lr: 1e-3,
            stage3_lrs: vec![5e-4, 1e-5],
            batch_size: 32,
            seed: 0,
            align_in_stage3: true,
            w_ts: 1.0,
            w_align: 1.0,
            w_final: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.stage1_lr, self.stage2_lr].into_iter().chain(self.stage3_lrs.iter().copied());
        if rates.clone().any(|r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.stage3_lrs.is_empty() {
            return Err(Error::Config("at least one stage-3 learning rate is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCurve {
    /// Objective before the first update, on the training set.
    pub initial_train: f64,
    pub initial_val: Option<f64>,
    /// Mean batch objective per epoch.
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Run {
    pub lr: f64,
    pub curve: StageCurve,
    /// Epoch of the retained parameters; 0 is the starting point.
    pub best_epoch: usize,
    pub best_val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage1: StageCurve,
    pub stage2: StageCurve,
    pub stage3: Vec<Stage3Run>,
    pub selected_lr: f64,
    pub checkpoint: Option<PathBuf>,
    /// Not serialized, so report files stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// `w_ts·MSE(Ŷ_ts, Y) + w_align·L_align + w_final·MSE(Ŷ_final, Y)`.
pub fn total_loss(g: &mut Graph, y_ts: Var, y_final: Var, target: &Matrix, align: Option<Var>, cfg: &TrainConfig) -> Var {
    let a = g.mse(y_ts, target);
    let b = g.mse(y_final, target);
    let mut terms = vec![(a, cfg.w_ts), (b, cfg.w_final)];
    if let Some(l) = align {
        terms.push((l, cfg.w_align));
    }
    g.weighted_sum(&terms)
}

fn mse_value(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64
}

/// Plain-value form of [`total_loss`] with unit weights.
pub fn total_loss_value(y_ts: &Matrix, y_final: &Matrix, y: &Matrix, align: f64) -> f64 {
    mse_value(y_ts, y) + align + mse_value(y_final, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Ts,
    Align,
    Total,
}

fn objective(g: &mut Graph, f: &ModelForward, obj: Objective, cfg: &TrainConfig) -> Option<Var> {
    match obj {
        Objective::Ts => Some(g.mse(f.y_ts, &f.target)),
        Objective::Align => f.align_loss,
        Objective::Total => {
            let align = if cfg.align_in_stage3 { f.align_loss } else { None };
            Some(total_loss(g, f.y_ts, f.y_final, &f.target, align, cfg))
        }
    }
}

fn forward_for(model: &Model, g: &mut Graph, batch: &[&Sample], obj: Objective, rng: Option<&mut ChaCha8Rng>) -> Result<ModelForward> {
    match obj {
        Objective::Ts => model.forward_ts(g, batch, rng),
        Objective::Align => model.forward_numeric(g, batch, rng),
        Objective::Total => model.forward(g, batch, rng),
    }
}

/// Sample-weighted mean objective without updates.
fn evaluate_objective(model: &Model, samples: &[Sample], obj: Objective, cfg: &TrainConfig) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new();
        let f = forward_for(model, &mut g, &refs, obj, None)?;
        let Some(l) = objective(&mut g, &f, obj, cfg) else { return Ok(f64::NAN) };
        total += g.scalar(l) * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n.max(1) as f64)
}

/// MSE of the final prediction on the normalized scale.
pub fn final_mse(model: &Model, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let (mut se, mut count) = (0.0, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new();
        let f = model.forward(&mut g, &refs, None)?;
        let p = g.value(f.y_final);
        se += p.data().iter().zip(f.target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += p.data().len();
    }
    Ok(se / count.max(1) as f64)
}

struct EpochPlan<'a> {
    stage: u8,
    run: u64,
    epochs: usize,
    ids: &'a [ParamId],
    lr: &'a dyn Fn(usize, usize) -> f64,
    obj: Objective,
}

/// Shuffled mini-batch passes. `after_epoch` sees the model after each
/// epoch (for validation bookkeeping).
fn run_epochs(model: &mut Model, train: &[Sample], cfg: &TrainConfig, plan: EpochPlan, mut after_epoch: impl FnMut(&Model, usize) -> Result<()>) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(100 + 10 * plan.stage as u64 + plan.run);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(200 + 10 * plan.stage as u64 + plan.run);
    let use_dropout = model.cfg.numeric.encoder.dropout > 0.0;
    let batches = train.len().div_ceil(cfg.batch_size);
    let total_steps = plan.epochs * batches;
    let mut opt = Adam::new();
    let mut curve = Vec::with_capacity(plan.epochs);
    let mut step = 0;
    for epoch in 0..plan.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let f = forward_for(model, &mut g, &refs, plan.obj, if use_dropout { Some(&mut drop_rng) } else { None })?;
            let loss = objective(&mut g, &f, plan.obj, cfg).expect("objective defined for a running stage");
            let value = g.scalar(loss);
            let grads = g.backward(loss);
            if !value.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged(format!(
                    "stage {} epoch {} batch {bi}: loss {value}, gradients finite: {}",
                    plan.stage,
                    epoch + 1,
                    grads.is_finite()
                )));
            }
            opt.step(&mut model.store, &grads, plan.ids, (plan.lr)(step, total_steps));
            step += 1;
            sum += value * chunk.len() as f64;
            n += chunk.len();
        }
        curve.push(sum / n.max(1) as f64);
        after_epoch(model, epoch + 1)?;
    }
    Ok(curve)
}

fn cosine_lr(base: f64) -> impl Fn(usize, usize) -> f64 {
    move |step, total| {
        if total == 0 {
            base
        } else {
            base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
        }
    }
}

/// Encoder and forecasting head on `MSE(Ŷ_ts, Y)`, cosine-annealed.
pub fn stage1_pretrain(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<StageCurve> {
    let ids = model.stage_params(1);
    let mut curve = StageCurve {
        initial_train: evaluate_objective(model, train, Objective::Ts, cfg)?,
        initial_val: if val.is_empty() { None } else { Some(evaluate_objective(model, val, Objective::Ts, cfg)?) },
        ..StageCurve::default()
    };
    let lr = cosine_lr(cfg.stage1_lr);
    let mut vals = Vec::new();
    let plan = EpochPlan { stage: 1, run: 0, epochs: cfg.stage1_epochs, ids: &ids, lr: &lr, obj: Objective::Ts };
    curve.train = run_epochs(model, train, cfg, plan, |m, _| {
        if !val.is_empty() {
            vals.push(evaluate_objective(m, val, Objective::Ts, cfg)?);
        }
        Ok(())
    })?;
    curve.val = vals;
    Ok(curve)
}

/// Alignment parameters only, on the contrastive loss. Skipped when the
/// configuration has no alignment loss.
pub fn stage2_align(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<StageCurve> {
    let c = &model.cfg.numeric;
    if !(c.use_eta && c.contrastive) {
        return Ok(StageCurve { initial_train: f64::NAN, skipped: true, ..StageCurve::default() });
    }
    let ids = model.stage_params(2);
    let mut curve = StageCurve {
        initial_train: evaluate_objective(model, train, Objective::Align, cfg)?,
        initial_val: if val.is_empty() { None } else { Some(evaluate_objective(model, val, Objective::Align, cfg)?) },
        ..StageCurve::default()
    };
    let lr = |_: usize, _: usize| cfg.stage2_lr;
    let mut vals = Vec::new();
    let plan = EpochPlan { stage: 2, run: 0, epochs: cfg.stage2_epochs, ids: &ids, lr: &lr, obj: Objective::Align };
    curve.train = run_epochs(model, train, cfg, plan, |m, _| {
        if !val.is_empty() {
            vals.push(evaluate_objective(m, val, Objective::Align, cfg)?);
        }
        Ok(())
    })?;
    curve.val = vals;
    Ok(curve)
}

fn check_events(model: &Model, sets: &[&[Sample]]) -> Result<()> {
    if !model.cfg.use_event {
        return Ok(());
    }
    let missing: Vec<usize> = sets.iter().flat_map(|s| s.iter()).filter(|s| s.event.is_none()).map(|s| s.window_id).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingEvents(missing))
    }
}

/// Joint fine-tuning on the composite objective. Every candidate rate
/// starts from the same parameters; within a run the best validation epoch
/// (including the start) is kept, and the best run wins.
pub fn stage3_joint(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<(Vec<Stage3Run>, f64)> {
    check_events(model, &[train, val])?;
    let ids = model.stage_params(3);
    let start = model.clone();
    let score_set = if val.is_empty() { train } else { val };
    let initial_train = evaluate_objective(&start, train, Objective::Total, cfg)?;
    let initial_val = final_mse(&start, score_set, cfg.batch_size)?;
    let mut runs = Vec::new();
    let mut best: Option<(f64, f64, Model)> = None;
    for (ri, &lr_value) in cfg.stage3_lrs.iter().enumerate() {
        let mut m = start.clone();
        let mut kept = (initial_val, 0usize, start.clone());
        let mut vals = Vec::new();
        let lr = move |_: usize, _: usize| lr_value;
        let plan = EpochPlan { stage: 3, run: ri as u64, epochs: cfg.stage3_epochs, ids: &ids, lr: &lr, obj: Objective::Total };
        let train_curve = run_epochs(&mut m, train, cfg, plan, |cur, epoch| {
            let v = final_mse(cur, score_set, cfg.batch_size)?;
            vals.push(v);
            if v < kept.0 {
                kept = (v, epoch, cur.clone());
            }
            Ok(())
        })?;
        runs.push(Stage3Run {
            lr: lr_value,
            curve: StageCurve { initial_train, initial_val: Some(initial_val), train: train_curve, val: vals, skipped: false },
            best_epoch: kept.1,
            best_val: kept.0,
        });
        if best.as_ref().map_or(true, |b| kept.0 < b.0) {
            best = Some((kept.0, lr_value, kept.2));
        }
    }
    let (_, lr, m) = best.expect("at least one candidate rate");
    *model = m;
    Ok((runs, lr))
}

/// All three stages, writing a checkpoint per stage under `checkpoint_dir`.
pub fn train(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let t0 = Instant::now();
    let save = |m: &Model, stage: u8| -> Result<Option<PathBuf>> {
        match checkpoint_dir {
            Some(d) => {
                let p = d.join(format!("stage{stage}.json"));
                m.save(&p, stage)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    };
    let stage1 = stage1_pretrain(model, train, val, cfg)?;
    save(model, 1)?;
    log::info!("stage 1 done: train {:.5} -> {:.5}", stage1.initial_train, stage1.train.last().copied().unwrap_or(stage1.initial_train));
    let stage2 = stage2_align(model, train, val, cfg)?;
    save(model, 2)?;
    let (stage3, selected_lr) = stage3_joint(model, train, val, cfg)?;
    let checkpoint = save(model, 3)?;
    log::info!("stage 3 selected lr {selected_lr}");
    Ok(TrainReport { stage1, stage2, stage3, selected_lr, checkpoint, wall_clock_secs: t0.elapsed().as_secs_f64() })
}

/// Training curves as CSV rows `stage,run,lr,epoch,train,val`.
pub fn curves_csv(r: &TrainReport, cfg: &TrainConfig) -> String {
    let mut out = String::from("stage,run,lr,epoch,train,val\n");
    let mut put = |stage: u8, run: usize, lr: f64, c: &StageCurve| {
        if c.skipped {
            return;
        }
        let v0 = c.initial_val.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{stage},{run},{lr},0,{},{v0}\n", c.initial_train));
        for (i, t) in c.train.iter().enumerate() {
            let v = c.val.get(i).map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{stage},{run},{lr},{},{t},{v}\n", i + 1));
        }
    };
    put(1, 0, cfg.stage1_lr, &r.stage1);
    put(2, 0, cfg.stage2_lr, &r.stage2);
    for (i, s) in r.stage3.iter().enumerate() {
        put(3, i, s.lr, &s.curve);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_examples() {
        let y = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(total_loss_value(&y, &y, &y, 0.0), 0.0);
        let off = y.map(|v| v + 1.0);
        assert_eq!(total_loss_value(&off, &y, &y, 0.0), 1.0);
        let base = total_loss_value(&off, &y, &y, 0.3);
        assert!((total_loss_value(&off, &y, &y, 0.6) - base - 0.3).abs() < 1e-15);

        let mut g = Graph::new();
        let a = g.input(off.clone());
        let b = g.input(y.clone());
        let l = g.input(Matrix::filled(1, 1, 0.25));
        let t = total_loss(&mut g, a, b, &y, Some(l), &TrainConfig::default());
        assert!((g.scalar(t) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.stage3_lrs = vec![0.0];
        assert!(c.validate().is_err());
    }
}
