//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Every check compares against an oracle written here.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant as Clock};

use dualcast::aff::{analysis_components, fuse, fuse_weight_gradient, partition_bands, FusionWeights};
use dualcast::config::{config_diff, RunConfig, Variant};
use dualcast::dataset::{make_windows, parse_instant, synthesize_event_dataset, temporal_split, window_count, MultimodalWindow, NormStats, SplitConfig};
use dualcast::encoders::{HashEncoder, SummaryEmbedding};
use dualcast::evaluation::{evaluate_records, EvaluationReport, PredictionRecord};
use dualcast::event::{OracleClient, Summary};
use dualcast::hic::{build_knowledge_base, load_kb, rank_select, ranked, retrieve, save_kb, Correction, KbEntry, KbSource, KnowledgeBase};
use dualcast::model::{Model, ModelConfig, Sample};
use dualcast::numerical::{contrastive_loss_value, NumericBatch, NumericConfig, NumericalBranch, TextBatch};
use dualcast::pipeline::{ablate, run_full, variant_config};
use dualcast::tensor::gradcheck::max_relative_error;
use dualcast::tensor::{normal_matrix, Graph, Matrix, ParamStore};
use dualcast::trainer::{stage1_pretrain, stage2_align, stage3_joint, TrainConfig};
use dualcast::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn aff_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_single, mut worst_mean) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let h = *[6, 12, 48, 96].choose(&mut rng).unwrap();
        let n = *[1, 3].choose(&mut rng).unwrap();
        let lo = rng.gen_range(0.05..0.35);
        let hi = rng.gen_range(0.45..0.95);
        let p = ok(partition_bands(h, lo, hi))?;
        let a = normal_matrix(&mut rng, h, n, 1.0);
        let b = normal_matrix(&mut rng, h, n, 3.0);
        worst_single = worst_single.max(max_diff(&ok(fuse(&a, &b, &FusionWeights::single_branch(0), &p))?, &a));
        worst_single = worst_single.max(max_diff(&ok(fuse(&a, &b, &FusionWeights::single_branch(1), &p))?, &b));
        let mut ca = Matrix::zeros(h, n);
        let mut cb = Matrix::zeros(h, n);
        let mut mean = Matrix::zeros(h, n);
        for c in 0..n {
            let (u, v) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            ca.set_column(c, &vec![u; h]);
            cb.set_column(c, &vec![v; h]);
            mean.set_column(c, &vec![(u + v) / 2.0; h]);
        }
        let half = FusionWeights { w: [[0.5; 3]; 2], trainable: false };
        worst_mean = worst_mean.max(max_diff(&ok(fuse(&ca, &cb, &half, &p))?, &mean));
    }
    ensure!(worst_single < 1e-5, "single-branch fusion off by {worst_single:e}");
    ensure!(worst_mean < 1e-6, "equal-weight constant fusion off by {worst_mean:e}");
    for h in 2..=512 {
        for (lo, hi) in [(0.1, 0.7), (0.05, 0.5), (0.3, 0.9), (0.01, 0.99)] {
            let p = ok(partition_bands(h, lo, hi))?;
            ensure!(p.bins == h / 2 + 1, "H={h}: {} bins", p.bins);
            for k in 0..p.bins {
                let owners = (0..3).filter(|b| p.masks[*b][k]).count();
                ensure!(owners == 1, "H={h} ({lo},{hi}): bin {k} in {owners} bands");
            }
        }
    }
    Ok(format!("max single-branch err {worst_single:.1e}, mean err {worst_mean:.1e}"))
}

fn fused_mse(a: &Matrix, b: &Matrix, w: &FusionWeights, p: &dualcast::aff::BandPartition, y: &Matrix) -> f64 {
    let f = fuse(a, b, w, p).expect("valid instance");
    f.data().iter().zip(y.data()).map(|(x, t)| (x - t).powi(2)).sum::<f64>() / y.data().len() as f64
}

fn aff_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let h = rng.gen_range(4..=96);
        let n = rng.gen_range(1..=3);
        let p = ok(partition_bands(h, 0.1, 0.7))?;
        let a = normal_matrix(&mut rng, h, n, 1.0);
        let b = normal_matrix(&mut rng, h, n, 1.0);
        let y = normal_matrix(&mut rng, h, n, 1.0);
        let mut w = FusionWeights::default();
        for v in w.w.iter_mut().flatten() {
            *v = rng.gen_range(-1.0..1.5);
        }
        let grad = ok(fuse_weight_gradient(&a, &b, &w, &p, &y))?;
        for br in 0..2 {
            for band in 0..3 {
                let (mut up, mut down) = (w, w);
                up.w[br][band] += eps;
                down.w[br][band] -= eps;
                let fd = (fused_mse(&a, &b, &up, &p, &y) - fused_mse(&a, &b, &down, &p, &y)) / (2.0 * eps);
                let g = grad[br][band];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    ensure!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("max relative error {worst:.1e}"))
}

fn filter_reconstruction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let len = rng.gen_range(2..=512);
        let series: Vec<f64> = (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let lo = rng.gen_range(0.02..0.4);
        let hi = rng.gen_range(lo + 0.05..0.98);
        let [a, b, c] = ok(analysis_components(&series, lo, hi))?;
        for i in 0..len {
            worst = worst.max((a[i] + b[i] + c[i] - series[i]).abs());
        }
    }
    ensure!(worst < 1e-6, "reconstruction off by {worst:e}");
    Ok(format!("max reconstruction err {worst:.1e}"))
}

/// Symmetric cosine InfoNCE over the trend and seasonal pairs, summed over
/// pairs and averaged over the two directions.
fn info_nce_oracle(h_tr: &Matrix, h_se: &Matrix, z_tr: &Matrix, z_se: &Matrix, tau: f64) -> f64 {
    let unit = |m: &Matrix| -> Vec<Vec<f64>> {
        (0..m.rows())
            .map(|r| {
                let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                m.row(r).iter().map(|v| v / n).collect()
            })
            .collect()
    };
    let one = |h: &Matrix, z: &Matrix| {
        let (hn, zn) = (unit(h), unit(z));
        let b = hn.len();
        let s: Vec<Vec<f64>> = hn.iter().map(|a| zn.iter().map(|c| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / tau).collect()).collect();
        let (mut fwd, mut bwd) = (0.0, 0.0);
        for i in 0..b {
            fwd += (0..b).map(|j| s[i][j].exp()).sum::<f64>().ln() - s[i][i];
            bwd += (0..b).map(|j| s[j][i].exp()).sum::<f64>().ln() - s[i][i];
        }
        (fwd + bwd) / (2.0 * b as f64)
    };
    one(h_tr, z_tr) + one(h_se, z_se)
}

fn contrastive_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..20 {
        let d = rng.gen_range(2..10);
        let m: Vec<Matrix> = (0..4).map(|_| normal_matrix(&mut rng, 1, d, 1.0)).collect();
        let l = contrastive_loss_value(&m[0], &m[1], &m[2], &m[3], rng.gen_range(0.1..2.0));
        ensure!(l == 0.0, "B=1 loss is {l:e}");
    }
    let e = Matrix::identity(2);
    let closed = -2.0 * (std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
    let got = contrastive_loss_value(&e, &e, &e, &e, 1.0);
    ensure!((got - closed).abs() < 1e-6, "orthonormal B=2: {got} vs {closed}");
    let mut worst_oracle = 0.0f64;
    let mut worst_perm = 0.0f64;
    for _ in 0..50 {
        let b = rng.gen_range(2..9);
        let d = rng.gen_range(2..12);
        let tau = rng.gen_range(0.2..2.0);
        let m: Vec<Matrix> = (0..4).map(|_| normal_matrix(&mut rng, b, d, 1.0)).collect();
        let base = contrastive_loss_value(&m[0], &m[1], &m[2], &m[3], tau);
        worst_oracle = worst_oracle.max((base - info_nce_oracle(&m[0], &m[1], &m[2], &m[3], tau)).abs());
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Matrix> = m.iter().map(|x| Matrix::from_rows(&perm.iter().map(|&r| x.row(r).to_vec()).collect::<Vec<_>>())).collect();
        let again = contrastive_loss_value(&shuffled[0], &shuffled[1], &shuffled[2], &shuffled[3], tau);
        worst_perm = worst_perm.max((base - again).abs());
    }
    ensure!(worst_oracle < 1e-9, "differs from the InfoNCE oracle by {worst_oracle:e}");
    ensure!(worst_perm < 1e-9, "permutation changes the loss by {worst_perm:e}");
    Ok(format!("oracle err {worst_oracle:.1e}, permutation err {worst_perm:.1e}"))
}

fn alignment_gradient() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (decomposition, seed) in [(true, 5u64), (false, 6)] {
        let (l, h, n, b) = (8, 4, 2, 3);
        let mut cfg = NumericConfig::new(l, h, n);
        cfg.encoder.d_ts = 4;
        cfg.d_text = 6;
        cfg.decomposition = decomposition;
        let branch = ok(NumericalBranch::new(cfg))?;
        let mut store = ParamStore::new();
        branch.init_params(&mut store, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_matrix(&mut rng, b * n, l, 1.0);
        let tokens: Vec<Matrix> = (0..b).map(|i| normal_matrix(&mut rng, 2 + i, 6, 1.0)).collect();
        let target = normal_matrix(&mut rng, b * n, h, 1.0);
        let batch = NumericBatch { x, samples: b, text: Some(TextBatch::from_samples(&tokens.iter().collect::<Vec<_>>())) };
        let ids = store.group("align.");
        ensure!(!ids.is_empty(), "no alignment parameters registered");
        checked += ids.iter().map(|id| store.get(*id).data().len()).sum::<usize>();
        let err = max_relative_error(&store, &ids, 1e-5, 1e-6, |g: &mut Graph, st: &ParamStore| {
            let f = branch.forward(g, st, &batch, None).expect("forward");
            let fit = g.mse(f.y_num, &target);
            let align = f.align_loss.expect("alignment loss enabled");
            g.add(align, fit)
        });
        worst = worst.max(err);
    }
    ensure!(worst < 1e-3, "max relative error {worst:e}");
    Ok(format!("{checked} entries, max relative error {worst:.1e}"))
}

fn random_entry(id: usize, v: &[f64], rng: &mut ChaCha8Rng) -> KbEntry {
    KbEntry {
        window_id: id,
        summary_text: format!("window {id} summary"),
        embedding: SummaryEmbedding::from_f64(v),
        correction: Correction {
            window_id: id,
            improved_reasoning: format!("lift the forecast by {:.3}", rng.gen_range(0.0..1.0)),
            key_insights: vec!["level shifts persist".into()],
            prediction_factors: "announced shift".into(),
            original_prediction: vec![0.0, 0.5],
            actual_values: vec![1.0, 1.5],
        },
        lookback: v.iter().take(4).copied().collect(),
        series: vec![0.25, 0.5, 0.75],
        span_end: parse_instant("2010-06-01").expect("valid instant"),
    }
}

fn oracle_cosine(a: &SummaryEmbedding, b: &SummaryEmbedding) -> f64 {
    let (x, y) = (a.to_f64(), b.to_f64());
    let d: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        d / n
    } else {
        0.0
    }
}

fn retrieval_exactness() -> Outcome {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let dir = ok(tempfile::tempdir())?;
    let boundary = parse_instant("2011-01-01").expect("valid instant");
    let mut largest = 0;
    for trial in 0..100 {
        let m = if trial < 5 { 1000 } else { rng.gen_range(1..=400) };
        let d = rng.gen_range(2..=64);
        largest = largest.max(m);
        let mut ids: Vec<usize> = (0..m).map(|i| i * 3 + 1).collect();
        ids.shuffle(&mut rng);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(m);
        for i in 0..m {
            // some exact duplicates so ties are exercised
            if i > 0 && rng.gen_bool(0.1) {
                let j = rng.gen_range(0..i);
                vectors.push(vectors[j].clone());
            } else {
                vectors.push((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
        }
        let kb = KnowledgeBase {
            embedder: "hash".into(),
            d_emb: d,
            boundary,
            entries: ids.iter().zip(&vectors).map(|(id, v)| random_entry(*id, v, &mut rng)).collect(),
        };
        let query = SummaryEmbedding::from_f64(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let mut brute: Vec<(f64, usize)> = kb.entries.iter().map(|e| (oracle_cosine(&query, &e.embedding), e.window_id)).collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let score_of: BTreeMap<usize, f64> = brute.iter().map(|(s, id)| (*id, *s)).collect();
        let k = rng.gen_range(1..=m.min(20));
        let top = ok(retrieve(&kb, &query, k))?;
        ensure!(top.len() == k, "trial {trial}: {} results for k={k}", top.len());
        for (i, r) in top.iter().enumerate() {
            let s = score_of[&r.window_id];
            ensure!((s - brute[i].0).abs() <= TOL, "trial {trial}: position {i} holds score {s}, brute force {}", brute[i].0);
            ensure!((r.score - s).abs() <= TOL, "trial {trial}: reported score {} vs {s}", r.score);
            let tied = brute.iter().filter(|(b, _)| (b - s).abs() <= TOL).count() > 1;
            if !tied {
                ensure!(r.window_id == brute[i].1, "trial {trial}: position {i} is {} not {}", r.window_id, brute[i].1);
            }
        }
        let r = rng.gen_range(1..=m);
        let pick = ok(rank_select(&kb, &query, r))?;
        ensure!((score_of[&pick.window_id] - brute[r - 1].0).abs() <= TOL, "trial {trial}: rank {r} mismatch");
        ensure!(matches!(rank_select(&kb, &query, m + 1), Err(Error::Range { .. })), "rank past the KB size accepted");

        if trial % 10 == 0 {
            let path = dir.path().join(format!("kb{trial}.jsonl"));
            ok(save_kb(&kb, &path))?;
            let back = ok(load_kb(&path, "hash"))?;
            ensure!(back == kb, "trial {trial}: KB changed across save/load");
            let (a, b) = (ok(ranked(&kb, &query))?, ok(ranked(&back, &query))?);
            ensure!(a.len() == b.len(), "ranking length changed");
            for (x, y) in a.iter().zip(&b) {
                ensure!(x.window_id == y.window_id && x.score.to_bits() == y.score.to_bits(), "trial {trial}: retrieval not bit-identical after reload");
            }
        }
    }

    let series = ok(synthesize_event_dataset(240, 0.08, 1.0, 0.1, 9))?;
    let cfg = SplitConfig::new(8, 4);
    let split = ok(temporal_split(&series, &cfg))?;
    let train = ok(make_windows(&split.train, &cfg))?;
    let test = ok(make_windows(&split.test, &cfg))?;
    let stats = NormStats::from_series(&split.train);
    let summaries: Vec<Summary> = train
        .iter()
        .chain(&test)
        .map(|w| Summary { window_id: w.window_id, record: Default::default(), raw: "{}".into(), text_free: false })
        .collect();
    let make = |ws: Vec<&MultimodalWindow>| -> Result<KnowledgeBase, Error> {
        let src: Vec<KbSource> = ws
            .iter()
            .map(|w| KbSource {
                window: w,
                summary: summaries.iter().find(|s| s.window_id == w.window_id).expect("summary exists"),
                correction: Correction {
                    window_id: w.window_id,
                    improved_reasoning: "raise".into(),
                    key_insights: vec![],
                    prediction_factors: "shift".into(),
                    original_prediction: vec![0.0; 4],
                    actual_values: w.target_future(),
                },
            })
            .collect();
        build_knowledge_base(src, &stats, &HashEncoder::new(8, 16), split.val_boundary())
    };
    let clean: Vec<&MultimodalWindow> = train.iter().take(6).collect();
    ensure!(ok(make(clean.clone()))?.len() == 6, "clean KB build failed");
    let mut leaky = clean;
    leaky.push(&test[test.len() / 2]);
    ensure!(matches!(make(leaky), Err(Error::Leakage(_))), "test-span window accepted into the KB");
    Ok(format!("100 KBs up to M={largest}, leakage rejected"))
}

fn run_cfg(out: &Path, pairs: &[(&str, &str)]) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    for (k, v) in pairs {
        cfg = ok(cfg.set(k, v))?;
    }
    cfg = ok(cfg.set("run.out", &out.display().to_string()))?;
    ok(cfg.validate())?;
    Ok(cfg)
}

const SMALL: &[(&str, &str)] = &[
    ("synth.n_points", "300"),
    ("synth.event_rate", "0.08"),
    ("synth.seed", "4"),
    ("split.lookback", "16"),
    ("split.horizons", "[6]"),
    ("train.stage1_epochs", "2"),
    ("train.stage2_epochs", "2"),
    ("train.stage3_epochs", "3"),
    ("train.stage3_lrs", "[0.0005]"),
    ("run.seed", "3"),
];

fn files_under(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).map(|r| r.flatten().map(|e| e.path()).collect()).unwrap_or_default();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

fn pipeline_determinism() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let tape = dir.path().join("tape.jsonl");
    let tape_s = tape.display().to_string();
    let mut record: Vec<(&str, &str)> = SMALL.to_vec();
    record.extend([("client.kind", "oracle"), ("client.record", tape_s.as_str())]);
    ok(run_full(&run_cfg(&dir.path().join("recorded"), &record)?))?;
    ensure!(tape.exists(), "no recording written");
    let mut replay: Vec<(&str, &str)> = SMALL.to_vec();
    replay.extend([("client.kind", "replay"), ("client.replay", tape_s.as_str())]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(run_full(&run_cfg(&a, &replay)?))?;
    ok(run_full(&run_cfg(&b, &replay)?))?;
    let (fa, fb) = (files_under(&a), files_under(&b));
    ensure!(fa == fb, "runs wrote different file sets");
    let required = ["events/test.summaries.jsonl", "events/test.jsonl", "predictions.jsonl", "kb.jsonl", "checkpoints/stage3.json", "report.json"];
    for r in required {
        ensure!(fa.iter().any(|p| p.to_string_lossy().ends_with(r)), "missing artifact {r}");
    }
    let mut compared = 0;
    for rel in &fa {
        if rel == Path::new("config.json") {
            continue;
        }
        let (x, y) = (ok(std::fs::read(a.join(rel)))?, ok(std::fs::read(b.join(rel)))?);
        if rel.starts_with("cache") {
            // entries carry their write time; everything else must match
            let strip = |bytes: &[u8]| -> Result<serde_json::Value, String> {
                let mut v: serde_json::Value = ok(serde_json::from_slice(bytes))?;
                v.as_object_mut().map(|o| o.remove("timestamp"));
                Ok(v)
            };
            ensure!(strip(&x)? == strip(&y)?, "cache entry {} differs between runs", rel.display());
            continue;
        }
        ensure!(x == y, "{} differs between runs", rel.display());
        compared += 1;
    }
    Ok(format!("{compared} files byte-identical"))
}

fn event_mse(r: &EvaluationReport, h: usize) -> Result<f64, String> {
    r.segment(h, "fused").and_then(|s| s.event).map(|m| m.mse).ok_or_else(|| format!("{}: no event segment", r.variant))
}

fn event_efficacy() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let base = run_cfg(
        dir.path(),
        &[
            ("synth.n_points", "2000"),
            ("synth.event_rate", "0.05"),
            ("synth.noise_std", "0.2"),
            ("synth.shift_magnitude", "1.0"),
            ("synth.seed", "1"),
            ("split.lookback", "32"),
            ("split.horizons", "[8]"),
            ("client.kind", "oracle"),
            ("run.jobs", "8"),
        ],
    )?;
    let variants: Vec<Variant> = ["full", "no-event", "text:random"].iter().map(|v| v.parse().expect("variant")).collect();
    let reports = ok(ablate(&base, &variants, &OracleClient::new()))?;
    let (full, none, random) = (&reports[0], &reports[1], &reports[2]);
    let (ef, en, er) = (event_mse(full, 8)?, event_mse(none, 8)?, event_mse(random, 8)?);
    let gain = 1.0 - ef / en;
    let random_gain = 1.0 - er / en;
    let overall = full.avg_mse / none.avg_mse - 1.0;
    let detail = format!(
        "event MSE full {ef:.4} / no-event {en:.4} / random {er:.4}; gain {:.1}%, random gain {:.1}%, overall change {:+.1}%",
        gain * 100.0,
        random_gain * 100.0,
        overall * 100.0
    );
    ensure!(gain >= 0.20, "event gain below 20%: {detail}");
    ensure!(overall <= 0.05, "overall MSE degraded by more than 5%: {detail}");
    ensure!(random_gain < 0.05, "random text keeps the advantage: {detail}");
    Ok(detail)
}

fn protocol_fidelity() -> Outcome {
    for t in [200usize, 301, 777, 1000, 1234] {
        let series = ok(synthesize_event_dataset(t, 0.05, 1.0, 0.1, t as u64))?;
        let cfg = SplitConfig::new(12, 6);
        let split = ok(temporal_split(&series, &cfg))?;
        ensure!(split.val_start == 7 * t / 10 && split.test_start == 8 * t / 10, "T={t}: split at {} / {}", split.val_start, split.test_start);
        ensure!(split.train.len() + split.val.len() + split.test.len() == t, "T={t}: rows lost");
        for part in [&split.train, &split.val, &split.test] {
            let w = ok(make_windows(part, &cfg))?;
            let expect = part.len() - 12 - 6 + 1;
            ensure!(w.len() == expect && window_count(part.len(), 12, 6) == expect, "T={t}: {} windows for {} rows", w.len(), part.len());
        }
    }
    ensure!(window_count(17, 12, 6) == 0, "short split yields windows");

    let (l, h, n) = (16, 6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let sample = |id: usize, rng: &mut ChaCha8Rng| Sample {
        window_id: id,
        x: normal_matrix(rng, l, n, 1.0),
        y: normal_matrix(rng, h, n, 1.0),
        tokens: Some(normal_matrix(rng, 3, 8, 1.0)),
        event: Some((0..h).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        is_event: id % 4 == 0,
    };
    let train: Vec<Sample> = (0..40).map(|i| sample(i, &mut rng)).collect();
    let val: Vec<Sample> = (40..50).map(|i| sample(i, &mut rng)).collect();
    let mut ncfg = NumericConfig::new(l, h, n);
    ncfg.encoder.d_ts = 8;
    ncfg.d_text = 8;
    let mut model = ok(Model::new(ModelConfig::new(ncfg, 0), 1))?;
    let tcfg = TrainConfig { stage1_epochs: 2, stage2_epochs: 2, stage3_epochs: 2, stage1_lr: 1e-2, stage2_lr: 1e-2, stage3_lrs: vec![1e-2], batch_size: 8, ..TrainConfig::default() };
    let groups = ["encoder.", "head.", "align.", "fusion.num.", "fusion.event.", "fusion.mlp.", "fusion.xattn."];
    let hashes = |m: &Model| -> Vec<String> { groups.iter().map(|g| m.store.group_hash(g)).collect() };
    for stage in 1..=3u8 {
        let before = model.store.clone();
        let hb = hashes(&model);
        match stage {
            1 => drop(ok(stage1_pretrain(&mut model, &train, &val, &tcfg))?),
            2 => drop(ok(stage2_align(&mut model, &train, &val, &tcfg))?),
            _ => drop(ok(stage3_joint(&mut model, &train, &val, &tcfg))?),
        }
        let trainable = model.stage_params(stage);
        let mut moved = 0;
        for id in before.ids() {
            let same = before.get(id) == model.store.get(id);
            if trainable.contains(&id) {
                moved += usize::from(!same);
            } else {
                ensure!(same, "stage {stage} changed frozen parameter {}", before.name(id));
            }
        }
        ensure!(moved > 0, "stage {stage} trained nothing");
        let ha = hashes(&model);
        let owned: Vec<bool> = groups.iter().map(|g| trainable.iter().any(|id| model.store.name(*id).starts_with(g))).collect();
        for (i, g) in groups.iter().enumerate() {
            if !owned[i] {
                ensure!(hb[i] == ha[i], "stage {stage}: hash of frozen group {g} changed");
            }
        }
    }

    let test: Vec<Sample> = (0..23).map(|i| sample(100 + i, &mut rng)).collect();
    let preds = ok(model.predict(&test, 5))?;
    ensure!(preds.y_final.len() == 23, "{} predictions for 23 windows", preds.y_final.len());
    let records: Vec<PredictionRecord> = test
        .iter()
        .zip(&preds.y_final)
        .map(|(s, y)| PredictionRecord {
            window_id: s.window_id,
            is_event: Some(s.is_event),
            truth: s.y.data().to_vec(),
            y_final: y.data().to_vec(),
            y_num: y.data().to_vec(),
            y_event: None,
            provenance: None,
        })
        .collect();
    let scored = ok(evaluate_records(&records, h, n, 0, 0.1, 0.7))?;
    ensure!(scored.count == 23, "evaluation scored {} of 23 windows", scored.count);
    Ok("splits, window counts, stage isolation and no-drop-last exact".into())
}

fn named_keys(v: &str) -> Vec<&'static str> {
    match v {
        "full" | "fusion:aff" | "text:exogenous" => vec![],
        "ts-only" => vec!["eta.enabled", "event.enabled"],
        "no-eta" => vec!["eta.enabled"],
        "no-event" => vec!["event.enabled"],
        "eta:no-decomposition" => vec!["eta.decomposition"],
        "eta:no-ts-text-cl" => vec!["eta.contrastive"],
        s if s == "no-hic" || s.starts_with("retrieval:") => vec!["hic.retrieval"],
        s if s.starts_with("fusion:") => vec!["fusion.strategy"],
        s if s.starts_with("rank-") => vec!["hic.rank"],
        s if s.starts_with("text:") => vec!["event.text_source"],
        _ => vec!["<unknown>"],
    }
}

fn ablation_plumbing() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let base = run_cfg(dir.path(), SMALL)?;
    let variants = Variant::all();
    ensure!(variants.len() == 17, "{} variants in the grid", variants.len());
    let full = Variant::Full.apply(&base);
    for v in &variants {
        let diff: Vec<String> = config_diff(&full, &v.apply(&base)).into_iter().filter(|k| k != "run.variant").collect();
        ensure!(diff == named_keys(&v.to_string()), "{v} changes {diff:?}");
        let on_disk = config_diff(&full, &variant_config(*v, &base));
        ensure!(on_disk.iter().all(|k| k.starts_with("run.") || diff.contains(k)), "{v} run config changes {on_disk:?}");
    }
    let reports = ok(ablate(&base, &variants, &OracleClient::new()))?;
    ensure!(reports.len() == 17, "{} reports", reports.len());
    for (v, r) in variants.iter().zip(&reports) {
        ensure!(r.variant == v.to_string(), "report for {} filed as {}", v, r.variant);
        ensure!(r.avg_mse.is_finite() && r.avg_mse > 0.0, "{v}: MSE {}", r.avg_mse);
        let has_event = r.segment(6, "event").is_some();
        let event_on = !matches!(v, Variant::NoEvent | Variant::TsOnly);
        ensure!(has_event == event_on, "{v}: event branch presence {has_event}");
    }
    ensure!(dir.path().join("ablation.csv").exists(), "no ablation table");
    Ok("17 variants ran; each differs only in its named component".into())
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "aff correctness", limit: Duration::from_secs(10), run: aff_correctness },
        Criterion { name: "aff weight gradient", limit: Duration::from_secs(10), run: aff_gradient },
        Criterion { name: "filter reconstruction", limit: Duration::from_secs(5), run: filter_reconstruction },
        Criterion { name: "contrastive identities", limit: Duration::from_secs(5), run: contrastive_identities },
        Criterion { name: "alignment gradient", limit: Duration::from_secs(30), run: alignment_gradient },
        Criterion { name: "retrieval exactness", limit: Duration::from_secs(30), run: retrieval_exactness },
        Criterion { name: "pipeline determinism", limit: Duration::from_secs(300), run: pipeline_determinism },
        Criterion { name: "event efficacy", limit: Duration::from_secs(600), run: event_efficacy },
        Criterion { name: "protocol fidelity", limit: Duration::from_secs(60), run: protocol_fidelity },
        Criterion { name: "ablation plumbing", limit: Duration::from_secs(900), run: ablation_plumbing },
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if let Some(f) = &filter {
            if *f != id && !c.name.contains(f.as_str()) {
                continue;
            }
        }
        let start = Clock::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > c.limit => Err(format!("over the {:?} limit; {d}", c.limit)),
            o => o,
        };
        match outcome {
            Ok(d) => println!("PASS {id:>2} {:<24} {:>7.2}s  {d}", c.name, took.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("FAIL {id:>2} {:<24} {:>7.2}s  {e}", c.name, took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
