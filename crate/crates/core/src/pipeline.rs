//! End-to-end orchestration: data, event branch, knowledge base, training
//! and evaluation, with every artifact under one run directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aff::{analysis_components, sensitivity_sweep, FusionStrategy, SweepCell};
use crate::config::{RunConfig, TextSource, Variant};
use crate::dataset::{
    format_instant, load_dataset, load_event_labels, make_windows, normalize, temporal_split, write_event_labels, write_series_csv, write_text_csv,
    MultimodalSeries, MultimodalWindow, NormStats, TemporalSplit, TextRecord,
};
use crate::encoders::{embed_summary, encode_text, EncoderBackend, HashEncoder, HttpEncoder};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_records, perturb_text, random_words, comparison_table, EvaluationReport, PredictionRecord};
use crate::event::{
    generate_template, read_jsonl, reason, sample_pairs, summarize, write_jsonl, ChatClient, EventContext, EventRecord, HttpChatClient, Llm,
    OracleClient, ReasonedPrediction, RecordingClient, ReplayClient, ResponseCache, Summary, Template,
};
use crate::hic::{build_knowledge_base, correct, guidance, save_kb, KbSource, KnowledgeBase, RetrievalMode};
use crate::model::{Model, Sample};
use crate::plot::{heat_map, line_chart, Series};
use crate::tensor::Matrix;
use crate::trainer::{curves_csv, train, StageCurve, TrainReport};

const SYNTH_DESCRIPTION: &str = "Daily synthetic series with weekly-scale seasonality, noise and occasional level shifts announced in dated text notices.";

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn template(&self) -> PathBuf {
        self.root.join("template.json")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn report(&self, ext: &str) -> PathBuf {
        self.root.join(format!("report.{ext}"))
    }
    pub fn horizon(&self, h: usize) -> PathBuf {
        self.root.join(format!("h{h}"))
    }
    pub fn prepared(&self, h: usize) -> PathBuf {
        self.horizon(h).join("prepared")
    }
    pub fn events(&self, h: usize, split: &str) -> PathBuf {
        self.horizon(h).join("events").join(format!("{split}.jsonl"))
    }
    pub fn summaries(&self, h: usize, split: &str) -> PathBuf {
        self.horizon(h).join("events").join(format!("{split}.summaries.jsonl"))
    }
    pub fn kb(&self, h: usize) -> PathBuf {
        self.horizon(h).join("kb.jsonl")
    }
    pub fn checkpoints(&self, h: usize) -> PathBuf {
        self.horizon(h).join("checkpoints")
    }
    pub fn checkpoint(&self, h: usize) -> PathBuf {
        self.checkpoints(h).join("stage3.json")
    }
    pub fn curves(&self, h: usize) -> PathBuf {
        self.horizon(h).join("curves.csv")
    }
    pub fn train_report(&self, h: usize) -> PathBuf {
        self.horizon(h).join("train_report.json")
    }
    pub fn predictions(&self, h: usize) -> PathBuf {
        self.horizon(h).join("predictions.jsonl")
    }
    pub fn plots(&self, h: usize) -> PathBuf {
        self.horizon(h).join("plots")
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn require(path: PathBuf, command: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Dependency { path, command: command.to_string() })
    }
}

/// Replace every exogenous record with seeded vocabulary words of the same
/// length. Seeding by record id keeps a record identical in every window.
pub fn randomize_texts(series: &mut MultimodalSeries, seed: u64) {
    for t in &mut series.texts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t.id as u64 + 1);
        let n = t.text.split_whitespace().count().max(1);
        t.text = random_words(n, &mut rng);
    }
}

/// Use the window's own statistics text as its only text record.
pub fn statistics_texts(windows: &mut [MultimodalWindow]) {
    for w in windows {
        let (start, end) = w.lookback_span();
        w.exogenous = vec![TextRecord { id: w.window_id, start, end, text: w.endogenous.clone() }];
    }
}

/// The configured series: files when given, the synthetic generator
/// otherwise.
pub fn load_series(cfg: &RunConfig) -> Result<MultimodalSeries> {
    let mut s = match &cfg.data.series {
        Some(p) => {
            let text = cfg.data.text.as_ref().ok_or_else(|| Error::Config("data.text is required alongside data.series".into()))?;
            let mut s = load_dataset(p, text)?;
            if let Some(l) = &cfg.data.labels {
                s.event_labels = Some(load_event_labels(l, s.len())?);
            }
            s
        }
        None => cfg.synth.generate()?,
    };
    if cfg.event.text_source == TextSource::Random {
        randomize_texts(&mut s, cfg.run.seed);
    }
    Ok(s)
}

/// Split, windows and normalization statistics for one horizon.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub horizon: usize,
    pub split: TemporalSplit,
    pub stats: NormStats,
    pub train: Vec<MultimodalWindow>,
    pub val: Vec<MultimodalWindow>,
    pub test: Vec<MultimodalWindow>,
}

impl Prepared {
    pub fn n_vars(&self) -> usize {
        self.split.train.n_vars()
    }
    pub fn target(&self) -> usize {
        self.split.train.target_index
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedMeta {
    pub horizon: usize,
    pub lookback: usize,
    pub n_vars: usize,
    pub target_index: usize,
    pub val_start: usize,
    pub test_start: usize,
    pub val_boundary: String,
    pub windows: [usize; 3],
    pub stats: NormStats,
}

pub fn prepare(cfg: &RunConfig, horizon: usize) -> Result<Prepared> {
    let series = load_series(cfg)?;
    let sc = cfg.split_config(horizon)?;
    let split = temporal_split(&series, &sc)?;
    let stats = NormStats::from_series(&split.train);
    let mut train = make_windows(&split.train, &sc)?;
    let mut val = make_windows(&split.val, &sc)?;
    let mut test = make_windows(&split.test, &sc)?;
    if cfg.event.text_source == TextSource::Statistics {
        for ws in [&mut train, &mut val, &mut test] {
            statistics_texts(ws);
        }
    }
    if let Some(mode) = cfg.event.perturb {
        test = perturb_text(&test, mode, cfg.event.perturb_rate, cfg.run.seed)?;
    }
    Ok(Prepared { horizon, split, stats, train, val, test })
}

/// Summaries and plain reasoning produced before the knowledge base exists.
#[derive(Debug, Clone)]
pub struct EventStage {
    pub template: Template,
    pub train_summaries: Vec<Summary>,
    pub train: Vec<ReasonedPrediction>,
    pub val_summaries: Vec<Summary>,
    pub test_summaries: Vec<Summary>,
}

/// Event forecasts for every split, as consumed by training.
#[derive(Debug, Clone)]
pub struct EventOutputs {
    pub train: Vec<EventRecord>,
    pub val: Vec<EventRecord>,
    pub test: Vec<EventRecord>,
}

#[derive(Debug, Clone)]
pub struct SampleSets {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn make_client(cfg: &RunConfig) -> Result<Box<dyn ChatClient>> {
    Ok(match cfg.client.kind.as_str() {
        "oracle" => Box::new(OracleClient),
        "replay" => {
            let p = cfg.client.replay.as_ref().ok_or_else(|| Error::Config("client.replay must name a replay file".into()))?;
            Box::new(ReplayClient::from_jsonl(p)?)
        }
        "http" => Box::new(HttpChatClient::from_env()?),
        other => return Err(Error::Config(format!("unknown client `{other}`"))),
    })
}

pub fn make_encoder(cfg: &RunConfig) -> Result<Box<dyn EncoderBackend>> {
    Ok(match cfg.encoder.backend.as_str() {
        "hash" => Box::new(HashEncoder::new(cfg.model.d_text, cfg.encoder.d_emb)),
        "http" => Box::new(HttpEncoder::from_env(cfg.model.d_text, cfg.encoder.d_emb)?),
        other => return Err(Error::Config(format!("unknown encoder backend `{other}`"))),
    })
}

/// Run `f` with the configured client, recording every exchange it makes
/// when `client.record` is set. Cached responses are not recorded.
pub fn with_client<T>(cfg: &RunConfig, f: impl FnOnce(&dyn ChatClient) -> Result<T>) -> Result<T> {
    let client = make_client(cfg)?;
    match &cfg.client.record {
        Some(path) => {
            let rec = RecordingClient::new(client.as_ref());
            let out = f(&rec);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            rec.write_jsonl(path)?;
            out
        }
        None => f(client.as_ref()),
    }
}

fn provenance_name(r: &EventRecord) -> String {
    serde_json::to_value(r.provenance).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

pub struct Pipeline<'a> {
    pub cfg: RunConfig,
    pub layout: Layout,
    client: &'a dyn ChatClient,
    encoder: Box<dyn EncoderBackend>,
    cache: ResponseCache,
    pool: rayon::ThreadPool,
}

impl<'a> Pipeline<'a> {
    /// Validate the configuration and snapshot it into the run directory.
    pub fn new(cfg: RunConfig, client: &'a dyn ChatClient) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg.run.out);
        write_file(&layout.config(), cfg.to_json())?;
        let encoder = make_encoder(&cfg)?;
        let cache = ResponseCache::new(cfg.cache_dir())?;
        let limit = client.rate_limit().max_concurrent.unwrap_or(usize::MAX);
        let threads = cfg.run.jobs.min(limit).max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self { cfg, layout, client, encoder, cache, pool })
    }

    pub fn encoder(&self) -> &dyn EncoderBackend {
        self.encoder.as_ref()
    }

    pub fn llm(&self) -> Llm<'_> {
        let mut llm = Llm::new(self.client).with_cache(&self.cache);
        llm.retries = self.cfg.event.retries;
        llm
    }

    pub fn context(&self) -> EventContext {
        let description = if self.cfg.data.description.is_empty() && self.cfg.data.series.is_none() {
            SYNTH_DESCRIPTION.to_string()
        } else {
            self.cfg.data.description.clone()
        };
        EventContext { dataset_name: self.cfg.data.name.clone(), dataset_description: description }
    }

    /// Order-preserving parallel map bounded by `run.jobs` and the client's
    /// concurrency limit.
    fn par_indexed<R: Send>(&self, n: usize, f: impl Fn(usize) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }

    /// Materialize the synthetic dataset as CSV files under `data/`.
    pub fn synth(&self) -> Result<PathBuf> {
        let s = self.cfg.synth.generate()?;
        let dir = self.layout.data();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_series_csv(&s, &dir.join("series.csv"))?;
        write_text_csv(&s.texts, &dir.join("text.csv"))?;
        if let Some(l) = &s.event_labels {
            write_event_labels(l, &dir.join("labels.csv"))?;
        }
        Ok(dir)
    }

    pub fn prepare(&self, h: usize) -> Result<Prepared> {
        let p = prepare(&self.cfg, h)?;
        let dir = self.layout.prepared(h);
        write_jsonl(&dir.join("train.jsonl"), &p.train)?;
        write_jsonl(&dir.join("val.jsonl"), &p.val)?;
        write_jsonl(&dir.join("test.jsonl"), &p.test)?;
        let meta = PreparedMeta {
            horizon: h,
            lookback: self.cfg.split.lookback,
            n_vars: p.n_vars(),
            target_index: p.target(),
            val_start: p.split.val_start,
            test_start: p.split.test_start,
            val_boundary: format_instant(&p.split.val_boundary()),
            windows: [p.train.len(), p.val.len(), p.test.len()],
            stats: p.stats.clone(),
        };
        write_file(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(p)
    }

    pub fn template(&self, p: &Prepared) -> Result<Template> {
        let pairs = sample_pairs(&p.split.train, self.cfg.event.sample_pairs.max(1));
        let t = generate_template(&self.llm(), &self.context().dataset_description, &pairs)?;
        write_file(&self.layout.template(), t.to_json())?;
        Ok(t)
    }

    /// Template, summaries for every split, and plain reasoning for the
    /// training windows.
    pub fn precompute_events(&self, p: &Prepared) -> Result<EventStage> {
        let template = self.template(p)?;
        let (llm, ctx) = (self.llm(), self.context());
        let summaries = |ws: &[MultimodalWindow]| self.par_indexed(ws.len(), |i| summarize(&llm, &ctx, &template, &ws[i]));
        let train_summaries = summaries(&p.train)?;
        let val_summaries = summaries(&p.val)?;
        let test_summaries = summaries(&p.test)?;
        let train = self.par_indexed(p.train.len(), |i| reason(&llm, &ctx, &train_summaries[i], &p.train[i], p.horizon, None))?;
        let h = p.horizon;
        let records: Vec<EventRecord> = train_summaries.iter().zip(&train).map(|(s, r)| EventRecord::new(s, r)).collect();
        write_jsonl(&self.layout.events(h, "train"), &records)?;
        write_jsonl(&self.layout.summaries(h, "val"), &val_summaries)?;
        write_jsonl(&self.layout.summaries(h, "test"), &test_summaries)?;
        Ok(EventStage { template, train_summaries, train, val_summaries, test_summaries })
    }

    /// Correct every training forecast and index the corrections.
    pub fn build_kb(&self, p: &Prepared, ev: &EventStage) -> Result<KnowledgeBase> {
        let (llm, ctx) = (self.llm(), self.context());
        let corrections = self.par_indexed(p.train.len(), |i| {
            let w = &p.train[i];
            correct(&llm, &ctx, &ev.train_summaries[i], &ev.train[i], &w.target_future(), w)
        })?;
        let sources: Vec<KbSource> = corrections
            .into_iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|correction| KbSource { window: &p.train[i], summary: &ev.train_summaries[i], correction }))
            .collect();
        let kb = build_knowledge_base(sources, &p.stats, self.encoder(), p.split.val_boundary())?;
        log::info!("h{}: knowledge base with {} of {} training windows", p.horizon, kb.len(), p.train.len());
        save_kb(&kb, &self.layout.kb(p.horizon))?;
        Ok(kb)
    }

    /// Reasoning for validation and test windows, guided by the retrieved
    /// example under the configured retrieval mode.
    pub fn guided_events(&self, p: &Prepared, ev: &EventStage, kb: &KnowledgeBase) -> Result<(Vec<EventRecord>, Vec<EventRecord>)> {
        let (llm, ctx) = (self.llm(), self.context());
        let mode = self.cfg.hic.retrieval;
        if mode != RetrievalMode::None && kb.is_empty() {
            log::warn!("h{}: knowledge base is empty; reasoning without retrieved examples", p.horizon);
        }
        let t = p.target();
        let run = |ws: &[MultimodalWindow], ss: &[Summary]| {
            self.par_indexed(ws.len(), |i| {
                let (w, s) = (&ws[i], &ss[i]);
                let example = if mode == RetrievalMode::None || kb.is_empty() {
                    None
                } else {
                    let q = embed_summary(self.encoder(), &s.text())?;
                    let lb: Vec<f64> = w.target_history().iter().map(|v| p.stats.normalize_value(t, *v)).collect();
                    guidance(kb, mode, self.cfg.hic.rank, &q, &lb)?
                };
                let r = reason(&llm, &ctx, s, w, p.horizon, example.as_deref())?;
                Ok(EventRecord::new(s, &r))
            })
        };
        let val = run(&p.val, &ev.val_summaries)?;
        let test = run(&p.test, &ev.test_summaries)?;
        write_jsonl(&self.layout.events(p.horizon, "val"), &val)?;
        write_jsonl(&self.layout.events(p.horizon, "test"), &test)?;
        Ok((val, test))
    }

    /// The whole event branch, or `None` when it is disabled.
    pub fn events(&self, p: &Prepared) -> Result<Option<EventOutputs>> {
        if !self.cfg.event.enabled {
            return Ok(None);
        }
        let ev = self.precompute_events(p)?;
        let kb = self.build_kb(p, &ev)?;
        let (val, test) = self.guided_events(p, &ev, &kb)?;
        let train = ev.train_summaries.iter().zip(&ev.train).map(|(s, r)| EventRecord::new(s, r)).collect();
        Ok(Some(EventOutputs { train, val, test }))
    }

    /// Normalized samples; event forecasts are scaled with the target's
    /// training statistics.
    pub fn samples(&self, p: &Prepared, windows: &[MultimodalWindow], events: Option<&[EventRecord]>) -> Result<Vec<Sample>> {
        let norm = normalize(windows, &p.stats);
        let by_id: HashMap<usize, &EventRecord> = events.unwrap_or(&[]).iter().map(|e| (e.window_id, e)).collect();
        let t = p.target();
        let eta = self.cfg.eta.enabled;
        self.par_indexed(norm.len(), |i| {
            let w = &norm[i];
            let tokens = if eta { Some(encode_text(self.encoder(), &windows[i].endogenous)?.matrix) } else { None };
            let event = by_id.get(&w.window_id).map(|e| e.prediction.iter().map(|v| p.stats.normalize_value(t, *v)).collect());
            Ok(Sample { window_id: w.window_id, x: w.x.clone(), y: w.y.clone(), tokens, event, is_event: w.is_event.unwrap_or(false) })
        })
    }

    pub fn sample_sets(&self, p: &Prepared, events: Option<&EventOutputs>) -> Result<SampleSets> {
        Ok(SampleSets {
            train: self.samples(p, &p.train, events.map(|e| e.train.as_slice()))?,
            val: self.samples(p, &p.val, events.map(|e| e.val.as_slice()))?,
            test: self.samples(p, &p.test, events.map(|e| e.test.as_slice()))?,
        })
    }

    pub fn new_model(&self, p: &Prepared) -> Result<Model> {
        Model::new(self.cfg.model_config(p.horizon, p.n_vars(), p.target()), self.cfg.run.seed)
    }

    /// Every upstream step, then the three training stages.
    pub fn train_horizon(&self, h: usize) -> Result<TrainReport> {
        let p = self.prepare(h)?;
        let events = self.events(&p)?;
        let s = self.sample_sets(&p, events.as_ref())?;
        let mut model = self.new_model(&p)?;
        let tc = self.cfg.train_config();
        let report = train(&mut model, &s.train, &s.val, &tc, Some(&self.layout.checkpoints(h)))?;
        write_file(&self.layout.curves(h), curves_csv(&report, &tc))?;
        // relative to the horizon directory so the file does not depend on where the run lives
        let mut stored = report.clone();
        stored.checkpoint = Some(PathBuf::from("checkpoints/stage3.json"));
        write_file(&self.layout.train_report(h), serde_json::to_string_pretty(&stored)?)?;
        log::info!("h{h}: trained in {:.1}s, stage-3 lr {}", report.wall_clock_secs, report.selected_lr);
        Ok(report)
    }

    pub fn load_model(&self, h: usize) -> Result<Model> {
        let path = require(self.layout.checkpoint(h), "train")?;
        Ok(Model::load(&path)?.0)
    }

    /// Event records of a split written by `train`.
    pub fn stored_events(&self, h: usize, split: &str) -> Result<Vec<EventRecord>> {
        read_jsonl(&require(self.layout.events(h, split), "train")?)
    }

    /// Score all test windows with the trained checkpoint.
    pub fn predict_horizon(&self, h: usize) -> Result<Vec<PredictionRecord>> {
        let model = self.load_model(h)?;
        let p = self.prepare(h)?;
        let events = if model.cfg.use_event { Some(self.stored_events(h, "test")?) } else { None };
        let samples = self.samples(&p, &p.test, events.as_deref())?;
        let preds = model.predict(&samples, self.cfg.train.batch_size)?;
        let by_id: HashMap<usize, &EventRecord> = events.as_deref().unwrap_or(&[]).iter().map(|e| (e.window_id, e)).collect();
        let (t, denorm) = (p.target(), self.cfg.eval.denormalize);
        let scale = |m: &Matrix| if denorm { p.stats.denormalize_matrix(m).into_vec() } else { m.data().to_vec() };
        let records: Vec<PredictionRecord> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let ev = by_id.get(&s.window_id);
                PredictionRecord {
                    window_id: s.window_id,
                    is_event: p.test[i].is_event,
                    truth: if denorm { p.test[i].y.data().to_vec() } else { s.y.data().to_vec() },
                    y_final: scale(&preds.y_final[i]),
                    y_num: scale(&preds.y_num[i]),
                    y_event: ev.map(|e| if denorm { e.prediction.clone() } else { e.prediction.iter().map(|v| p.stats.normalize_value(t, *v)).collect() }),
                    provenance: ev.map(|e| provenance_name(e)),
                }
            })
            .collect();
        write_jsonl(&self.layout.predictions(h), &records)?;
        Ok(records)
    }

    pub fn prepared_meta(&self, h: usize) -> Result<PreparedMeta> {
        let path = require(self.layout.prepared(h).join("meta.json"), "prepare")?;
        let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&body)?)
    }

    /// Stored predictions, produced from the checkpoint when missing.
    pub fn predictions(&self, h: usize) -> Result<Vec<PredictionRecord>> {
        let path = self.layout.predictions(h);
        if path.exists() {
            read_jsonl(&path)
        } else {
            self.predict_horizon(h)
        }
    }

    /// Score the stored predictions of every configured horizon.
    pub fn evaluate(&self) -> Result<EvaluationReport> {
        let mut results = Vec::new();
        for &h in &self.cfg.split.horizons {
            require(self.layout.checkpoint(h), "train")?;
            let records = self.predictions(h)?;
            let meta = self.prepared_meta(h)?;
            results.push(evaluate_records(&records, h, meta.n_vars, meta.target_index, self.cfg.fusion.low_frac, self.cfg.fusion.high_frac)?);
        }
        let report = EvaluationReport::new(&self.cfg.run.variant, results)?;
        write_file(&self.layout.report("json"), serde_json::to_string_pretty(&report)?)?;
        write_file(&self.layout.report("csv"), report.to_csv())?;
        write_file(&self.layout.report("txt"), report.to_text())?;
        Ok(report)
    }

    /// Train, predict and evaluate every configured horizon.
    pub fn run(&self) -> Result<EvaluationReport> {
        for &h in &self.cfg.split.horizons {
            self.train_horizon(h)?;
            self.predict_horizon(h)?;
        }
        self.evaluate()
    }
}

/// Figures and fusion diagnostics for one trained horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub horizon: usize,
    pub fusion_weights: Option<[[f64; 3]; 2]>,
    pub band_pearson_low: Option<f64>,
    pub band_pearson_high: Option<f64>,
    /// Boundary sweep: weights refit on validation, scored on test.
    pub sweep: Vec<SweepCell>,
    pub plots: Vec<PathBuf>,
}

pub const SWEEP_LOWS: [f64; 5] = [0.05, 0.1, 0.15, 0.2, 0.3];
pub const SWEEP_HIGHS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

fn as_refs(v: &[(Matrix, Matrix, Matrix)]) -> Vec<(&Matrix, &Matrix, &Matrix)> {
    v.iter().map(|(a, b, c)| (a, b, c)).collect()
}

fn target_column(m: &Matrix, t: usize) -> Matrix {
    let c = m.column(t);
    Matrix::from_vec(c.len(), 1, c)
}

impl Pipeline<'_> {
    /// `(numerical, event, truth)` target columns on the normalized scale.
    fn branch_columns(&self, model: &Model, samples: &[Sample]) -> Result<Vec<(Matrix, Matrix, Matrix)>> {
        let preds = model.predict(samples, self.cfg.train.batch_size)?;
        let t = model.target_index();
        Ok(samples
            .iter()
            .zip(&preds.y_num)
            .filter_map(|(s, num)| {
                let ev = s.event.as_ref()?;
                Some((target_column(num, t), Matrix::from_vec(ev.len(), 1, ev.clone()), target_column(&s.y, t)))
            })
            .collect())
    }

    /// Loss curves, band-filtered overlays and the boundary heat map.
    pub fn analyze_horizon(&self, h: usize) -> Result<Analysis> {
        let report_path = require(self.layout.train_report(h), "train")?;
        let body = std::fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
        let report: TrainReport = serde_json::from_str(&body)?;
        let model = self.load_model(h)?;
        let records = self.predictions(h)?;
        let meta = self.prepared_meta(h)?;
        let (lo, hi) = (self.cfg.fusion.low_frac, self.cfg.fusion.high_frac);
        let result = evaluate_records(&records, h, meta.n_vars, meta.target_index, lo, hi)?;
        let dir = self.layout.plots(h);
        let mut plots = Vec::new();
        let mut emit = |name: &str, svg: String| -> Result<()> {
            let path = dir.join(name);
            write_file(&path, svg)?;
            plots.push(path);
            Ok(())
        };

        let mut curves = Vec::new();
        let with_initial = |c: &StageCurve, val: bool| -> Vec<f64> {
            let (first, rest) = if val { (c.initial_val, &c.val) } else { (Some(c.initial_train), &c.train) };
            first.into_iter().chain(rest.iter().copied()).collect()
        };
        for (name, c) in [("stage 1", &report.stage1), ("stage 2", &report.stage2)] {
            if !c.skipped {
                curves.push(Series::new(format!("{name} train"), &with_initial(c, false)));
                curves.push(Series::new(format!("{name} val"), &with_initial(c, true)).dashed());
            }
        }
        for r in &report.stage3 {
            curves.push(Series::new(format!("stage 3 lr={} train", r.lr), &with_initial(&r.curve, false)));
            curves.push(Series::new(format!("stage 3 lr={} val", r.lr), &with_initial(&r.curve, true)).dashed());
        }
        emit("loss_curves.svg", line_chart(&format!("Training curves, H={h}"), "epoch", "objective", &curves))?;

        let pick = records.iter().find(|r| r.is_event == Some(true)).or(records.first());
        if let (Some(r), true) = (pick, h >= 3) {
            let col = |flat: &[f64]| -> Vec<f64> { flat.iter().skip(meta.target_index).step_by(meta.n_vars).copied().collect() };
            let (truth, fused) = (col(&r.truth), col(&r.y_final));
            let [tl, _, th] = analysis_components(&truth, lo, hi)?;
            let [fl, _, fh] = analysis_components(&fused, lo, hi)?;
            let series = [
                Series::new("truth low", &tl),
                Series::new("forecast low", &fl).dashed(),
                Series::new("truth high", &th),
                Series::new("forecast high", &fh).dashed(),
            ];
            emit("filtered.svg", line_chart(&format!("Band components, window {}", r.window_id), "step", "value", &series))?;
        }

        let mut sweep = Vec::new();
        if model.cfg.use_event {
            let p = prepare(&self.cfg, h)?;
            let val = self.samples(&p, &p.val, Some(&self.stored_events(h, "val")?))?;
            let test = self.samples(&p, &p.test, Some(&self.stored_events(h, "test")?))?;
            let (fit, eval) = (self.branch_columns(&model, &val)?, self.branch_columns(&model, &test)?);
            if !fit.is_empty() && !eval.is_empty() && h >= 2 {
                sweep = sensitivity_sweep(&as_refs(&fit), &as_refs(&eval), h, &SWEEP_LOWS, &SWEEP_HIGHS)?;
                let cells: Vec<(f64, f64, f64)> = sweep.iter().map(|c| (c.low_frac, c.high_frac, c.mse)).collect();
                emit("boundary_heatmap.svg", heat_map(&format!("Test MSE by band boundary, H={h}"), "low fraction", "high fraction", &cells))?;
            }
        }
        let analysis = Analysis {
            horizon: h,
            fusion_weights: (model.cfg.use_event && model.cfg.fusion == FusionStrategy::Aff).then(|| model.fusion_weights().w),
            band_pearson_low: result.band_pearson_low,
            band_pearson_high: result.band_pearson_high,
            sweep,
            plots,
        };
        write_file(&self.layout.horizon(h).join("analysis.json"), serde_json::to_string_pretty(&analysis)?)?;
        Ok(analysis)
    }

    pub fn analyze(&self) -> Result<Vec<Analysis>> {
        self.cfg.split.horizons.iter().map(|&h| self.analyze_horizon(h)).collect()
    }
}

/// Full run with the configured client.
pub fn run_full(cfg: &RunConfig) -> Result<EvaluationReport> {
    with_client(cfg, |c| Pipeline::new(cfg.clone(), c)?.run())
}

/// Directory name of a variant: `:` becomes `-`.
pub fn variant_dir(v: Variant) -> String {
    v.to_string().replace(':', "-")
}

/// The run configuration of one variant: its own directory under
/// `variants/`, the base cache and everything else unchanged.
pub fn variant_config(variant: Variant, base: &RunConfig) -> RunConfig {
    let mut cfg = variant.apply(base);
    cfg.run.out = base.run.out.join("variants").join(variant_dir(variant));
    cfg.run.cache_dir = Some(base.cache_dir());
    cfg
}

pub fn run_ablation(variant: Variant, base: &RunConfig, client: &dyn ChatClient) -> Result<EvaluationReport> {
    let cfg = variant_config(variant, base);
    let diff: Vec<String> = crate::config::config_diff(base, &variant.apply(base));
    write_file(&cfg.run.out.join("diff.json"), serde_json::to_string_pretty(&diff)?)?;
    Pipeline::new(cfg, client)?.run()
}

/// Run each variant in turn and write the comparison under the base run.
pub fn ablate(base: &RunConfig, variants: &[Variant], client: &dyn ChatClient) -> Result<Vec<EvaluationReport>> {
    let mut reports = Vec::new();
    for &v in variants {
        log::info!("variant {v}");
        reports.push(run_ablation(v, base, client)?);
    }
    let root = Layout::new(&base.run.out);
    write_file(&root.root.join("ablation.txt"), comparison_table(&reports))?;
    write_file(&root.root.join("ablation.json"), serde_json::to_string_pretty(&reports)?)?;
    let mut csv = String::new();
    for (i, r) in reports.iter().enumerate() {
        let body = r.to_csv();
        csv.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |x| x.1) });
    }
    write_file(&root.root.join("ablation.csv"), csv)?;
    Ok(reports)
}
