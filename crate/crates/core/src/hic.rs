//! Historical in-context learning: error-corrected reasoning from training
//! windows, stored with summary embeddings and retrieved by cosine
//! similarity as guidance for new windows.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{format_instant, parse_instant, Instant, MultimodalWindow, NormStats};
use crate::encoders::{embed_summary, EncoderBackend, SummaryEmbedding};
use crate::error::{Error, Result};
use crate::event::{first_json_object, render, EventContext, Llm, ReasonedPrediction, Summary, CORRECT_PROMPT};

pub const KB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub window_id: usize,
    pub improved_reasoning: String,
    pub key_insights: Vec<String>,
    pub prediction_factors: String,
    pub original_prediction: Vec<f64>,
    pub actual_values: Vec<f64>,
}

fn list_json(v: &[f64]) -> String {
    serde_json::to_string(v).expect("finite values")
}

pub fn correction_prompt(ctx: &EventContext, summary: &Summary, pred: &ReasonedPrediction, actual: &[f64], window: &MultimodalWindow) -> String {
    render(
        CORRECT_PROMPT,
        &[
            ("dataset_name", &ctx.dataset_name),
            ("summary", &summary.text()),
            ("original_prediction", &list_json(&pred.prediction)),
            ("actual_str", &list_json(actual)),
            ("window_data", &list_json(&window.target_history())),
            ("original_reasoning", &pred.reasoning),
        ],
    )
}

fn as_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.trim().to_string(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn insights(v: &Value) -> Vec<String> {
    let items: Vec<String> = match v {
        Value::Array(a) => a.iter().map(as_text).collect(),
        Value::String(s) => s.lines().map(str::to_string).collect(),
        other => vec![as_text(other)],
    };
    items
        .into_iter()
        .map(|s| s.trim().trim_start_matches(['-', '*', '•']).trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_correction(raw: &str, window_id: usize, pred: &[f64], actual: &[f64]) -> Result<Correction> {
    let v = first_json_object(raw).ok_or_else(|| Error::Parse("correction is not a JSON object".into()))?;
    let get = |k: &str| v.get(k).or_else(|| v.get(&k.to_lowercase())).cloned().unwrap_or(Value::Null);
    let c = Correction {
        window_id,
        improved_reasoning: as_text(&get("Improved_Reasoning")),
        key_insights: insights(&get("Key_Insights")),
        prediction_factors: as_text(&get("Prediction_Factors")),
        original_prediction: pred.to_vec(),
        actual_values: actual.to_vec(),
    };
    if c.improved_reasoning.is_empty() || c.key_insights.is_empty() || c.prediction_factors.is_empty() {
        return Err(Error::Parse("correction has an empty field".into()));
    }
    Ok(c)
}

/// Ask for corrected reasoning given the outcome. `Ok(None)` means the
/// responses never parsed and the window is left out of the KB.
pub fn correct(llm: &Llm, ctx: &EventContext, summary: &Summary, pred: &ReasonedPrediction, actual: &[f64], window: &MultimodalWindow) -> Result<Option<Correction>> {
    if pred.prediction.len() != actual.len() {
        return Err(Error::Precondition(format!(
            "prediction has {} steps but {} actual values were given",
            pred.prediction.len(),
            actual.len()
        )));
    }
    let prompt = correction_prompt(ctx, summary, pred, actual, window);
    match llm.call_validated(&prompt, |raw| parse_correction(raw, window.window_id, &pred.prediction, actual))? {
        Ok(c) => Ok(Some(c)),
        Err((_, e)) => {
            log::warn!("window {}: correction skipped ({e})", window.window_id);
            Ok(None)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub window_id: usize,
    pub summary_text: String,
    pub embedding: SummaryEmbedding,
    pub correction: Correction,
    /// Normalized target look-back, for series-based retrieval.
    pub lookback: Vec<f64>,
    /// Raw target look-back followed by the actual horizon.
    pub series: Vec<f64>,
    pub span_end: Instant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub embedder: String,
    pub d_emb: usize,
    pub boundary: Instant,
    pub entries: Vec<KbEntry>,
}

impl KnowledgeBase {
    pub fn empty(embedder: &str, d_emb: usize, boundary: Instant) -> Self {
        Self { embedder: embedder.to_string(), d_emb, boundary, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_leakage(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.span_end >= self.boundary) {
            return Err(Error::Leakage(format!(
                "window {} ends at {} which is not before the validation boundary {}",
                e.window_id,
                format_instant(&e.span_end),
                format_instant(&self.boundary)
            )));
        }
        Ok(())
    }
}

/// Everything the KB needs about one corrected training window.
pub struct KbSource<'a> {
    pub window: &'a MultimodalWindow,
    pub summary: &'a Summary,
    pub correction: Correction,
}

/// Embed every corrected window and order entries by window id. Windows
/// reaching into the validation or test span are rejected.
pub fn build_knowledge_base(sources: Vec<KbSource>, stats: &NormStats, embedder: &dyn EncoderBackend, boundary: Instant) -> Result<KnowledgeBase> {
    if let Some(s) = sources.iter().find(|s| s.window.span().1 >= boundary) {
        return Err(Error::Leakage(format!(
            "window {} spans {} .. {}, past the validation boundary {}",
            s.window.window_id,
            format_instant(&s.window.span().0),
            format_instant(&s.window.span().1),
            format_instant(&boundary)
        )));
    }
    let embed = |s: &KbSource| -> Result<KbEntry> {
        let text = s.summary.text();
        let t = s.window.target_index;
        let history = s.window.target_history();
        let mut series = history.clone();
        series.extend(s.window.target_future());
        Ok(KbEntry {
            window_id: s.window.window_id,
            embedding: embed_summary(embedder, &text)?,
            summary_text: text,
            correction: s.correction.clone(),
            lookback: history.iter().map(|v| stats.normalize_value(t, *v)).collect(),
            series,
            span_end: s.window.span().1,
        })
    };
    let mut entries: Vec<KbEntry> = if embedder.single_flight() {
        sources.iter().map(embed).collect::<Result<_>>()?
    } else {
        sources.par_iter().map(embed).collect::<Result<_>>()?
    };
    entries.sort_by_key(|e| e.window_id);
    if entries.windows(2).any(|w| w[0].window_id == w[1].window_id) {
        return Err(Error::Precondition("duplicate window ids in knowledge base sources".into()));
    }
    Ok(KnowledgeBase { embedder: embedder.name().to_string(), d_emb: embedder.d_emb(), boundary, entries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub window_id: usize,
    pub score: f64,
    pub index: usize,
}

fn cosine64(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|x| x * x).sum::<f64>()).sqrt();
    if n > 0.0 {
        d / n
    } else {
        0.0
    }
}

fn order(kb: &KnowledgeBase, scores: Vec<f64>) -> Vec<RetrievalResult> {
    let mut r: Vec<RetrievalResult> = scores
        .into_iter()
        .enumerate()
        .map(|(index, score)| RetrievalResult { window_id: kb.entries[index].window_id, score, index })
        .collect();
    r.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.window_id.cmp(&b.window_id)));
    r
}

/// Every entry ranked by summary similarity, best first.
pub fn ranked(kb: &KnowledgeBase, query: &SummaryEmbedding) -> Result<Vec<RetrievalResult>> {
    if query.dim() != kb.d_emb {
        return Err(Error::Shape(format!("query has dimension {} but the KB stores {}", query.dim(), kb.d_emb)));
    }
    Ok(order(kb, kb.entries.iter().map(|e| query.cosine(&e.embedding)).collect()))
}

/// Exact top-`k`. An empty KB yields no results, meaning no guidance.
pub fn retrieve(kb: &KnowledgeBase, query: &SummaryEmbedding, k: usize) -> Result<Vec<RetrievalResult>> {
    let mut r = ranked(kb, query)?;
    r.truncate(k);
    Ok(r)
}

/// The `rank`-th most similar entry, counting from 1.
pub fn rank_select(kb: &KnowledgeBase, query: &SummaryEmbedding, rank: usize) -> Result<RetrievalResult> {
    if rank == 0 || rank > kb.len() {
        return Err(Error::Range { rank, size: kb.len() });
    }
    Ok(ranked(kb, query)?.swap_remove(rank - 1))
}

/// Ranking by cosine over normalized look-back vectors.
pub fn ranked_by_series(kb: &KnowledgeBase, lookback: &[f64]) -> Vec<RetrievalResult> {
    order(kb, kb.entries.iter().map(|e| cosine64(lookback, &e.lookback)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    None,
    TsOnly,
    SummaryOnly,
    Full,
}

impl RetrievalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::TsOnly => "ts-only",
            Self::SummaryOnly => "summary-only",
            Self::Full => "full",
        }
    }
}

impl FromStr for RetrievalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "ts-only" => Self::TsOnly,
            "summary-only" => Self::SummaryOnly,
            "full" => Self::Full,
            other => return Err(Error::Argument(format!("unknown retrieval mode `{other}`"))),
        })
    }
}

/// Render a retrieved entry as the in-context example block.
pub fn render_example(entry: &KbEntry, score: f64, mode: RetrievalMode) -> Option<String> {
    let v = match mode {
        RetrievalMode::None => return None,
        RetrievalMode::TsOnly => {
            let l = entry.series.len() - entry.correction.actual_values.len();
            json!({
                "similar_example_window": entry.window_id,
                "similarity_score": score,
                "retrieval_method": "Series_Based_Cosine",
                "window_data": &entry.series[..l],
                "actual_values": &entry.series[l..],
            })
        }
        RetrievalMode::SummaryOnly => json!({
            "similar_example_window": entry.window_id,
            "similarity_score": score,
            "retrieval_method": "Summary_Based_RAG_Embedding",
            "summary": entry.summary_text,
        }),
        RetrievalMode::Full => json!({
            "similar_example_window": entry.window_id,
            "similarity_score": score,
            "retrieval_method": "Summary_Based_RAG_Embedding",
            "summary": entry.summary_text,
            "original_prediction": entry.correction.original_prediction,
            "actual_values": entry.correction.actual_values,
            "improved_reasoning": entry.correction.improved_reasoning,
            "key_insights": entry.correction.key_insights,
            "prediction_factors": entry.correction.prediction_factors,
        }),
    };
    Some(v.to_string())
}

/// Guidance for one window: the `rank`-th neighbour under `mode`, or
/// `None` when retrieval is off or the KB is empty.
pub fn guidance(kb: &KnowledgeBase, mode: RetrievalMode, rank: usize, query: &SummaryEmbedding, lookback: &[f64]) -> Result<Option<String>> {
    if mode == RetrievalMode::None || kb.is_empty() {
        return Ok(None);
    }
    let hit = match mode {
        RetrievalMode::TsOnly => {
            let r = ranked_by_series(kb, lookback);
            if rank == 0 || rank > r.len() {
                return Err(Error::Range { rank, size: r.len() });
            }
            r[rank - 1].clone()
        }
        _ => rank_select(kb, query, rank)?,
    };
    Ok(render_example(&kb.entries[hit.index], hit.score, mode))
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    d_emb: usize,
    embedder: String,
    split_boundary_instant: String,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Line {
    window_id: usize,
    summary_text: String,
    embedding: String,
    improved_reasoning: String,
    key_insights: Vec<String>,
    prediction_factors: String,
    original_prediction: Vec<f64>,
    actual_values: Vec<f64>,
    lookback: Vec<f64>,
    series: Vec<f64>,
    span_end: String,
}

fn encode_f32(v: &[f32]) -> String {
    B64.encode(v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
}

fn decode_f32(s: &str) -> Result<Vec<f32>> {
    let bytes = B64.decode(s).map_err(|e| Error::Integrity(format!("embedding is not base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Integrity("embedding byte length is not a multiple of 4".into()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    let mut out = serde_json::to_string(&Header {
        version: KB_VERSION,
        d_emb: kb.d_emb,
        embedder: kb.embedder.clone(),
        split_boundary_instant: format_instant(&kb.boundary),
        count: kb.len(),
    })?;
    out.push('\n');
    for e in &kb.entries {
        let c = &e.correction;
        out.push_str(&serde_json::to_string(&Line {
            window_id: e.window_id,
            summary_text: e.summary_text.clone(),
            embedding: encode_f32(e.embedding.values()),
            improved_reasoning: c.improved_reasoning.clone(),
            key_insights: c.key_insights.clone(),
            prediction_factors: c.prediction_factors.clone(),
            original_prediction: c.original_prediction.clone(),
            actual_values: c.actual_values.clone(),
            lookback: e.lookback.clone(),
            series: e.series.clone(),
            span_end: format_instant(&e.span_end),
        })?);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load and verify a KB. `embedder` is the configured backend name.
pub fn load_kb(path: &Path, embedder: &str) -> Result<KnowledgeBase> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::Integrity(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let h: Header = serde_json::from_str(&head).map_err(|e| Error::Integrity(format!("bad KB header: {e}")))?;
    if h.version != KB_VERSION {
        return Err(Error::Compatibility(format!("KB version {} is not supported (expected {KB_VERSION})", h.version)));
    }
    if h.embedder != embedder {
        return Err(Error::Compatibility(format!("KB was embedded with `{}` but `{embedder}` is configured", h.embedder)));
    }
    let boundary = parse_instant(&h.split_boundary_instant).ok_or_else(|| Error::Integrity("bad boundary instant in KB header".into()))?;
    let mut entries = Vec::with_capacity(h.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).map_err(|e| Error::Integrity(format!("KB entry {}: {e}", i + 1)))?;
        let values = decode_f32(&l.embedding)?;
        if values.len() != h.d_emb {
            return Err(Error::Integrity(format!("KB entry {} has dimension {} not {}", i + 1, values.len(), h.d_emb)));
        }
        entries.push(KbEntry {
            window_id: l.window_id,
            summary_text: l.summary_text,
            embedding: SummaryEmbedding::from_f32(values),
            correction: Correction {
                window_id: l.window_id,
                improved_reasoning: l.improved_reasoning,
                key_insights: l.key_insights,
                prediction_factors: l.prediction_factors,
                original_prediction: l.original_prediction,
                actual_values: l.actual_values,
            },
            lookback: l.lookback,
            series: l.series,
            span_end: parse_instant(&l.span_end).ok_or_else(|| Error::Integrity(format!("KB entry {}: bad span end", i + 1)))?,
        });
    }
    if entries.len() != h.count {
        return Err(Error::Integrity(format!("KB header declares {} entries but {} were read", h.count, entries.len())));
    }
    let kb = KnowledgeBase { embedder: h.embedder, d_emb: h.d_emb, boundary, entries };
    kb.check_leakage()?;
    Ok(kb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_windows, synthesize_event_dataset, temporal_split, SplitConfig};
    use crate::encoders::HashEncoder;
    use crate::event::{OracleClient, Provenance, ScriptedClient};

    fn entry(id: usize, v: &[f64]) -> KbEntry {
        KbEntry {
            window_id: id,
            summary_text: format!("s{id}"),
            embedding: SummaryEmbedding::from_f64(v),
            correction: Correction {
                window_id: id,
                improved_reasoning: "r".into(),
                key_insights: vec!["k".into()],
                prediction_factors: "f".into(),
                original_prediction: vec![0.0; 2],
                actual_values: vec![1.0; 2],
            },
            lookback: v.to_vec(),
            series: vec![0.0, 0.0, 1.0, 1.0],
            span_end: parse_instant("2000-01-01").unwrap(),
        }
    }

    fn kb(entries: Vec<KbEntry>) -> KnowledgeBase {
        let d = entries.first().map_or(2, |e| e.embedding.dim());
        KnowledgeBase { embedder: "hash".into(), d_emb: d, boundary: parse_instant("2001-01-01").unwrap(), entries }
    }

    #[test]
    fn orthogonal_pair() {
        let k = kb(vec![entry(1, &[1.0, 0.0]), entry(2, &[0.0, 1.0])]);
        let r = retrieve(&k, &SummaryEmbedding::from_f64(&[1.0, 0.0]), 2).unwrap();
        assert_eq!((r[0].window_id, r[0].score), (1, 1.0));
        assert_eq!((r[1].window_id, r[1].score), (2, 0.0));
    }

    #[test]
    fn ties_prefer_smaller_id_and_rank_bounds() {
        let k = kb(vec![entry(9, &[1.0, 0.0]), entry(3, &[1.0, 0.0]), entry(5, &[-1.0, 0.0])]);
        let q = SummaryEmbedding::from_f64(&[1.0, 0.0]);
        assert_eq!(rank_select(&k, &q, 1).unwrap().window_id, 3);
        assert_eq!(rank_select(&k, &q, 3).unwrap().window_id, 5);
        assert!(matches!(rank_select(&k, &q, 4), Err(Error::Range { rank: 4, size: 3 })));
        assert!(retrieve(&kb(vec![]), &q, 1).unwrap().is_empty());
    }

    #[test]
    fn correction_length_mismatch_and_garbage() {
        let s = synthesize_event_dataset(60, 0.1, 1.0, 0.1, 1).unwrap();
        let w = &make_windows(&s, &SplitConfig::new(8, 4)).unwrap()[0];
        let ctx = EventContext { dataset_name: "x".into(), dataset_description: "y".into() };
        let sm = Summary { window_id: w.window_id, record: Default::default(), raw: "{}".into(), text_free: true };
        let p = ReasonedPrediction { window_id: w.window_id, prediction: vec![0.0; 4], reasoning: "r".into(), provenance: Provenance::Plain };
        let c = ScriptedClient::new(["garbage"]);
        assert!(matches!(correct(&Llm::new(&c), &ctx, &sm, &p, &[1.0; 3], w), Err(Error::Precondition(_))));
        assert_eq!(correct(&Llm::new(&c), &ctx, &sm, &p, &[1.0; 4], w).unwrap(), None);
        let good = correct(&Llm::new(&OracleClient), &ctx, &sm, &p, &[1.0; 4], w).unwrap().unwrap();
        assert!(good.improved_reasoning.contains("underestimated"));
    }

    fn sources<'a>(ws: &[&'a MultimodalWindow], summaries: &'a [Summary]) -> Vec<KbSource<'a>> {
        ws.iter()
            .map(|w| KbSource {
                window: w,
                summary: summaries.iter().find(|s| s.window_id == w.window_id).unwrap(),
                correction: Correction {
                    window_id: w.window_id,
                    improved_reasoning: "r".into(),
                    key_insights: vec!["a".into()],
                    prediction_factors: "f".into(),
                    original_prediction: vec![0.0; 4],
                    actual_values: w.target_future(),
                },
            })
            .collect()
    }

    #[test]
    fn build_guards_and_roundtrip() {
        let s = synthesize_event_dataset(200, 0.1, 1.0, 0.1, 2).unwrap();
        let cfg = SplitConfig::new(8, 4);
        let split = temporal_split(&s, &cfg).unwrap();
        let train = make_windows(&split.train, &cfg).unwrap();
        let test = make_windows(&split.test, &cfg).unwrap();
        let stats = NormStats::from_series(&split.train);
        let summaries: Vec<Summary> = train
            .iter()
            .chain(&test)
            .map(|w| Summary { window_id: w.window_id, record: Default::default(), raw: String::new(), text_free: false })
            .collect();
        let enc = HashEncoder::new(8, 16);
        let five: Vec<&MultimodalWindow> = train.iter().take(5).collect();
        let k = build_knowledge_base(sources(&five, &summaries), &stats, &enc, split.val_boundary()).unwrap();
        assert_eq!(k.len(), 5);
        let mut leaky = five.clone();
        leaky.push(&test[0]);
        assert!(matches!(build_knowledge_base(sources(&leaky, &summaries), &stats, &enc, split.val_boundary()), Err(Error::Leakage(_))));

        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("kb.jsonl");
        save_kb(&k, &p).unwrap();
        let again = load_kb(&p, "hash").unwrap();
        assert_eq!(again, k);
        let p2 = d.path().join("kb2.jsonl");
        save_kb(&build_knowledge_base(sources(&five, &summaries), &stats, &enc, split.val_boundary()).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
        assert!(matches!(load_kb(&p, "other"), Err(Error::Compatibility(_))));

        let body = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, &body[..body.len() - 40]).unwrap();
        assert!(matches!(load_kb(&p, "hash"), Err(Error::Integrity(_))));
    }

    #[test]
    fn guidance_modes() {
        let k = kb(vec![entry(1, &[1.0, 0.0]), entry(2, &[0.0, 1.0])]);
        let q = SummaryEmbedding::from_f64(&[0.0, 1.0]);
        assert_eq!(guidance(&k, RetrievalMode::None, 1, &q, &[1.0, 0.0]).unwrap(), None);
        let full = guidance(&k, RetrievalMode::Full, 1, &q, &[1.0, 0.0]).unwrap().unwrap();
        assert!(full.contains("\"similar_example_window\":2") && full.contains("improved_reasoning"));
        let s = guidance(&k, RetrievalMode::SummaryOnly, 1, &q, &[1.0, 0.0]).unwrap().unwrap();
        assert!(!s.contains("improved_reasoning"));
        let ts = guidance(&k, RetrievalMode::TsOnly, 1, &q, &[1.0, 0.0]).unwrap().unwrap();
        assert!(ts.contains("\"similar_example_window\":1"));
        assert_eq!(guidance(&kb(vec![]), RetrievalMode::Full, 1, &q, &[]).unwrap(), None);
    }
}
