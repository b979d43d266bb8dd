//! Event-driven branch: template → window summary → reasoned forecast over
//! a pluggable chat client, with strict parsing, retries and a response
//! cache.

mod cache;
mod client;
mod oracle;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::{format_instant, MultimodalSeries, MultimodalWindow, TextRecord};
use crate::error::{Error, Result};

pub use cache::{cached_attempt, cached_call, CacheEntry, ResponseCache};
pub use client::{prompt_hash, ChatClient, HttpChatClient, RateLimit, RecordingClient, ReplayClient, ReplayEntry, ScriptedClient};
pub use oracle::OracleClient;

pub const TEMPLATE_PROMPT: &str = include_str!("../../prompts/template.v1.txt");
pub const SUMMARY_PROMPT: &str = include_str!("../../prompts/summary.v1.txt");
pub const REASON_PROMPT: &str = include_str!("../../prompts/reason.v1.txt");
pub const CORRECT_PROMPT: &str = include_str!("../../prompts/correct.v1.txt");
pub const FIXED_EXAMPLE: &str = include_str!("../../prompts/fixed_example.v1.txt");

pub const REQUIRED_TEMPLATE_KEYS: [&str; 3] = ["Possible Relationships", "Features for Prediction", "Trend Analysis for Prediction"];

/// Fill `{name}` slots. Unknown braces (JSON in the prompt body) are left
/// alone.
pub fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

/// Language model access shared by every pipeline step.
#[derive(Clone, Copy)]
pub struct Llm<'a> {
    pub client: &'a dyn ChatClient,
    pub cache: Option<&'a ResponseCache>,
    /// Extra attempts after the first when validation fails.
    pub retries: usize,
}

impl<'a> Llm<'a> {
    pub fn new(client: &'a dyn ChatClient) -> Self {
        Self { client, cache: None, retries: 2 }
    }

    pub fn with_cache(mut self, cache: &'a ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Call until `validate` accepts a response. Returns the last raw
    /// output and error when every attempt fails.
    pub fn call_validated<T>(&self, prompt: &str, mut validate: impl FnMut(&str) -> Result<T>) -> Result<std::result::Result<T, (String, Error)>> {
        let mut last = None;
        for attempt in 0..=self.retries {
            let raw = cached_attempt(self.client, prompt, self.cache, attempt)?;
            match validate(&raw) {
                Ok(v) => return Ok(Ok(v)),
                Err(e) => {
                    log::debug!("attempt {} rejected: {e}", attempt + 1);
                    last = Some((raw, e));
                }
            }
        }
        Ok(Err(last.expect("at least one attempt")))
    }
}

/// Locate and parse the first balanced JSON object in `raw`.
pub fn first_json_object(raw: &str) -> Option<Value> {
    let bytes = raw.as_bytes();
    let mut start = 0;
    while let Some(off) = raw[start..].find('{') {
        let s = start + off;
        let (mut depth, mut in_str, mut esc) = (0usize, false, false);
        let mut end = None;
        for (i, &c) in bytes.iter().enumerate().skip(s) {
            if in_str {
                match c {
                    _ if esc => esc = false,
                    b'\\' => esc = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match c {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(e) => {
                if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(&raw[s..=e]) {
                    return Some(v);
                }
                start = s + 1;
            }
            None => return None,
        }
    }
    None
}

fn coerce_numbers(v: &Value) -> Result<Vec<f64>> {
    match v {
        Value::Array(items) => items
            .iter()
            .map(|x| match x {
                Value::Number(n) => n.as_f64().ok_or_else(|| Error::Parse("unrepresentable number".into())),
                Value::String(s) => s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("`{s}` is not a number"))),
                other => Err(Error::Parse(format!("unexpected prediction entry {other}"))),
            })
            .collect(),
        Value::String(s) => {
            if let Ok(inner @ Value::Array(_)) = serde_json::from_str::<Value>(s) {
                return coerce_numbers(&inner);
            }
            let t = s.trim().trim_start_matches('[').trim_end_matches(']');
            if t.trim().is_empty() {
                return Err(Error::Parse("empty prediction".into()));
            }
            t.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|p| !p.is_empty())
                .map(|p| p.parse::<f64>().map_err(|_| Error::Parse(format!("`{p}` is not a number"))))
                .collect()
        }
        Value::Number(n) => Ok(vec![n.as_f64().unwrap_or(f64::NAN)]),
        other => Err(Error::Parse(format!("prediction has unsupported type: {other}"))),
    }
}

/// Strict extraction of a length-`h` forecast from a model response.
pub fn parse_prediction(raw: &str, h: usize) -> Result<Vec<f64>> {
    let v = first_json_object(raw).ok_or_else(|| Error::Parse("no JSON object in response".into()))?;
    let obj = v.as_object().expect("object");
    let p = obj
        .get("prediction")
        .or_else(|| obj.get("Prediction"))
        .ok_or_else(|| Error::Parse("response lacks a `prediction` key".into()))?;
    let values = coerce_numbers(p)?;
    if values.len() != h {
        return Err(Error::Length { expected: h, got: values.len() });
    }
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::Value(format!("prediction entry {i} is not finite")));
    }
    Ok(values)
}

fn reasoning_text(raw: &str) -> String {
    first_json_object(raw)
        .and_then(|v| {
            let o = v.as_object()?;
            let r = o.get("Reasoning").or_else(|| o.get("reasoning"))?;
            Some(match r {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
        })
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub record: Map<String, Value>,
    pub raw: String,
}

impl Template {
    pub fn parse(raw: &str) -> Result<Self> {
        let v = first_json_object(raw).ok_or_else(|| Error::Parse("template is not a JSON object".into()))?;
        let record = v.as_object().expect("object").clone();
        let missing: Vec<&str> = REQUIRED_TEMPLATE_KEYS.iter().copied().filter(|k| !record.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(Error::Parse(format!("template missing keys: {}", missing.join(", "))));
        }
        Ok(Self { record, raw: raw.to_string() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.record.clone())).expect("serializable")
    }
}

/// One exogenous record and the target value at its end instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub text: String,
    pub series: String,
}

/// Up to the first `k` text records of a split paired with the target at
/// their end instant; rows alone when there are no texts.
pub fn sample_pairs(series: &MultimodalSeries, k: usize) -> Vec<SamplePair> {
    let t = series.target_index;
    let at = |ts| series.timestamps.iter().position(|x| *x >= ts).unwrap_or(series.len() - 1);
    let pairs: Vec<SamplePair> = series
        .texts
        .iter()
        .take(k)
        .map(|r| {
            let i = at(r.end);
            SamplePair {
                text: r.text.clone(),
                series: format!("{}: {:.4}", format_instant(&series.timestamps[i]), series.values[(i, t)]),
            }
        })
        .collect();
    if !pairs.is_empty() {
        return pairs;
    }
    (0..series.len().min(k))
        .map(|i| SamplePair {
            text: String::new(),
            series: format!("{}: {:.4}", format_instant(&series.timestamps[i]), series.values[(i, t)]),
        })
        .collect()
}

pub fn generate_template(llm: &Llm, dataset_description: &str, pairs: &[SamplePair]) -> Result<Template> {
    if pairs.is_empty() {
        return Err(Error::Precondition("template generation needs at least one sample pair".into()));
    }
    let pairs_json = serde_json::to_string(pairs)?;
    let prompt = render(TEMPLATE_PROMPT, &[("sample_pairs", &pairs_json), ("dataset_description", dataset_description)]);
    match llm.call_validated(&prompt, Template::parse)? {
        Ok(t) => Ok(t),
        Err((last_output, e)) => Err(Error::Template { message: e.to_string(), last_output }),
    }
}

/// Dataset-level strings that fill prompt slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventContext {
    pub dataset_name: String,
    pub dataset_description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub window_id: usize,
    pub record: Map<String, Value>,
    pub raw: String,
    /// Built without exogenous text.
    pub text_free: bool,
}

impl Summary {
    /// Canonical compact JSON, used in prompts and for embedding.
    pub fn text(&self) -> String {
        serde_json::to_string(&Value::Object(self.record.clone())).expect("serializable")
    }
}

pub fn time_series_str(window: &MultimodalWindow) -> String {
    let mut s = String::new();
    for r in 0..window.lookback() {
        let _ = write!(s, "{}:", format_instant(&window.timestamps[r]));
        for (c, name) in window.variable_names.iter().enumerate() {
            let sep = if c == 0 { " " } else { ", " };
            let _ = write!(s, "{sep}{name}={:.4}", window.x[(r, c)]);
        }
        s.push('\n');
    }
    s.trim_end().to_string()
}

pub fn texts_str(texts: &[TextRecord]) -> String {
    if texts.is_empty() {
        return "(no text records for this window)".to_string();
    }
    texts
        .iter()
        .map(|t| format!("[{} to {}] {}", format_instant(&t.start), format_instant(&t.end), t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Target look-back as `instant: value` lines.
pub fn window_data(window: &MultimodalWindow) -> String {
    (0..window.lookback())
        .map(|r| format!("{}: {:.4}", format_instant(&window.timestamps[r]), window.x[(r, window.target_index)]))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn summary_prompt(ctx: &EventContext, template: &Template, window: &MultimodalWindow) -> String {
    let (s, e) = window.lookback_span();
    render(
        SUMMARY_PROMPT,
        &[
            ("start_time", &format_instant(&s)),
            ("end_time", &format_instant(&e)),
            ("dataset_name", &ctx.dataset_name),
            ("dataset_description", &ctx.dataset_description),
            ("template", &template.to_json()),
            ("time_series_str", &time_series_str(window)),
            ("texts_str", &texts_str(&window.exogenous)),
        ],
    )
}

pub fn summarize(llm: &Llm, ctx: &EventContext, template: &Template, window: &MultimodalWindow) -> Result<Summary> {
    let prompt = summary_prompt(ctx, template, window);
    let parse = |raw: &str| -> Result<Map<String, Value>> {
        let v = first_json_object(raw).ok_or_else(|| Error::Parse("summary is not a JSON object".into()))?;
        Ok(v.as_object().expect("object").clone())
    };
    let mut raw_out = String::new();
    let result = llm.call_validated(&prompt, |raw| {
        raw_out = raw.to_string();
        parse(raw)
    })?;
    match result {
        Ok(record) => Ok(Summary {
            window_id: window.window_id,
            record,
            raw: raw_out,
            text_free: window.exogenous.is_empty(),
        }),
        Err((_, e)) => Err(Error::Summary { window_id: window.window_id, message: e.to_string() }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Plain,
    Icl,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonedPrediction {
    pub window_id: usize,
    pub prediction: Vec<f64>,
    pub reasoning: String,
    pub provenance: Provenance,
}

pub fn reason_prompt(ctx: &EventContext, summary: &Summary, window: &MultimodalWindow, horizon: usize, example: Option<&str>) -> String {
    let example = example.unwrap_or(FIXED_EXAMPLE.trim());
    render(
        REASON_PROMPT,
        &[
            ("window_size", &window.lookback().to_string()),
            ("prediction_length", &horizon.to_string()),
            ("dataset_name", &ctx.dataset_name),
            ("example", example),
            ("summary", &summary.text()),
            ("window_data", &window_data(window)),
        ],
    )
}

/// Forecast from a summary and the look-back. `example` is a retrieved
/// in-context example; without one the fixed example is used. Responses
/// that never parse fall back to repeating the last target value.
pub fn reason(llm: &Llm, ctx: &EventContext, summary: &Summary, window: &MultimodalWindow, horizon: usize, example: Option<&str>) -> Result<ReasonedPrediction> {
    if horizon == 0 {
        return Err(Error::Precondition("horizon must be positive".into()));
    }
    let prompt = reason_prompt(ctx, summary, window, horizon, example);
    let provenance = if example.is_some() { Provenance::Icl } else { Provenance::Plain };
    let result = llm.call_validated(&prompt, |raw| Ok((parse_prediction(raw, horizon)?, reasoning_text(raw))))?;
    Ok(match result {
        Ok((prediction, reasoning)) => ReasonedPrediction { window_id: window.window_id, prediction, reasoning, provenance },
        Err((_, e)) => {
            log::warn!("window {}: unusable reasoning output ({e}); persistence fallback", window.window_id);
            ReasonedPrediction {
                window_id: window.window_id,
                prediction: vec![window.last_target(); horizon],
                reasoning: format!("fallback: {e}"),
                provenance: Provenance::Fallback,
            }
        }
    })
}

/// One line of an event-output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub window_id: usize,
    pub summary: Value,
    pub prediction: Vec<f64>,
    pub reasoning: String,
    pub provenance: Provenance,
}

impl EventRecord {
    pub fn new(summary: &Summary, p: &ReasonedPrediction) -> Self {
        Self {
            window_id: p.window_id,
            summary: Value::Object(summary.record.clone()),
            prediction: p.prediction.clone(),
            reasoning: p.reasoning.clone(),
            provenance: p.provenance,
        }
    }

    pub fn summary(&self, text_free: bool) -> Summary {
        Summary {
            window_id: self.window_id,
            record: self.summary.as_object().cloned().unwrap_or_default(),
            raw: self.summary.to_string(),
            text_free,
        }
    }

    pub fn prediction(&self) -> ReasonedPrediction {
        ReasonedPrediction {
            window_id: self.window_id,
            prediction: self.prediction.clone(),
            reasoning: self.reasoning.clone(),
            provenance: self.provenance,
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: &std::path::Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<Vec<T>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}
