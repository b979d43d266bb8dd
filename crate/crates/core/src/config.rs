//! Run configuration with flat dotted keys, and the ablation variants that
//! edit it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::aff::FusionStrategy;
use crate::dataset::{SplitConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::PerturbMode;
use crate::hic::RetrievalMode;
use crate::model::ModelConfig;
use crate::numerical::{NumericConfig, Pooling, SeriesEncoderConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextSource {
    Exogenous,
    /// Seeded vocabulary words with the original word counts.
    Random,
    /// The window's endogenous statistics text.
    Statistics,
}

impl TextSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Exogenous => "exogenous",
            Self::Random => "random",
            Self::Statistics => "statistics",
        }
    }
}

impl FromStr for TextSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exogenous" => Ok(Self::Exogenous),
            "random" => Ok(Self::Random),
            "statistics" => Ok(Self::Statistics),
            other => Err(Error::Argument(format!("unknown text source `{other}` (exogenous, random, statistics)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub series: Option<PathBuf>,
    pub text: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub name: String,
    pub description: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { series: None, text: None, labels: None, name: "dataset".into(), description: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub lookback: usize,
    pub horizons: Vec<usize>,
    pub label_len: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { train_frac: 0.7, val_frac: 0.1, test_frac: 0.2, lookback: 8, horizons: vec![6, 8, 10, 12], label_len: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_ts: usize,
    pub n_layers: usize,
    /// 0 derives it from the look-back.
    pub patch_len: usize,
    pub patch_stride: usize,
    pub dropout: f64,
    pub d_text: usize,
    pub decomp_kernel: usize,
    pub revin: bool,
    pub temperature: f64,
    pub pooling: Pooling,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_ts: 16,
            n_layers: 2,
            patch_len: 0,
            patch_stride: 0,
            dropout: 0.0,
            d_text: 32,
            decomp_kernel: 25,
            revin: true,
            temperature: 1.0,
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtaSection {
    pub enabled: bool,
    pub decomposition: bool,
    pub contrastive: bool,
}

impl Default for EtaSection {
    fn default() -> Self {
        Self { enabled: true, decomposition: true, contrastive: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub strategy: FusionStrategy,
    pub low_frac: f64,
    pub high_frac: f64,
    pub init: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { strategy: FusionStrategy::Aff, low_frac: 0.1, high_frac: 0.7, init: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventSection {
    pub enabled: bool,
    pub retries: usize,
    pub text_source: TextSource,
    /// Training records shown to the template prompt.
    pub sample_pairs: usize,
    /// Degrade test-window text before reasoning.
    pub perturb: Option<PerturbMode>,
    pub perturb_rate: f64,
}

impl Default for EventSection {
    fn default() -> Self {
        Self { enabled: true, retries: 2, text_source: TextSource::Exogenous, sample_pairs: 10, perturb: None, perturb_rate: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HicSection {
    pub retrieval: RetrievalMode,
    /// 1 is the nearest neighbour.
    pub rank: usize,
}

impl Default for HicSection {
    fn default() -> Self {
        Self { retrieval: RetrievalMode::Full, rank: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// `hash` or `http`.
    pub backend: String,
    pub d_emb: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { backend: "hash".into(), d_emb: 768 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSection {
    /// `oracle`, `replay` or `http`.
    pub kind: String,
    /// Recorded responses for the replay client.
    pub replay: Option<PathBuf>,
    /// Write every exchange of this run to a replay file.
    pub record: Option<PathBuf>,
}

impl Default for ClientSection {
    fn default() -> Self {
        Self { kind: "oracle".into(), replay: None, record: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Score on the original scale rather than the normalized one.
    pub denormalize: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { denormalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    /// Defaults to `<out>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub variant: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, jobs: 4, out: PathBuf::from("runs/default"), cache_dir: None, variant: "full".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub synth: SynthConfig,
    pub split: SplitSection,
    pub model: ModelSection,
    pub eta: EtaSection,
    pub fusion: FusionSection,
    pub event: EventSection,
    pub hic: HicSection,
    pub train: TrainConfig,
    pub encoder: EncoderSection,
    pub client: ClientSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Dotted-key view of a JSON tree.
pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", v, &mut out);
    out
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("serializable config"))
    }

    pub fn keys() -> Vec<String> {
        Self::default().to_flat().into_keys().collect()
    }

    /// Apply dotted-key overrides.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, Value>) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("serializable config");
        let known = self.to_flat();
        for (key, value) in overrides {
            if !known.contains_key(key) {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
            let mut node = &mut tree;
            let parts: Vec<&str> = key.split('.').collect();
            for p in &parts[..parts.len() - 1] {
                node = node.as_object_mut().expect("section").entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            }
            node.as_object_mut().expect("section").insert(parts[parts.len() - 1].to_string(), value.clone());
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        Ok(cfg)
    }

    /// Override one key from command-line text. Text that is not JSON is
    /// taken as a string.
    pub fn set(&self, key: &str, raw: &str) -> Result<Self> {
        let known = self.to_flat();
        let current = known.get(key).ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
        let stringy = matches!(current, Value::String(_)) || (current.is_null() && serde_json::from_str::<Value>(raw).map_or(true, |v| !v.is_string()));
        let value = match serde_json::from_str::<Value>(raw) {
            Ok(v) if !(stringy && !v.is_string()) => v,
            _ => Value::String(raw.to_string()),
        };
        let mut o = BTreeMap::new();
        o.insert(key.to_string(), value);
        self.with_overrides(&o)
    }

    /// Defaults overlaid with a JSON file of dotted (or nested) keys.
    pub fn from_file(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&body).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !v.is_object() {
            return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
        }
        Self::default().with_overrides(&flatten(&v))
    }

    /// Snapshot as flat dotted JSON.
    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self.to_flat().into_iter().collect();
        serde_json::to_string_pretty(&Value::Object(map)).expect("serializable config")
    }

    pub fn validate(&self) -> Result<()> {
        self.split_config(self.split.horizons.first().copied().unwrap_or(1))?.validate()?;
        if self.split.horizons.is_empty() {
            return Err(Error::Config("split.horizons is empty".into()));
        }
        if !(0.0 < self.fusion.low_frac && self.fusion.low_frac < self.fusion.high_frac && self.fusion.high_frac <= 1.0) {
            return Err(Error::Config("fusion fractions must satisfy 0 < low < high <= 1".into()));
        }
        if self.hic.rank == 0 {
            return Err(Error::Config("hic.rank counts from 1".into()));
        }
        if !(0.0..=1.0).contains(&self.event.perturb_rate) {
            return Err(Error::Config("event.perturb_rate must lie in [0, 1]".into()));
        }
        if self.run.jobs == 0 {
            return Err(Error::Config("run.jobs must be positive".into()));
        }
        if !["oracle", "replay", "http"].contains(&self.client.kind.as_str()) {
            return Err(Error::Config(format!("client.kind `{}` (expected oracle, replay, http)", self.client.kind)));
        }
        if !["hash", "http"].contains(&self.encoder.backend.as_str()) {
            return Err(Error::Config(format!("encoder.backend `{}` (expected hash, http)", self.encoder.backend)));
        }
        let mut t = self.train_config();
        t.seed = self.run.seed;
        t.validate()
    }

    pub fn split_config(&self, horizon: usize) -> Result<SplitConfig> {
        let s = &self.split;
        let cfg = SplitConfig {
            train_frac: s.train_frac,
            val_frac: s.val_frac,
            test_frac: s.test_frac,
            lookback: s.lookback,
            horizon,
            label_len: s.label_len.min(s.lookback),
        };
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.run.seed, ..self.train.clone() }
    }

    pub fn model_config(&self, horizon: usize, n_vars: usize, target: usize) -> ModelConfig {
        let m = &self.model;
        let mut enc = SeriesEncoderConfig::for_lookback(self.split.lookback);
        enc.d_ts = m.d_ts;
        enc.n_layers = m.n_layers;
        if m.patch_len > 0 {
            enc.patch_len = m.patch_len;
            enc.patch_stride = (m.patch_len / 2).max(1);
        }
        if m.patch_stride > 0 {
            enc.patch_stride = m.patch_stride;
        }
        enc.dropout = m.dropout;
        enc.pooling = m.pooling;
        let mut numeric = NumericConfig::new(self.split.lookback, horizon, n_vars);
        numeric.encoder = enc;
        numeric.d_text = m.d_text;
        numeric.decomp_kernel = m.decomp_kernel;
        numeric.revin = m.revin;
        numeric.temperature = m.temperature;
        numeric.use_eta = self.eta.enabled;
        numeric.decomposition = self.eta.decomposition;
        numeric.contrastive = self.eta.contrastive;
        let mut mc = ModelConfig::new(numeric, target);
        mc.fusion = self.fusion.strategy;
        mc.use_event = self.event.enabled;
        mc.low_frac = self.fusion.low_frac;
        mc.high_frac = self.fusion.high_frac;
        mc.fusion_init = self.fusion.init;
        mc
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.run.cache_dir.clone().unwrap_or_else(|| self.run.out.join("cache"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaAblation {
    NoDecomposition,
    NoTsTextCl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    TsOnly,
    NoEta,
    NoHic,
    NoEvent,
    Retrieval(RetrievalMode),
    Eta(EtaAblation),
    Fusion(FusionStrategy),
    Rank(usize),
    Text(TextSource),
}

pub const VARIANT_NAMES: &str = "full, ts-only, no-eta, no-hic, no-event, retrieval:{none,ts-only,summary-only}, eta:{no-decomposition,no-ts-text-cl}, fusion:{aff,mlp,cross-attention}, rank-<r>, text:{exogenous,random,statistics}";

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("unknown variant `{s}`; valid: {VARIANT_NAMES}"));
        Ok(match s {
            "full" => Self::Full,
            "ts-only" => Self::TsOnly,
            "no-eta" => Self::NoEta,
            "no-hic" => Self::NoHic,
            "no-event" => Self::NoEvent,
            "eta:no-decomposition" => Self::Eta(EtaAblation::NoDecomposition),
            "eta:no-ts-text-cl" => Self::Eta(EtaAblation::NoTsTextCl),
            _ => {
                if let Some(m) = s.strip_prefix("retrieval:") {
                    match m {
                        "none" | "ts-only" | "summary-only" => Self::Retrieval(m.parse().map_err(|_| bad())?),
                        _ => return Err(bad()),
                    }
                } else if let Some(f) = s.strip_prefix("fusion:") {
                    Self::Fusion(f.parse().map_err(|_| bad())?)
                } else if let Some(t) = s.strip_prefix("text:") {
                    Self::Text(t.parse().map_err(|_| bad())?)
                } else if let Some(r) = s.strip_prefix("rank-") {
                    Self::Rank(r.parse().ok().filter(|r| *r >= 1).ok_or_else(bad)?)
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => write!(f, "full"),
            Self::TsOnly => write!(f, "ts-only"),
            Self::NoEta => write!(f, "no-eta"),
            Self::NoHic => write!(f, "no-hic"),
            Self::NoEvent => write!(f, "no-event"),
            Self::Retrieval(m) => write!(f, "retrieval:{}", m.as_str()),
            Self::Eta(EtaAblation::NoDecomposition) => write!(f, "eta:no-decomposition"),
            Self::Eta(EtaAblation::NoTsTextCl) => write!(f, "eta:no-ts-text-cl"),
            Self::Fusion(s) => write!(f, "fusion:{}", s.as_str()),
            Self::Rank(r) => write!(f, "rank-{r}"),
            Self::Text(t) => write!(f, "text:{}", t.as_str()),
        }
    }
}

impl Variant {
    /// The standard ablation grid.
    pub fn all() -> Vec<Variant> {
        [
            "full",
            "ts-only",
            "no-eta",
            "no-hic",
            "no-event",
            "retrieval:none",
            "retrieval:ts-only",
            "retrieval:summary-only",
            "eta:no-decomposition",
            "eta:no-ts-text-cl",
            "fusion:aff",
            "fusion:mlp",
            "fusion:cross-attention",
            "rank-10",
            "text:exogenous",
            "text:random",
            "text:statistics",
        ]
        .iter()
        .map(|s| s.parse().expect("valid variant"))
        .collect()
    }

    /// Edit only the component this variant names.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match *self {
            Self::Full => {}
            Self::TsOnly => {
                c.eta.enabled = false;
                c.event.enabled = false;
            }
            Self::NoEta => c.eta.enabled = false,
            Self::NoHic => c.hic.retrieval = RetrievalMode::None,
            Self::NoEvent => c.event.enabled = false,
            Self::Retrieval(m) => c.hic.retrieval = m,
            Self::Eta(EtaAblation::NoDecomposition) => c.eta.decomposition = false,
            Self::Eta(EtaAblation::NoTsTextCl) => c.eta.contrastive = false,
            Self::Fusion(s) => c.fusion.strategy = s,
            Self::Rank(r) => c.hic.rank = r,
            Self::Text(t) => c.event.text_source = t,
        }
        c.run.variant = self.to_string();
        c
    }
}

/// Keys whose values differ between two configurations.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let (fa, fb) = (a.to_flat(), b.to_flat());
    fa.keys().chain(fb.keys()).filter(|k| fa.get(*k) != fb.get(*k)).cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip_and_precedence() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("c.json");
        std::fs::write(&p, r#"{"split.lookback": 32, "run.seed": 3, "fusion": {"strategy": "mlp"}}"#).unwrap();
        let file = RunConfig::from_file(&p).unwrap();
        assert_eq!((file.split.lookback, file.run.seed, file.fusion.strategy), (32, 3, FusionStrategy::Mlp));
        let flag = file.set("run.seed", "7").unwrap();
        assert_eq!(flag.run.seed, 7);
        assert_eq!(flag.set("data.name", "123").unwrap().data.name, "123");
        assert_eq!(flag.set("data.series", "x.csv").unwrap().data.series, Some(PathBuf::from("x.csv")));
        let snap = d.path().join("snap.json");
        std::fs::write(&snap, flag.to_json()).unwrap();
        assert_eq!(RunConfig::from_file(&snap).unwrap(), flag);
        assert!(matches!(flag.set("nope.key", "1"), Err(Error::Config(_))));
    }

    #[test]
    fn variants_touch_one_component() {
        let base = RunConfig::default();
        for v in Variant::all() {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            let diff: Vec<String> = config_diff(&base, &v.apply(&base)).into_iter().filter(|k| k != "run.variant").collect();
            let expect: &[&str] = match v {
                Variant::Full | Variant::Fusion(FusionStrategy::Aff) | Variant::Text(TextSource::Exogenous) => &[],
                Variant::TsOnly => &["eta.enabled", "event.enabled"],
                Variant::NoEta => &["eta.enabled"],
                Variant::NoHic | Variant::Retrieval(_) => &["hic.retrieval"],
                Variant::NoEvent => &["event.enabled"],
                Variant::Eta(EtaAblation::NoDecomposition) => &["eta.decomposition"],
                Variant::Eta(EtaAblation::NoTsTextCl) => &["eta.contrastive"],
                Variant::Fusion(_) => &["fusion.strategy"],
                Variant::Rank(_) => &["hic.rank"],
                Variant::Text(_) => &["event.text_source"],
            };
            assert_eq!(diff, expect, "{v}");
        }
        assert!(matches!("bogus".parse::<Variant>(), Err(Error::Argument(m)) if m.contains("ts-only")));
    }
}
