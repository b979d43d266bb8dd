use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RateLimit {
    /// Upper bound on concurrent calls; 1 means single-flight.
    pub max_concurrent: Option<usize>,
    /// Minimum spacing between call starts.
    pub min_interval: Option<Duration>,
}

/// Text-in, text-out language model.
pub trait ChatClient: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, prompt: &str) -> Result<String>;
    fn rate_limit(&self) -> RateLimit {
        RateLimit::default()
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    format!("{:x}", Sha256::digest(prompt.as_bytes()))
}

/// One recorded response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub prompt_hash: String,
    pub response: String,
}

/// Serves recorded responses keyed by prompt hash. Several entries under
/// one hash are returned in order, the last one repeating.
#[derive(Debug)]
pub struct ReplayClient {
    name: String,
    entries: HashMap<String, Vec<String>>,
    served: Mutex<HashMap<String, usize>>,
}

impl ReplayClient {
    pub fn new(name: impl Into<String>, entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        let mut map: HashMap<String, Vec<String>> = HashMap::new();
        for e in entries {
            map.entry(e.prompt_hash).or_default().push(e.response);
        }
        Self {
            name: name.into(),
            entries: map,
            served: Mutex::new(HashMap::new()),
        }
    }

    /// Line-delimited `{prompt_hash, response}` records.
    pub fn from_jsonl(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ReplayEntry = serde_json::from_str(line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(e);
        }
        Ok(Self::new("replay", entries))
    }

    /// Responses keyed by the literal prompt text.
    pub fn from_prompts(pairs: &[(&str, &str)]) -> Self {
        Self::new(
            "replay",
            pairs.iter().map(|(p, r)| ReplayEntry { prompt_hash: prompt_hash(p), response: r.to_string() }),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatClient for ReplayClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, prompt: &str) -> Result<String> {
        let h = prompt_hash(prompt);
        let list = self.entries.get(&h).ok_or_else(|| Error::Transport {
            backend: self.name.clone(),
            attempts: 1,
            message: format!("no recorded response for prompt {}", &h[..12]),
        })?;
        let mut served = self.served.lock().expect("replay lock");
        let n = served.entry(h).or_insert(0);
        let out = list[(*n).min(list.len() - 1)].clone();
        *n += 1;
        Ok(out)
    }
}

/// Returns a fixed sequence of responses regardless of the prompt.
#[derive(Debug)]
pub struct ScriptedClient {
    responses: Vec<String>,
    next: AtomicUsize,
}

impl ScriptedClient {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self {
            responses: responses.into_iter().map(Into::into).collect(),
            next: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.next.load(Ordering::SeqCst)
    }
}

impl ChatClient for ScriptedClient {
    fn name(&self) -> &str {
        "scripted"
    }

    fn generate(&self, _prompt: &str) -> Result<String> {
        let i = self.next.fetch_add(1, Ordering::SeqCst);
        self.responses
            .get(i.min(self.responses.len().saturating_sub(1)))
            .cloned()
            .ok_or_else(|| Error::Transport { backend: "scripted".into(), attempts: 1, message: "no responses".into() })
    }
}

/// Wraps a client, counting calls and recording every exchange so a run
/// can be turned into a replay file.
pub struct RecordingClient<'a> {
    inner: &'a dyn ChatClient,
    log: Mutex<Vec<ReplayEntry>>,
    calls: AtomicUsize,
}

impl<'a> RecordingClient<'a> {
    pub fn new(inner: &'a dyn ChatClient) -> Self {
        Self { inner, log: Mutex::new(Vec::new()), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn entries(&self) -> Vec<ReplayEntry> {
        self.log.lock().expect("recording lock").clone()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut entries = self.entries();
        entries.sort_by(|a, b| a.prompt_hash.cmp(&b.prompt_hash));
        let mut out = String::new();
        for e in entries {
            out.push_str(&serde_json::to_string(&e)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

impl ChatClient for RecordingClient<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn generate(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let r = self.inner.generate(prompt)?;
        self.log.lock().expect("recording lock").push(ReplayEntry { prompt_hash: prompt_hash(prompt), response: r.clone() });
        Ok(r)
    }

    fn rate_limit(&self) -> RateLimit {
        self.inner.rate_limit()
    }
}

/// OpenAI-style chat-completions endpoint.
pub struct HttpChatClient {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub retries: usize,
    pub timeout: Duration,
    pub limit: RateLimit,
    last_call: Mutex<Option<Instant>>,
}

impl HttpChatClient {
    /// Reads `DUALCAST_CHAT_ENDPOINT`, `DUALCAST_CHAT_KEY`, `DUALCAST_CHAT_MODEL`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("DUALCAST_CHAT_ENDPOINT")
            .map_err(|_| Error::Config("DUALCAST_CHAT_ENDPOINT is not set".into()))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var("DUALCAST_CHAT_KEY").ok(),
            model: std::env::var("DUALCAST_CHAT_MODEL").unwrap_or_else(|_| "default".into()),
            retries: 2,
            timeout: Duration::from_secs(120),
            limit: RateLimit { max_concurrent: Some(4), min_interval: Some(Duration::from_millis(100)) },
            last_call: Mutex::new(None),
        })
    }

    fn pace(&self) {
        if let Some(gap) = self.limit.min_interval {
            let mut last = self.last_call.lock().expect("pace lock");
            if let Some(t) = *last {
                let wait = gap.saturating_sub(t.elapsed());
                if !wait.is_zero() {
                    std::thread::sleep(wait);
                }
            }
            *last = Some(Instant::now());
        }
    }
}

impl ChatClient for HttpChatClient {
    fn name(&self) -> &str {
        &self.model
    }

    fn generate(&self, prompt: &str) -> Result<String> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(500 << attempt));
            }
            self.pace();
            let mut req = agent.post(&self.endpoint);
            if let Some(k) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {k}"));
            }
            match req.send_json(body.clone()) {
                Ok(resp) => match resp.into_json::<serde_json::Value>() {
                    Ok(v) => match v.pointer("/choices/0/message/content").and_then(|c| c.as_str()) {
                        Some(s) => return Ok(s.to_string()),
                        None => last = "response has no choices[0].message.content".into(),
                    },
                    Err(e) => last = e.to_string(),
                },
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Transport { backend: format!("http-chat:{}", self.model), attempts: self.retries + 1, message: last })
    }

    fn rate_limit(&self) -> RateLimit {
        self.limit
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_serves_in_order_and_misses_loudly() {
        let c = ReplayClient::from_prompts(&[("p", "one"), ("p", "two"), ("q", "x")]);
        assert_eq!(c.generate("p").unwrap(), "one");
        assert_eq!(c.generate("p").unwrap(), "two");
        assert_eq!(c.generate("p").unwrap(), "two");
        assert_eq!(c.generate("q").unwrap(), "x");
        assert!(matches!(c.generate("r"), Err(Error::Transport { .. })));
    }

    #[test]
    fn recording_roundtrip() {
        let s = ScriptedClient::new(["a", "b"]);
        let r = RecordingClient::new(&s);
        r.generate("first").unwrap();
        r.generate("second").unwrap();
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("replay.jsonl");
        r.write_jsonl(&p).unwrap();
        let replay = ReplayClient::from_jsonl(&p).unwrap();
        assert_eq!(replay.generate("second").unwrap(), "b");
        assert_eq!(r.calls(), 2);
    }
}
