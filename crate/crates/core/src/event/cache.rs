use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::client::{prompt_hash, ChatClient};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt_hash: String,
    pub client: String,
    pub raw_response: String,
    pub timestamp: String,
}

/// One JSON file per (client, prompt, attempt) key.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// `sha256(client \0 prompt)`; retries append the attempt index so a
    /// rerun replays the same sequence of responses.
    pub fn key(client: &str, prompt: &str, attempt: usize) -> String {
        let mut h = Sha256::new();
        h.update(client.as_bytes());
        h.update([0u8]);
        h.update(prompt.as_bytes());
        if attempt > 0 {
            h.update([0u8]);
            h.update((attempt as u64).to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    /// Stored response, or `None` for a miss or an unreadable entry.
    pub fn get(&self, client: &str, prompt: &str, attempt: usize) -> Option<String> {
        let path = self.path(&Self::key(client, prompt, attempt));
        let body = std::fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&body) {
            Ok(e) if e.client == client && e.prompt_hash == prompt_hash(prompt) => Some(e.raw_response),
            _ => {
                log::warn!("cache entry {} is corrupt; treating as a miss", path.display());
                None
            }
        }
    }

    /// Write-to-temp-then-rename so concurrent writers never expose a
    /// partial file.
    pub fn put(&self, client: &str, prompt: &str, attempt: usize, response: &str) -> Result<()> {
        let key = Self::key(client, prompt, attempt);
        let path = self.path(&key);
        let parent = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let entry = CacheEntry {
            prompt_hash: prompt_hash(prompt),
            client: client.to_string(),
            raw_response: response.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let tmp = parent.join(format!(".{key}.{}.{:?}.tmp", std::process::id(), std::thread::current().id()));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entry)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Cached first attempt of a prompt.
pub fn cached_call(client: &dyn ChatClient, prompt: &str, cache: Option<&ResponseCache>) -> Result<String> {
    cached_attempt(client, prompt, cache, 0)
}

pub fn cached_attempt(client: &dyn ChatClient, prompt: &str, cache: Option<&ResponseCache>, attempt: usize) -> Result<String> {
    if let Some(c) = cache {
        if let Some(hit) = c.get(client.name(), prompt, attempt) {
            return Ok(hit);
        }
    }
    let raw = client.generate(prompt)?;
    if let Some(c) = cache {
        c.put(client.name(), prompt, attempt, &raw)?;
    }
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::client::ScriptedClient;

    #[test]
    fn hit_skips_client() {
        let d = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(d.path()).unwrap();
        let c = ScriptedClient::new(["r1", "r2"]);
        assert_eq!(cached_call(&c, "p", Some(&cache)).unwrap(), "r1");
        assert_eq!(cached_call(&c, "p", Some(&cache)).unwrap(), "r1");
        assert_eq!(c.calls(), 1);
        assert_eq!(cached_call(&c, "other", Some(&cache)).unwrap(), "r2");
        assert_ne!(ResponseCache::key("scripted", "p", 0), ResponseCache::key("scripted", "other", 0));
    }

    #[test]
    fn corrupt_entry_is_refetched() {
        let d = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(d.path()).unwrap();
        let c = ScriptedClient::new(["first", "second"]);
        cached_call(&c, "p", Some(&cache)).unwrap();
        let key = ResponseCache::key("scripted", "p", 0);
        let path = d.path().join(&key[..2]).join(format!("{key}.json"));
        std::fs::write(&path, b"{ truncated").unwrap();
        assert_eq!(cached_call(&c, "p", Some(&cache)).unwrap(), "second");
        assert_eq!(cache.get("scripted", "p", 0).unwrap(), "second");
    }
}
