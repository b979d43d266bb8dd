//! Token-level text encoding and whole-text embedding behind one backend
//! trait, with a deterministic hashing fallback and an HTTP client.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// `L_text × d_text` token vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddings {
    pub matrix: Matrix,
}

impl TokenEmbeddings {
    pub fn token_count(&self) -> usize {
        self.matrix.rows()
    }
}

/// Unit-normalized embedding stored in single precision, as persisted in
/// knowledge-base files.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryEmbedding {
    values: Vec<f32>,
    norm: f64,
}

impl SummaryEmbedding {
    pub fn from_f32(values: Vec<f32>) -> Self {
        let norm = values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        Self { values, norm }
    }

    /// Normalizes before rounding to `f32`.
    pub fn from_f64(values: &[f64]) -> Self {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if n > 0.0 { 1.0 / n } else { 0.0 };
        Self::from_f32(values.iter().map(|v| (v * scale) as f32).collect())
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| *v as f64).collect()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// Cosine similarity; 0 when either vector is zero.
    pub fn cosine(&self, other: &SummaryEmbedding) -> f64 {
        assert_eq!(self.dim(), other.dim(), "embedding dimension mismatch");
        let d: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let den = self.norm * other.norm;
        if den > 0.0 {
            d / den
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub token_encode: bool,
    pub embed: bool,
}

pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn d_text(&self) -> usize;
    fn d_emb(&self) -> usize;
    fn capabilities(&self) -> Capabilities;
    /// Backends that cannot take concurrent calls return true.
    fn single_flight(&self) -> bool {
        false
    }
    /// `tokens × d_text` matrix.
    fn encode_tokens(&self, text: &str) -> Result<Matrix>;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn encode_text(backend: &dyn EncoderBackend, text: &str) -> Result<TokenEmbeddings> {
    if !backend.capabilities().token_encode {
        return Err(Error::Precondition(format!("backend `{}` cannot encode tokens", backend.name())));
    }
    if text.trim().is_empty() {
        return Err(Error::Precondition("cannot encode empty text".into()));
    }
    let matrix = backend.encode_tokens(text)?;
    if matrix.rows() == 0 || matrix.cols() != backend.d_text() {
        return Err(Error::Shape(format!(
            "backend `{}` returned {}×{}, declared d_text {}",
            backend.name(),
            matrix.rows(),
            matrix.cols(),
            backend.d_text()
        )));
    }
    Ok(TokenEmbeddings { matrix })
}

pub fn embed_summary(backend: &dyn EncoderBackend, text: &str) -> Result<SummaryEmbedding> {
    if !backend.capabilities().embed {
        return Err(Error::Precondition(format!("backend `{}` cannot embed", backend.name())));
    }
    if text.trim().is_empty() {
        return Err(Error::Precondition("cannot embed empty text".into()));
    }
    let v = backend.embed(text)?;
    if v.len() != backend.d_emb() {
        return Err(Error::Shape(format!(
            "backend `{}` returned {} dims, declared d_emb {}",
            backend.name(),
            v.len(),
            backend.d_emb()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Value(format!("backend `{}` returned a non-finite embedding", backend.name())));
    }
    Ok(SummaryEmbedding::from_f64(&v))
}

/// Unit vector seeded by the SHA-256 of `text`.
pub fn hash_fallback(text: &str, d: usize) -> Vec<f64> {
    assert!(d >= 1, "dimension must be positive");
    let digest = Sha256::digest(text.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = dot(&v, &v).sqrt();
    if n == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Offline backend: whitespace tokens map to hash vectors; whole-text
/// embeddings are the normalized bag of token vectors, so texts sharing
/// words land near each other.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    pub d_text: usize,
    pub d_emb: usize,
    pub max_tokens: usize,
}

impl Default for HashEncoder {
    fn default() -> Self {
        Self {
            d_text: 32,
            d_emb: 768,
            max_tokens: 128,
        }
    }
}

impl HashEncoder {
    pub fn new(d_text: usize, d_emb: usize) -> Self {
        Self {
            d_text,
            d_emb,
            ..Self::default()
        }
    }
}

fn embed_token(tok: &str) -> &str {
    tok.trim_matches(|c: char| matches!(c, ',' | '.' | ':' | ';' | '"' | '{' | '}' | '[' | ']' | '(' | ')'))
}

impl EncoderBackend for HashEncoder {
    fn name(&self) -> &str {
        "hash"
    }

    fn d_text(&self) -> usize {
        self.d_text
    }

    fn d_emb(&self) -> usize {
        self.d_emb
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { token_encode: true, embed: true }
    }

    fn encode_tokens(&self, text: &str) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = tokens(text)
            .take(self.max_tokens)
            .map(|t| hash_fallback(t, self.d_text))
            .collect();
        Ok(Matrix::from_rows(&rows))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.d_emb];
        for t in tokens(text).map(embed_token).filter(|t| !t.is_empty()) {
            for (a, v) in acc.iter_mut().zip(hash_fallback(&t.to_lowercase(), self.d_emb)) {
                *a += v;
            }
        }
        if dot(&acc, &acc) == 0.0 {
            return Ok(hash_fallback(text, self.d_emb));
        }
        Ok(acc)
    }
}

/// Remote backend speaking `{model, input} → {vectors}` over HTTP.
#[derive(Debug, Clone)]
pub struct HttpEncoder {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub d_text: usize,
    pub d_emb: usize,
    pub retries: usize,
    pub timeout: Duration,
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    model: &'a str,
    input: &'a str,
    mode: &'a str,
}

#[derive(Deserialize)]
struct EncodeResponse {
    vectors: Vec<Vec<f64>>,
}

impl HttpEncoder {
    /// Reads `DUALCAST_ENCODER_ENDPOINT`, `DUALCAST_ENCODER_KEY` and
    /// `DUALCAST_ENCODER_MODEL`.
    pub fn from_env(d_text: usize, d_emb: usize) -> Result<Self> {
        let endpoint = std::env::var("DUALCAST_ENCODER_ENDPOINT")
            .map_err(|_| Error::Config("DUALCAST_ENCODER_ENDPOINT is not set".into()))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var("DUALCAST_ENCODER_KEY").ok(),
            model: std::env::var("DUALCAST_ENCODER_MODEL").unwrap_or_else(|_| "default".into()),
            d_text,
            d_emb,
            retries: 2,
            timeout: Duration::from_secs(60),
        })
    }

    fn call(&self, text: &str, mode: &str) -> Result<Vec<Vec<f64>>> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 << attempt));
            }
            let mut req = agent.post(&self.endpoint);
            if let Some(k) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {k}"));
            }
            match req.send_json(EncodeRequest { model: &self.model, input: text, mode }) {
                Ok(resp) => match resp.into_json::<EncodeResponse>() {
                    Ok(r) => return Ok(r.vectors),
                    Err(e) => last = e.to_string(),
                },
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Transport {
            backend: format!("http-encoder:{}", self.model),
            attempts: self.retries + 1,
            message: last,
        })
    }
}

impl EncoderBackend for HttpEncoder {
    fn name(&self) -> &str {
        &self.model
    }

    fn d_text(&self) -> usize {
        self.d_text
    }

    fn d_emb(&self) -> usize {
        self.d_emb
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { token_encode: true, embed: true }
    }

    fn encode_tokens(&self, text: &str) -> Result<Matrix> {
        let v = self.call(text, "tokens")?;
        if v.iter().any(|r| r.len() != self.d_text) {
            return Err(Error::Shape("token vectors do not match d_text".into()));
        }
        Ok(Matrix::from_rows(&v))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = self.call(text, "embed")?;
        if v.len() != 1 {
            return Err(Error::Shape(format!("expected one embedding vector, got {}", v.len())));
        }
        Ok(v.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hash_fallback_unit_norm_and_distinct() {
        let a = hash_fallback("a", 16);
        let b = hash_fallback("b", 16);
        assert!((dot(&a, &a).sqrt() - 1.0).abs() < 1e-9);
        assert!(dot(&a, &b) < 0.99);
        let one = hash_fallback("anything", 1);
        assert!(one[0] == 1.0 || one[0] == -1.0);
        assert_eq!(hash_fallback("a", 16), a);
    }

    #[test]
    fn encode_text_shapes_and_errors() {
        let enc = HashEncoder::new(8, 768);
        let t = encode_text(&enc, "abc").unwrap();
        assert_eq!(t.matrix.shape(), (1, 8));
        assert_eq!(encode_text(&enc, "abc").unwrap(), t);
        assert!(matches!(encode_text(&enc, "  "), Err(Error::Precondition(_))));
        let e = embed_summary(&enc, "x y").unwrap();
        assert_eq!(e.dim(), 768);
        assert!((e.cosine(&e) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn distinct_texts_distinct_matrices() {
        let enc = HashEncoder::new(8, 16);
        let mats: Vec<Matrix> = (0..100)
            .map(|i| encode_text(&enc, &format!("text number {i}")).unwrap().matrix)
            .collect();
        for i in 0..mats.len() {
            for j in i + 1..mats.len() {
                assert_ne!(mats[i], mats[j]);
            }
        }
    }

    #[test]
    fn shared_words_raise_similarity() {
        let enc = HashEncoder::new(8, 256);
        let a = embed_summary(&enc, "level shift of +1.0000 expected").unwrap();
        let b = embed_summary(&enc, "level shift of +1.0000 announced").unwrap();
        let c = embed_summary(&enc, "quiet market with stable prices").unwrap();
        assert!(a.cosine(&b) > a.cosine(&c));
    }

    proptest! {
        #[test]
        fn declared_shapes_hold(text in "[a-z]{1,6}( [a-z0-9.]{1,6}){0,12}") {
            let enc = HashEncoder::new(6, 24);
            let t = encode_text(&enc, &text).unwrap();
            prop_assert_eq!(t.matrix.cols(), 6);
            prop_assert_eq!(t.token_count(), text.split_whitespace().count());
            let e = embed_summary(&enc, &text).unwrap();
            prop_assert_eq!(e.dim(), 24);
            let recomputed = e.values().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((recomputed - e.norm()).abs() < 1e-9);
            prop_assert!((e.cosine(&embed_summary(&enc, &text).unwrap()) - 1.0).abs() < 1e-6);
        }
    }
}
