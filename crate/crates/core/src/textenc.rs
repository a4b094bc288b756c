//! Text embedding providers.
//!
//! Every provider must be deterministic and return unit-norm vectors. The
//! hashing embedder runs fully offline; [`RemoteEmbedder`] forwards to an HTTP
//! endpoint speaking `{"text": …}` → `{"embedding": […]}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const DEFAULT_TOY_WIDTH: usize = 64;
pub const DEFAULT_REMOTE_WIDTH: usize = 512;

/// Unit-norm prompt embedding plus the name of the provider that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source: String,
}

impl TextEmbedding {
    pub fn width(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("embedding request failed: {0}")]
    Transport(String),
    #[error("embedding endpoint returned status {0}")]
    Status(u16),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
}

pub trait TextEmbedder: Send + Sync {
    fn width(&self) -> usize;
    fn source(&self) -> &str;
    fn embed(&self, text: &str) -> Result<TextEmbedding, ProviderError>;
}

/// Signed feature hashing over lowercased whitespace tokens.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    width: usize,
    seed: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
pub const DEFAULT_HASH_SEED: u64 = 0x5eed_0f_70_6b_656e;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    // Final avalanche so bucket and sign bits are both well mixed.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

impl HashEmbedder {
    pub fn new(width: usize) -> Self {
        Self::with_seed(width, DEFAULT_HASH_SEED)
    }

    pub fn with_seed(width: usize, seed: u64) -> Self {
        assert!(width > 0, "embedding width must be positive");
        Self { width, seed }
    }

    pub fn embed_vec(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        for token in text.to_lowercase().split_whitespace() {
            let h = fnv1a(self.seed, token.as_bytes());
            let bucket = (h % self.width as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Empty text or fully cancelling tokens.
            v[0] = 1.0;
            return v;
        }
        v.iter().map(|x| x / norm).collect()
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_TOY_WIDTH)
    }
}

impl TextEmbedder for HashEmbedder {
    fn width(&self) -> usize {
        self.width
    }

    fn source(&self) -> &str {
        "hash"
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding, ProviderError> {
        Ok(TextEmbedding { vector: self.embed_vec(text), source: self.source().to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub url: String,
    #[serde(default)]
    pub token: Option<String>,
    pub width: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    30
}

/// Client for an external text encoder.
pub struct RemoteEmbedder {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn width(&self) -> usize {
        self.config.width
    }

    fn source(&self) -> &str {
        "remote"
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding, ProviderError> {
        let mut req = self.client.post(&self.config.url).json(&EmbedRequest { text });
        if let Some(token) = &self.config.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ProviderError::Status(resp.status().as_u16()));
        }
        let body: EmbedResponse = resp.json().map_err(|e| ProviderError::Malformed(e.to_string()))?;
        if body.embedding.len() != self.config.width {
            return Err(ProviderError::Malformed(format!(
                "expected width {}, got {}",
                self.config.width,
                body.embedding.len()
            )));
        }
        let norm = body.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(ProviderError::Malformed("embedding has zero or non-finite norm".into()));
        }
        Ok(TextEmbedding {
            vector: body.embedding.iter().map(|x| x / norm).collect(),
            source: self.source().to_string(),
        })
    }
}
