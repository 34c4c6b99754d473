use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::credentials::CredentialsRef;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding request failed: {0}")]
    Request(String),
    #[error("embedding service returned status {0}")]
    Status(u16),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("expected {expected}-dimensional embedding, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("credentials: {0}")]
    Credentials(#[from] crate::credentials::CredentialsError),
}

/// Text encoder used for knowledge retrieval.
pub trait Embedder: Send + Sync {
    /// Stable identifier; part of the embedding cache key.
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Offline, deterministic encoder: signed feature hashing of lowercase word
/// unigrams and boundary-padded character trigrams.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    name: String,
}

pub const DEFAULT_HASHING_DIMENSION: usize = 256;

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self {
            dimension,
            name: format!("hashing-ngram-v1-d{dimension}"),
        }
    }

    fn add_feature(&self, v: &mut [f64], feature: &str, weight: f64) {
        let h = fnv1a(feature.as_bytes());
        let idx = (h % self.dimension as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign * weight;
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASHING_DIMENSION)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    /// Returns a unit vector, or the zero vector for text without any
    /// alphanumeric content.
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut v = vec![0.0; self.dimension];
        let lower = text.to_lowercase();
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            self.add_feature(&mut v, &format!("w:{word}"), 1.0);
            let padded: Vec<char> = format!("#{word}#").chars().collect();
            for tri in padded.windows(3) {
                let tri: String = tri.iter().collect();
                self.add_feature(&mut v, &format!("c:{tri}"), 0.5);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Client for an embeddings endpoint with the common
/// `{"model", "input": [...]}` → `{"data": [{"embedding": [...]}]}` shape.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    dimension: usize,
    credentials: CredentialsRef,
    client: reqwest::blocking::Client,
    name: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, dimension: usize, credentials: CredentialsRef) -> Self {
        let model = model.into();
        Self {
            endpoint: endpoint.into(),
            name: format!("http:{model}"),
            model,
            dimension,
            credentials,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .expect("static client config"),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut req = self.client.post(&self.endpoint).json(&EmbedRequest {
            model: &self.model,
            input: texts,
        });
        if let Some(key) = self.credentials.resolve()? {
            req = req.bearer_auth(key.expose());
        }
        let resp = req.send().map_err(|e| EmbedError::Request(e.without_url().to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbedError::Status(resp.status().as_u16()));
        }
        let body: EmbedResponse = resp.json().map_err(|e| EmbedError::Malformed(e.to_string()))?;
        if body.data.len() != texts.len() {
            return Err(EmbedError::Malformed(format!(
                "{} embeddings for {} inputs",
                body.data.len(),
                texts.len()
            )));
        }
        body.data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.dimension {
                    Err(EmbedError::Dimension {
                        expected: self.dimension,
                        got: d.embedding.len(),
                    })
                } else {
                    Ok(d.embedding)
                }
            })
            .collect()
    }
}
