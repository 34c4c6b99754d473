//! Knowledge retrieval for factual user questions: nearest neighbor by
//! cosine distance between the user's question and stored questions, with
//! the stored answer returned for the prompt's cue line.

mod embedder;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::intent::{SpeakerSide, TaskKind};

pub use embedder::{EmbedError, Embedder, HashingEmbedder, HttpEmbedder, DEFAULT_HASHING_DIMENSION};

const DEFAULT_KB: &str = include_str!("../../assets/knowledge_base.json");

/// Trigger threshold for [`HashingEmbedder`] vectors.
pub const DEFAULT_OFFLINE_THRESHOLD: f64 = 0.4;
/// Trigger threshold for service (sentence-encoder) embeddings.
pub const DEFAULT_SERVICE_THRESHOLD: f64 = 0.25;

const INTERROGATIVES: &[&str] = &[
    "what", "when", "where", "who", "whom", "whose", "which", "why", "how", "is", "are", "do", "does", "did", "can",
    "could", "will", "would", "should", "has", "have",
];

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,
    #[error("embedder failed: {0}")]
    EmbedderFailure(#[from] EmbedError),
    #[error("knowledge base entry {index}: {message}")]
    InvalidEntry { index: usize, message: String },
    #[error("knowledge base file: {0}")]
    Io(#[from] std::io::Error),
    #[error("knowledge base JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0))
}

/// Question/answer pair as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub question: String,
    pub answer: String,
    /// Unit-norm embedding of `question`.
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub index: usize,
    pub entry: KnowledgeEntry,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    embedder_name: String,
    dimension: usize,
    entries: Vec<KnowledgeEntry>,
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// Cache key for an embedding: SHA-256 over the embedder name and question.
pub fn embedding_cache_key(embedder_name: &str, question: &str) -> String {
    let mut h = Sha256::new();
    h.update(embedder_name.as_bytes());
    h.update([0u8]);
    h.update(question.as_bytes());
    hex::encode(h.finalize())
}

/// Sidecar cache path next to a KB file: `kb.json` → `kb.embeddings.json`.
pub fn sidecar_path(kb_path: &Path) -> PathBuf {
    kb_path.with_extension("embeddings.json")
}

impl KnowledgeBase {
    /// Builds from pairs with embeddings computed by `embedder`.
    pub fn build(pairs: Vec<QaPair>, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        Self::build_with_cache(pairs, embedder, &mut BTreeMap::new())
    }

    fn build_with_cache(
        pairs: Vec<QaPair>,
        embedder: &dyn Embedder,
        cache: &mut BTreeMap<String, Vec<f64>>,
    ) -> Result<Self, RetrievalError> {
        let dimension = embedder.dimension();
        let mut entries = Vec::with_capacity(pairs.len());
        let mut missing = Vec::new();
        for (index, pair) in pairs.iter().enumerate() {
            if pair.question.trim().is_empty() || pair.answer.trim().is_empty() {
                return Err(RetrievalError::InvalidEntry {
                    index,
                    message: "question and answer must be non-empty".into(),
                });
            }
            let key = embedding_cache_key(embedder.name(), &pair.question);
            if !cache.get(&key).is_some_and(|v| v.len() == dimension) {
                missing.push((index, key));
            }
        }
        if !missing.is_empty() {
            let texts: Vec<&str> = missing.iter().map(|(i, _)| pairs[*i].question.as_str()).collect();
            let vectors = embedder.embed_batch(&texts)?;
            for ((_, key), v) in missing.into_iter().zip(vectors) {
                cache.insert(key, v);
            }
        }
        for (index, pair) in pairs.into_iter().enumerate() {
            let raw = cache[&embedding_cache_key(embedder.name(), &pair.question)].clone();
            if raw.len() != dimension {
                return Err(RetrievalError::DimensionMismatch(dimension, raw.len()));
            }
            let embedding = normalize(raw).ok_or(RetrievalError::InvalidEntry {
                index,
                message: "question embeds to the zero vector".into(),
            })?;
            entries.push(KnowledgeEntry {
                question: pair.question,
                answer: pair.answer,
                embedding,
            });
        }
        Ok(Self {
            embedder_name: embedder.name().to_string(),
            dimension,
            entries,
        })
    }

    /// Loads a KB file, reusing and refreshing the embedding sidecar.
    pub fn load(path: impl AsRef<Path>, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let pairs: Vec<QaPair> = serde_json::from_str(&fs::read_to_string(path)?)?;
        let sidecar = sidecar_path(path);
        let mut cache: BTreeMap<String, Vec<f64>> = fs::read_to_string(&sidecar)
            .ok()
            .and_then(|raw| serde_json::from_str(&raw).ok())
            .unwrap_or_default();
        let before = cache.len();
        let kb = Self::build_with_cache(pairs, embedder, &mut cache)?;
        if cache.len() != before {
            if let Err(e) = fs::write(&sidecar, serde_json::to_string(&cache)?) {
                tracing::warn!(path = %sidecar.display(), error = %e, "could not write embedding cache");
            }
        }
        Ok(kb)
    }

    /// The bundled Save the Children QA set.
    pub fn bundled(embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        Self::build(bundled_pairs(), embedder)
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn embedder_name(&self) -> &str {
        &self.embedder_name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Constructs directly from entries (embeddings are normalized).
    pub fn from_entries(embedder_name: impl Into<String>, entries: Vec<KnowledgeEntry>) -> Result<Self, RetrievalError> {
        let dimension = entries.first().map(|e| e.embedding.len()).unwrap_or(0);
        let entries = entries
            .into_iter()
            .enumerate()
            .map(|(index, mut e)| {
                if e.embedding.len() != dimension {
                    return Err(RetrievalError::DimensionMismatch(dimension, e.embedding.len()));
                }
                e.embedding = normalize(e.embedding).ok_or(RetrievalError::InvalidEntry {
                    index,
                    message: "zero embedding".into(),
                })?;
                Ok(e)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            embedder_name: embedder_name.into(),
            dimension,
            entries,
        })
    }
}

pub fn bundled_pairs() -> Vec<QaPair> {
    serde_json::from_str(DEFAULT_KB).expect("bundled knowledge base is valid")
}

/// Nearest entry to an already-embedded query; ties go to the lowest index.
pub fn nearest(query: &[f64], entries: &[KnowledgeEntry]) -> Result<(usize, f64), RetrievalError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in entries.iter().enumerate() {
        let d = cosine_distance(query, &e.embedding)?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.ok_or(RetrievalError::EmptyKnowledgeBase)
}

pub fn retrieve(query: &str, kb: &KnowledgeBase, embedder: &dyn Embedder) -> Result<RetrievalResult, RetrievalError> {
    if kb.is_empty() {
        return Err(RetrievalError::EmptyKnowledgeBase);
    }
    if embedder.dimension() != kb.dimension() {
        return Err(RetrievalError::DimensionMismatch(embedder.dimension(), kb.dimension()));
    }
    let q = embedder.embed(query)?;
    let (index, distance) = nearest(&q, kb.entries())?;
    Ok(RetrievalResult {
        index,
        entry: kb.entries()[index].clone(),
        distance,
    })
}

/// Whether text reads as a question: contains `?` or opens with an
/// interrogative word.
pub fn looks_like_question(text: &str) -> bool {
    if text.contains('?') {
        return true;
    }
    text.split_whitespace()
        .next()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .is_some_and(|w| INTERROGATIVES.contains(&w.as_str()))
}

pub fn should_trigger_retrieval(user_text: &str, result: Option<&RetrievalResult>, threshold: f64) -> bool {
    looks_like_question(user_text) && result.is_some_and(|r| r.distance <= threshold)
}

/// Derives QA pairs from a P4G corpus: each persuadee question answered by
/// the immediately following persuader turn. First occurrence of a
/// question wins.
pub fn pairs_from_corpus(corpus: &Corpus) -> Vec<QaPair> {
    if corpus.task != TaskKind::P4g {
        return Vec::new();
    }
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for c in &corpus.conversations {
        for w in c.turns.windows(2) {
            let (q, a) = (&w[0], &w[1]);
            if q.side == SpeakerSide::User
                && a.side == SpeakerSide::System
                && looks_like_question(&q.text)
                && seen.insert(q.text.to_lowercase())
            {
                pairs.push(QaPair {
                    question: q.text.clone(),
                    answer: a.text.clone(),
                });
            }
        }
    }
    pairs
}
