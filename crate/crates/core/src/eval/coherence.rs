use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// External dialogue-coherence model. Scores pass through unmodified.
pub trait CoherenceScorer: Send + Sync {
    fn score(&self, texts: &[&str]) -> Result<Vec<f64>, EvalError>;
}

/// Scorer behind an HTTP endpoint: `{"texts": [...]}` → `{"scores": [...]}`.
pub struct HttpCoherenceScorer {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpCoherenceScorer {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("static client config"),
        }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

impl CoherenceScorer for HttpCoherenceScorer {
    fn score(&self, texts: &[&str]) -> Result<Vec<f64>, EvalError> {
        let unavailable = |m: String| EvalError::ScorerUnavailable(m);
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&ScoreRequest { texts })
            .send()
            .map_err(|e| unavailable(e.without_url().to_string()))?;
        if !resp.status().is_success() {
            return Err(unavailable(format!("scorer answered {}", resp.status().as_u16())));
        }
        let body: ScoreResponse = resp.json().map_err(|e| unavailable(e.to_string()))?;
        if body.scores.len() != texts.len() {
            return Err(unavailable(format!("{} scores for {} texts", body.scores.len(), texts.len())));
        }
        Ok(body.scores)
    }
}
