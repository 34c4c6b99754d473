//! Text-generation gateway: request/response types, the backend trait,
//! stop-sequence handling and response cleanup.

mod http;
mod mock;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::credentials::CredentialsRef;
use crate::intent::TaskKind;

pub use http::{HttpCompletionBackend, RetryPolicy};
pub use mock::{MockBackend, MockScript};

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("authentication with the completion service failed: {0}")]
    AuthError(String),
    #[error("rate limited by the completion service")]
    RateLimited { retry_after: Option<Duration> },
    #[error("completion backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("completion was blocked by the content filter")]
    ContentFiltered,
    #[error("generation was empty after cleanup")]
    EmptyGeneration,
}

impl GenerationError {
    /// Whether the caller can reasonably try the same request again.
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            GenerationError::RateLimited { .. } | GenerationError::BackendUnavailable(_) | GenerationError::EmptyGeneration
        )
    }
}

/// Decoding parameters shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub model: String,
    pub temperature: f64,
    pub frequency_penalty: f64,
    pub max_tokens: u32,
    /// Not reported for the reference setup; sent only when changed.
    pub top_p: f64,
    /// Not reported for the reference setup; sent only when changed.
    pub presence_penalty: f64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            model: "text-davinci-003".to_string(),
            temperature: 0.70,
            frequency_penalty: 0.75,
            max_tokens: 128,
            top_p: 1.0,
            presence_penalty: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub model: String,
    pub temperature: f64,
    pub frequency_penalty: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    pub top_p: f64,
    pub presence_penalty: f64,
}

/// Stops at the start of the next speaker line for the task.
pub fn default_stop_sequences(task: TaskKind) -> Vec<String> {
    vec![format!("\n{}:", task.user_label()), format!("\n{}:", task.system_label())]
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, task: TaskKind, params: &DecodingParams) -> Self {
        Self {
            prompt: prompt.into(),
            model: params.model.clone(),
            temperature: params.temperature,
            frequency_penalty: params.frequency_penalty,
            max_tokens: params.max_tokens,
            stop: default_stop_sequences(task),
            top_p: params.top_p,
            presence_penalty: params.presence_penalty,
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |m: &str| Err(GenerationError::InvalidRequest(m.to_string()));
        if self.prompt.is_empty() {
            return bad("prompt is empty");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be a non-negative number");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.stop.is_empty() || self.stop.iter().any(String::is_empty) {
            return bad("stop sequences must be non-empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Filter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Absent exactly when the output was filtered.
    pub raw_text: Option<String>,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    pub backend: String,
    pub usage: Option<Usage>,
}

/// A completion service. Implementations are shareable across sessions.
pub trait CompletionBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, GenerationError>;
}

/// Backend selection as written in config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    HttpCompletion {
        endpoint: String,
        #[serde(default)]
        credentials: CredentialsRef,
        #[serde(default)]
        retry: RetryPolicy,
    },
    Mock(MockScript),
}

impl BackendKind {
    pub fn build(&self) -> Arc<dyn CompletionBackend> {
        match self {
            BackendKind::HttpCompletion {
                endpoint,
                credentials,
                retry,
            } => Arc::new(HttpCompletionBackend::new(endpoint.clone(), credentials.clone(), retry.clone())),
            BackendKind::Mock(script) => Arc::new(MockBackend::new(script.clone())),
        }
    }
}

/// Sends a request and cuts the continuation at the first stop sequence.
/// Latency is whatever the backend measured, so mock runs stay reproducible.
pub fn generate(request: &GenerationRequest, backend: &dyn CompletionBackend) -> Result<GenerationResult, GenerationError> {
    request.validate()?;
    let mut result = backend.complete(request)?;
    if let Some(text) = result.raw_text.as_mut() {
        if let Some(cut) = request.stop.iter().filter_map(|s| text.find(s.as_str())).min() {
            text.truncate(cut);
            result.finish_reason = FinishReason::Stop;
        }
    }
    if result.finish_reason == FinishReason::Filter {
        result.raw_text = None;
    }
    if let Some(usage) = result.usage {
        tracing::info!(
            backend = %result.backend,
            prompt_tokens = usage.prompt_tokens,
            completion_tokens = usage.completion_tokens,
            latency_ms = result.latency_ms,
            "completion"
        );
    }
    Ok(result)
}

fn starts_with_label(line: &str, labels: &[&str]) -> bool {
    let line = line.trim_start();
    labels
        .iter()
        .any(|l| line.strip_prefix(l).is_some_and(|rest| rest.starts_with(':')))
}

/// Cleans a raw continuation into one system utterance: trims, drops an
/// echoed system label, cuts at the first line that opens with a speaker
/// label, and collapses runs of blank lines.
pub fn postprocess(raw_text: &str, task: TaskKind) -> Result<String, GenerationError> {
    let labels = [task.system_label(), task.user_label()];
    let own = format!("{}:", task.system_label());
    let mut text = raw_text.trim();
    while let Some(rest) = text.strip_prefix(own.as_str()) {
        text = rest.trim();
    }
    let mut lines: Vec<&str> = Vec::new();
    let mut previous_blank = false;
    for line in text.lines() {
        if starts_with_label(line, &labels) {
            break;
        }
        let blank = line.trim().is_empty();
        if blank && previous_blank {
            continue;
        }
        lines.push(if blank { "" } else { line });
        previous_blank = blank;
    }
    let out = lines.join("\n").trim().to_string();
    if out.is_empty() {
        return Err(GenerationError::EmptyGeneration);
    }
    Ok(out)
}
