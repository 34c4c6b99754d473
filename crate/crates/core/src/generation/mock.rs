use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionBackend, FinishReason, GenerationError, GenerationRequest, GenerationResult};

/// Canned continuations. Lookup order: SHA-256 of the prompt, then the
/// call ordinal, then `fallback`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub by_prompt_hash: BTreeMap<String, String>,
    pub by_ordinal: Vec<String>,
    pub fallback: Option<String>,
    /// Ordinals answered with a content-filter result.
    pub filtered_ordinals: Vec<usize>,
    /// Artificial latency per call.
    pub latency_ms: u64,
    /// Every call fails with `BackendUnavailable`.
    pub unavailable: bool,
}

impl MockScript {
    pub fn ordinal<I, S>(continuations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            by_ordinal: continuations.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn constant(text: impl Into<String>) -> Self {
        Self {
            fallback: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn prompt_hash(prompt: &str) -> String {
        hex::encode(Sha256::digest(prompt.as_bytes()))
    }
}

/// Deterministic backend driven by a [`MockScript`].
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Keeps at most `max_tokens` whitespace-delimited tokens (each with its
/// leading whitespace).
fn truncate_tokens(text: &str, max_tokens: usize) -> Option<String> {
    let mut count = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_token = false;
        } else if !in_token {
            in_token = true;
            count += 1;
            if count > max_tokens {
                return Some(text[..i].trim_end().to_string());
            }
        }
    }
    None
}

impl CompletionBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, GenerationError> {
        if self.script.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.script.latency_ms));
        }
        if self.script.unavailable {
            return Err(GenerationError::BackendUnavailable("mock backend is configured as unavailable".into()));
        }
        let ordinal = self.calls.fetch_add(1, Ordering::SeqCst);
        let result = |raw_text, finish_reason| GenerationResult {
            raw_text,
            finish_reason,
            latency_ms: self.script.latency_ms,
            backend: "mock".to_string(),
            usage: None,
        };
        if self.script.filtered_ordinals.contains(&ordinal) {
            return Ok(result(None, FinishReason::Filter));
        }
        let text = self
            .script
            .by_prompt_hash
            .get(&MockScript::prompt_hash(&request.prompt))
            .or_else(|| self.script.by_ordinal.get(ordinal))
            .or(self.script.fallback.as_ref())
            .ok_or_else(|| GenerationError::BackendUnavailable(format!("mock script has no entry for call {ordinal}")))?;
        Ok(match truncate_tokens(text, request.max_tokens as usize) {
            Some(cut) => result(Some(cut), FinishReason::Length),
            None => result(Some(text.clone()), FinishReason::Stop),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{generate, DecodingParams};
    use crate::intent::TaskKind;

    fn request() -> GenerationRequest {
        GenerationRequest::new("any prompt", TaskKind::P4g, &DecodingParams::default())
    }

    #[test]
    fn ordinal_script() {
        let backend = MockBackend::new(MockScript::ordinal([" Hi, how are you doing?"]));
        let r = generate(&request(), &backend).unwrap();
        assert_eq!(r.raw_text.as_deref(), Some(" Hi, how are you doing?"));
        assert_eq!(r.finish_reason, FinishReason::Stop);
        assert!(matches!(generate(&request(), &backend), Err(GenerationError::BackendUnavailable(_))));
    }

    #[test]
    fn max_tokens_truncates() {
        let backend = MockBackend::new(MockScript::ordinal([" Hi, how are you doing?"]));
        let mut req = request();
        req.max_tokens = 1;
        let r = generate(&req, &backend).unwrap();
        assert_eq!(r.finish_reason, FinishReason::Length);
        assert_eq!(r.raw_text.as_deref(), Some(" Hi,"));
    }

    #[test]
    fn prompt_hash_beats_ordinal() {
        let mut script = MockScript::ordinal(["by ordinal"]);
        script
            .by_prompt_hash
            .insert(MockScript::prompt_hash("any prompt"), "by hash".into());
        let backend = MockBackend::new(script);
        assert_eq!(generate(&request(), &backend).unwrap().raw_text.as_deref(), Some("by hash"));
    }

    #[test]
    fn filtered_and_unavailable() {
        let backend = MockBackend::new(MockScript {
            filtered_ordinals: vec![0],
            fallback: Some("x".into()),
            ..MockScript::default()
        });
        let r = generate(&request(), &backend).unwrap();
        assert_eq!(r.finish_reason, FinishReason::Filter);
        assert!(r.raw_text.is_none());
        let down = MockBackend::new(MockScript {
            unavailable: true,
            ..MockScript::default()
        });
        assert!(matches!(generate(&request(), &down), Err(GenerationError::BackendUnavailable(_))));
    }
}
