use std::sync::Mutex;
use std::time::{Duration, Instant};

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{CompletionBackend, FinishReason, GenerationError, GenerationRequest, GenerationResult, Usage};
use crate::credentials::CredentialsRef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub request_timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
            request_timeout_ms: 25_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

/// Client for a single-string completion endpoint (`choices[0].text`).
pub struct HttpCompletionBackend {
    endpoint: String,
    credentials: CredentialsRef,
    retry: RetryPolicy,
    client: Client,
    /// Set when the service asks us to back off; later calls wait it out.
    blocked_until: Mutex<Option<Instant>>,
}

#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    frequency_penalty: f64,
    max_tokens: u32,
    stop: &'a [String],
    #[serde(skip_serializing_if = "is_default_top_p")]
    top_p: f64,
    #[serde(skip_serializing_if = "is_zero")]
    presence_penalty: f64,
}

fn is_default_top_p(v: &f64) -> bool {
    *v == 1.0
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ErrorEnvelope {
    error: ErrorBody,
}

#[derive(Deserialize)]
struct ErrorBody {
    #[serde(default)]
    code: Option<String>,
    #[serde(default)]
    message: Option<String>,
}

enum Attempt {
    Done(Result<GenerationResult, GenerationError>),
    Retry(GenerationError, Option<Duration>),
}

impl HttpCompletionBackend {
    pub fn new(endpoint: impl Into<String>, credentials: CredentialsRef, retry: RetryPolicy) -> Self {
        let client = Client::builder()
            .timeout(Duration::from_millis(retry.request_timeout_ms))
            .build()
            .expect("static client config");
        Self {
            endpoint: endpoint.into(),
            credentials,
            retry,
            client,
            blocked_until: Mutex::new(None),
        }
    }

    fn wait_for_gate(&self) {
        let until = *self.blocked_until.lock().expect("gate lock");
        if let Some(until) = until {
            let now = Instant::now();
            if until > now {
                std::thread::sleep(until - now);
            }
        }
    }

    fn close_gate(&self, for_how_long: Duration) {
        let mut gate = self.blocked_until.lock().expect("gate lock");
        let until = Instant::now() + for_how_long;
        if gate.is_none_or(|g| g < until) {
            *gate = Some(until);
        }
    }

    fn attempt(&self, request: &GenerationRequest, body: &CompletionBody<'_>) -> Attempt {
        let key = match self.credentials.resolve() {
            Ok(key) => key,
            Err(e) => return Attempt::Done(Err(GenerationError::AuthError(e.to_string()))),
        };
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = key {
            req = req.bearer_auth(key.expose());
        }
        let started = Instant::now();
        let resp = match req.send() {
            Ok(resp) => resp,
            Err(e) => {
                return Attempt::Retry(GenerationError::BackendUnavailable(e.without_url().to_string()), None);
            }
        };
        let status = resp.status();
        if status.is_success() {
            return Attempt::Done(self.parse_success(resp, request, started));
        }
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .map(Duration::from_secs_f64);
        let error = resp.json::<ErrorEnvelope>().ok().map(|e| e.error);
        match status {
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => Attempt::Done(Err(GenerationError::AuthError(format!(
                "service answered {}",
                status.as_u16()
            )))),
            StatusCode::TOO_MANY_REQUESTS => {
                if let Some(wait) = retry_after {
                    self.close_gate(wait);
                }
                Attempt::Retry(GenerationError::RateLimited { retry_after }, retry_after)
            }
            s if s.is_server_error() => {
                Attempt::Retry(GenerationError::BackendUnavailable(format!("service answered {}", s.as_u16())), None)
            }
            s => {
                if error.as_ref().and_then(|e| e.code.as_deref()) == Some("content_filter") {
                    return Attempt::Done(Err(GenerationError::ContentFiltered));
                }
                let message = error.and_then(|e| e.message).unwrap_or_default();
                Attempt::Done(Err(GenerationError::InvalidRequest(format!("service answered {}: {message}", s.as_u16()))))
            }
        }
    }

    fn parse_success(
        &self,
        resp: Response,
        request: &GenerationRequest,
        started: Instant,
    ) -> Result<GenerationResult, GenerationError> {
        let body: CompletionResponse = resp
            .json()
            .map_err(|e| GenerationError::BackendUnavailable(format!("malformed completion response: {}", e.without_url())))?;
        let choice = body
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GenerationError::BackendUnavailable("completion response has no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("content_filter") => FinishReason::Filter,
            _ => FinishReason::Stop,
        };
        let raw_text = match finish_reason {
            FinishReason::Filter => None,
            _ => Some(choice.text.unwrap_or_default()),
        };
        Ok(GenerationResult {
            raw_text,
            finish_reason,
            latency_ms: started.elapsed().as_millis() as u64,
            backend: format!("http:{}", request.model),
            usage: body.usage,
        })
    }
}

impl CompletionBackend for HttpCompletionBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, GenerationError> {
        let body = CompletionBody {
            model: &request.model,
            prompt: &request.prompt,
            temperature: request.temperature,
            frequency_penalty: request.frequency_penalty,
            max_tokens: request.max_tokens,
            stop: &request.stop,
            top_p: request.top_p,
            presence_penalty: request.presence_penalty,
        };
        let mut attempt = 0;
        loop {
            self.wait_for_gate();
            match self.attempt(request, &body) {
                Attempt::Done(result) => return result,
                Attempt::Retry(error, hinted) => {
                    if attempt >= self.retry.max_retries {
                        return Err(error);
                    }
                    let wait = hinted.unwrap_or_else(|| self.retry.delay(attempt));
                    tracing::warn!(attempt, wait_ms = wait.as_millis() as u64, %error, "retrying completion");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
            }
        }
    }
}
