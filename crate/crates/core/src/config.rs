//! Service configuration: a JSON file, validated in full at startup.
//! Every error names the key that caused it.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::credentials::CredentialsRef;
use crate::engine::{DialogueEngine, EngineSettings, JsonlEventStore};
use crate::generation::{BackendKind, DecodingParams};
use crate::interactive::ValidationQuestion;
use crate::lexicon::Lexicon;
use crate::policy::{default_p4g_ordering, IntentOrdering, PolicyKind, RuleSet};
use crate::retrieval::{
    Embedder, HashingEmbedder, HttpEmbedder, KnowledgeBase, DEFAULT_HASHING_DIMENSION, DEFAULT_OFFLINE_THRESHOLD,
    DEFAULT_SERVICE_THRESHOLD,
};

/// Environment variable holding the config path when `--config` is absent.
pub const CONFIG_ENV: &str = "MIXINIT_CONFIG";

pub const DEFAULT_DISCLOSURE: &str = "You are chatting with an automated chatbot, not a person. \
Its replies are generated by a language model and may be inaccurate. Your messages and ratings are logged for research.";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not a JSON object: {0}")]
    NotAnObject(String),
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    fn invalid(key: &str, message: impl ToString) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            message: message.to_string(),
        }
    }

    /// The offending key, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Hashing {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Http {
        endpoint: String,
        model: String,
        dimension: usize,
        #[serde(default)]
        credentials: CredentialsRef,
    },
}

fn default_dimension() -> usize {
    DEFAULT_HASHING_DIMENSION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    /// Strict ordering; retrieved knowledge rides along with the planned
    /// intent.
    Fixed,
    /// Ordering with one-turn preemption for factual questions.
    RuleBased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub backend: BackendKind,
    pub kb_path: Option<PathBuf>,
    pub embedder: EmbedderConfig,
    pub retrieval_threshold: f64,
    pub policy: PolicyChoice,
    pub p4g_ordering: IntentOrdering,
    pub lexicon_path: Option<PathBuf>,
    pub decoding: DecodingParams,
    pub session_idle_timeout_secs: u64,
    pub message_timeout_secs: u64,
    pub sessions_dir: PathBuf,
    pub ratings_path: PathBuf,
    pub request_log: Option<PathBuf>,
    pub privacy_mode: bool,
    pub rating_unlock_user_turns: usize,
    pub disclosure_text: String,
    pub validation: ValidationQuestion,
}

const KEYS: &[&str] = &[
    "listen",
    "backend",
    "kb_path",
    "embedder",
    "retrieval_threshold",
    "policy",
    "p4g_ordering",
    "lexicon_path",
    "decoding",
    "session_idle_timeout_secs",
    "message_timeout_secs",
    "sessions_dir",
    "ratings_path",
    "request_log",
    "privacy_mode",
    "rating_unlock_user_turns",
    "disclosure_text",
    "validation",
];

fn take<T: DeserializeOwned>(map: &mut Map<String, Value>, key: &str) -> Result<Option<T>, ConfigError> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v).map(Some).map_err(|e| ConfigError::invalid(key, e)),
    }
}

impl ServiceConfig {
    /// Reads the file at `path`; relative paths inside it resolve against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&raw)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Parses and validates without touching the filesystem.
    pub fn from_json(raw: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(raw).map_err(|e| ConfigError::NotAnObject(e.to_string()))?;
        let Value::Object(mut map) = value else {
            return Err(ConfigError::NotAnObject("top level must be an object".into()));
        };
        if let Some(unknown) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(ConfigError::invalid(unknown, "unknown key"));
        }

        let listen: String = take(&mut map, "listen")?.unwrap_or_else(|| "127.0.0.1:8080".to_string());
        let listen = listen.parse().map_err(|e| ConfigError::invalid("listen", e))?;
        let backend: BackendKind =
            take(&mut map, "backend")?.ok_or_else(|| ConfigError::invalid("backend", "required"))?;
        let embedder: EmbedderConfig = take(&mut map, "embedder")?.unwrap_or(EmbedderConfig::Hashing {
            dimension: DEFAULT_HASHING_DIMENSION,
        });
        let default_threshold = match embedder {
            EmbedderConfig::Hashing { .. } => DEFAULT_OFFLINE_THRESHOLD,
            EmbedderConfig::Http { .. } => DEFAULT_SERVICE_THRESHOLD,
        };
        let ordering_names: Option<Vec<String>> = take(&mut map, "p4g_ordering")?;
        let p4g_ordering = match ordering_names {
            Some(names) => IntentOrdering::from_names("p4g_ordering", &names).map_err(|e| ConfigError::invalid("p4g_ordering", e))?,
            None => default_p4g_ordering(),
        };

        let cfg = ServiceConfig {
            listen,
            backend,
            kb_path: take(&mut map, "kb_path")?,
            embedder,
            retrieval_threshold: take(&mut map, "retrieval_threshold")?.unwrap_or(default_threshold),
            policy: take(&mut map, "policy")?.unwrap_or(PolicyChoice::Fixed),
            p4g_ordering,
            lexicon_path: take(&mut map, "lexicon_path")?,
            decoding: take(&mut map, "decoding")?.unwrap_or_default(),
            session_idle_timeout_secs: take(&mut map, "session_idle_timeout_secs")?.unwrap_or(600),
            message_timeout_secs: take(&mut map, "message_timeout_secs")?.unwrap_or(30),
            sessions_dir: take(&mut map, "sessions_dir")?.unwrap_or_else(|| PathBuf::from("sessions")),
            ratings_path: take(&mut map, "ratings_path")?.unwrap_or_else(|| PathBuf::from("ratings.jsonl")),
            request_log: take(&mut map, "request_log")?,
            privacy_mode: take(&mut map, "privacy_mode")?.unwrap_or(true),
            rating_unlock_user_turns: take(&mut map, "rating_unlock_user_turns")?.unwrap_or(8),
            disclosure_text: take(&mut map, "disclosure_text")?.unwrap_or_else(|| DEFAULT_DISCLOSURE.to_string()),
            validation: take(&mut map, "validation")?.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=2.0).contains(&self.retrieval_threshold) {
            return Err(ConfigError::invalid("retrieval_threshold", "must lie in [0, 2]"));
        }
        let d = &self.decoding;
        if !(d.temperature.is_finite() && d.temperature >= 0.0) {
            return Err(ConfigError::invalid("decoding.temperature", "must be a non-negative number"));
        }
        if d.max_tokens == 0 {
            return Err(ConfigError::invalid("decoding.max_tokens", "must be positive"));
        }
        if !(d.top_p > 0.0 && d.top_p <= 1.0) {
            return Err(ConfigError::invalid("decoding.top_p", "must lie in (0, 1]"));
        }
        if d.model.trim().is_empty() {
            return Err(ConfigError::invalid("decoding.model", "must be non-empty"));
        }
        if let BackendKind::HttpCompletion { endpoint, .. } = &self.backend {
            if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
                return Err(ConfigError::invalid("backend.endpoint", "must be an http(s) URL"));
            }
        }
        match &self.embedder {
            EmbedderConfig::Hashing { dimension: 0 } => {
                return Err(ConfigError::invalid("embedder.dimension", "must be positive"));
            }
            EmbedderConfig::Http { endpoint, dimension, .. } => {
                if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
                    return Err(ConfigError::invalid("embedder.endpoint", "must be an http(s) URL"));
                }
                if *dimension == 0 {
                    return Err(ConfigError::invalid("embedder.dimension", "must be positive"));
                }
            }
            _ => {}
        }
        if self.session_idle_timeout_secs == 0 {
            return Err(ConfigError::invalid("session_idle_timeout_secs", "must be positive"));
        }
        if self.message_timeout_secs == 0 {
            return Err(ConfigError::invalid("message_timeout_secs", "must be positive"));
        }
        if self.rating_unlock_user_turns == 0 {
            return Err(ConfigError::invalid("rating_unlock_user_turns", "must be at least 1"));
        }
        if self.disclosure_text.trim().is_empty() {
            return Err(ConfigError::invalid("disclosure_text", "must be non-empty"));
        }
        if self.validation.accepted_answers.iter().all(|a| a.trim().is_empty()) {
            return Err(ConfigError::invalid("validation.accepted_answers", "needs at least one answer"));
        }
        Ok(())
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.kb_path, &mut self.lexicon_path, &mut self.request_log].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.sessions_dir);
        fix(&mut self.ratings_path);
    }

    /// Checks inputs that must exist and credentials that must resolve.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        for (key, path) in [("kb_path", &self.kb_path), ("lexicon_path", &self.lexicon_path)] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(ConfigError::invalid(key, format!("{} does not exist", p.display())));
                }
            }
        }
        if let BackendKind::HttpCompletion { credentials, .. } = &self.backend {
            credentials.resolve().map_err(|e| ConfigError::invalid("backend.credentials", e))?;
        }
        if let EmbedderConfig::Http { credentials, .. } = &self.embedder {
            credentials.resolve().map_err(|e| ConfigError::invalid("embedder.credentials", e))?;
        }
        Ok(())
    }

    pub fn session_policy(&self) -> PolicyKind {
        match self.policy {
            PolicyChoice::Fixed => PolicyKind::FixedOrdering(self.p4g_ordering.clone()),
            PolicyChoice::RuleBased => PolicyKind::RuleBased(RuleSet::rap_like(self.p4g_ordering.clone())),
        }
    }

    pub fn engine_settings(&self) -> EngineSettings {
        EngineSettings {
            decoding: self.decoding.clone(),
            retrieval_threshold: self.retrieval_threshold,
            idle_timeout_secs: self.session_idle_timeout_secs,
            ..EngineSettings::default()
        }
    }

    pub fn build_embedder(&self) -> Arc<dyn Embedder> {
        match &self.embedder {
            EmbedderConfig::Hashing { dimension } => Arc::new(HashingEmbedder::new(*dimension)),
            EmbedderConfig::Http {
                endpoint,
                model,
                dimension,
                credentials,
            } => Arc::new(HttpEmbedder::new(endpoint.clone(), model.clone(), *dimension, credentials.clone())),
        }
    }

    /// Wires up the engine: backend, knowledge base, lexicon and the JSONL
    /// session store.
    pub fn build_engine(&self) -> Result<DialogueEngine, ConfigError> {
        let lexicon = match &self.lexicon_path {
            Some(p) => Lexicon::load(p).map_err(|e| ConfigError::invalid("lexicon_path", e))?,
            None => Lexicon::default(),
        };
        let embedder = self.build_embedder();
        let kb = match &self.kb_path {
            Some(p) => KnowledgeBase::load(p, embedder.as_ref()),
            None => KnowledgeBase::bundled(embedder.as_ref()),
        }
        .map_err(|e| ConfigError::invalid("kb_path", e))?;
        let store = JsonlEventStore::new(&self.sessions_dir).map_err(|e| ConfigError::invalid("sessions_dir", e))?;
        Ok(
            DialogueEngine::new(self.backend.build(), lexicon, self.engine_settings(), Arc::new(store))
                .with_retrieval(Arc::new(kb), embedder),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"backend": {"kind": "mock", "fallback": "Hello."}}"#;

    #[test]
    fn defaults() {
        let c = ServiceConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.retrieval_threshold, DEFAULT_OFFLINE_THRESHOLD);
        assert_eq!(c.session_idle_timeout_secs, 600);
        assert_eq!(c.rating_unlock_user_turns, 8);
        assert_eq!(c.p4g_ordering, default_p4g_ordering());
        assert!(c.privacy_mode);
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            (r#"{}"#, "backend"),
            (r#"{"backend": {"kind": "mock"}, "listen": "nowhere"}"#, "listen"),
            (r#"{"backend": {"kind": "mock"}, "retrieval_threshold": 3.0}"#, "retrieval_threshold"),
            (r#"{"backend": {"kind": "mock"}, "p4g_ordering": ["Greeting", "Bribery"]}"#, "p4g_ordering"),
            (r#"{"backend": {"kind": "mock"}, "colour": "blue"}"#, "colour"),
            (r#"{"backend": {"kind": "mock"}, "decoding": {"max_tokens": 0}}"#, "decoding.max_tokens"),
            (r#"{"backend": {"kind": "telepathy"}}"#, "backend"),
            (r#"{"backend": {"kind": "http_completion", "endpoint": "ftp://x"}}"#, "backend.endpoint"),
            (r#"{"backend": {"kind": "mock"}, "policy": "random"}"#, "policy"),
        ];
        for (raw, key) in cases {
            let err = ServiceConfig::from_json(raw).unwrap_err();
            assert_eq!(err.key(), Some(key), "{raw}: {err}");
        }
    }

    #[test]
    fn missing_credentials_fail_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"backend": {"kind": "http_completion", "endpoint": "http://localhost:1",
                "credentials": {"from": "env", "var": "MIXINIT_TEST_SURELY_UNSET_KEY"}}}"#,
        )
        .unwrap();
        let err = ServiceConfig::load(&path).unwrap_err();
        assert_eq!(err.key(), Some("backend.credentials"));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, MINIMAL).unwrap();
        let c = ServiceConfig::load(&path).unwrap();
        assert_eq!(c.sessions_dir, dir.path().join("sessions"));
    }
}
