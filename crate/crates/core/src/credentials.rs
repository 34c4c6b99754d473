use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// Where an API key comes from. The key itself is never stored in config,
/// serialized, or logged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "from", rename_all = "snake_case")]
pub enum CredentialsRef {
    #[default]
    None,
    Env { var: String },
    File { path: PathBuf },
}

/// A resolved secret. `Debug` and `Display` redact it.
#[derive(Clone, PartialEq, Eq)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        Self(key.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CredentialsError {
    #[error("environment variable `{0}` is not set")]
    MissingEnv(String),
    #[error("credentials file {} is unreadable", .0.display())]
    Unreadable(PathBuf),
    #[error("credentials are empty")]
    Empty,
}

impl CredentialsRef {
    /// `Ok(None)` when no credentials are configured.
    pub fn resolve(&self) -> Result<Option<ApiKey>, CredentialsError> {
        let raw = match self {
            CredentialsRef::None => return Ok(None),
            CredentialsRef::Env { var } => {
                std::env::var(var).map_err(|_| CredentialsError::MissingEnv(var.clone()))?
            }
            CredentialsRef::File { path } => {
                std::fs::read_to_string(path).map_err(|_| CredentialsError::Unreadable(path.clone()))?
            }
        };
        let key = raw.trim();
        if key.is_empty() {
            return Err(CredentialsError::Empty);
        }
        Ok(Some(ApiKey(key.to_string())))
    }
}
