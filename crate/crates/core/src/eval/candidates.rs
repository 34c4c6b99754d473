use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::EvalInstance;
use crate::generation::{generate, postprocess, CompletionBackend, DecodingParams, GenerationError, GenerationRequest};
use crate::lexicon::Lexicon;
use crate::policy::{next_intent, PolicyKind};
use crate::prompt::{build_prompt, GenerationTarget};

/// Short identifier of a response source, as used in sheets and ratings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceKey {
    #[serde(rename = "gt")]
    GroundTruth,
    #[serde(rename = "ft")]
    FineTuned,
    #[serde(rename = "prompt")]
    Prompted,
}

impl SourceKey {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKey::GroundTruth => "gt",
            SourceKey::FineTuned => "ft",
            SourceKey::Prompted => "prompt",
        }
    }
}

impl fmt::Display for SourceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceKey {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "gt" => Ok(SourceKey::GroundTruth),
            "ft" => Ok(SourceKey::FineTuned),
            "prompt" => Ok(SourceKey::Prompted),
            other => Err(EvalError::InvalidArgument(format!("unknown source {other:?}"))),
        }
    }
}

/// Where a candidate response comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateSource {
    GroundTruth,
    /// Outputs of an externally fine-tuned model: a JSON object mapping
    /// instance id to response text.
    FineTuned(PathBuf),
    /// Prompted generation conditioned on the gold intent.
    Prompted,
}

impl CandidateSource {
    pub fn key(&self) -> SourceKey {
        match self {
            CandidateSource::GroundTruth => SourceKey::GroundTruth,
            CandidateSource::FineTuned(_) => SourceKey::FineTuned,
            CandidateSource::Prompted => SourceKey::Prompted,
        }
    }

    /// Parses a comma-separated list such as `gt,ft:out.json,prompt`.
    pub fn parse_list(spec: &str) -> Result<Vec<CandidateSource>, EvalError> {
        let mut out: Vec<CandidateSource> = Vec::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let source = match item.split_once(':') {
                Some(("ft", path)) if !path.is_empty() => CandidateSource::FineTuned(PathBuf::from(path)),
                None if item == "gt" => CandidateSource::GroundTruth,
                None if item == "prompt" => CandidateSource::Prompted,
                None if item == "ft" => {
                    return Err(EvalError::InvalidArgument("ft needs a file: ft:<path>".into()));
                }
                _ => return Err(EvalError::InvalidArgument(format!("unknown source {item:?}"))),
            };
            if out.iter().any(|s| s.key() == source.key()) {
                return Err(EvalError::InvalidArgument(format!("source {} listed twice", source.key())));
            }
            out.push(source);
        }
        if out.is_empty() {
            return Err(EvalError::InvalidArgument("no sources given".into()));
        }
        Ok(out)
    }
}

/// One cell of the candidate table. Exactly one of `text` and `error` is
/// set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: Option<String>,
    pub error: Option<String>,
    /// The prompt sent for prompted candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

impl Candidate {
    fn ok(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            error: None,
            prompt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTable {
    pub instances: Vec<EvalInstance>,
    pub sources: Vec<SourceKey>,
    /// instance id → source → candidate.
    pub cells: BTreeMap<String, BTreeMap<SourceKey, Candidate>>,
}

impl CandidateTable {
    pub fn get(&self, instance_id: &str, source: SourceKey) -> Option<&Candidate> {
        self.cells.get(instance_id)?.get(&source)
    }

    /// Successful texts of one source, in instance order.
    pub fn texts(&self, source: SourceKey) -> Vec<&str> {
        self.instances
            .iter()
            .filter_map(|i| self.get(&i.id, source)?.text.as_deref())
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// What prompted candidates need.
pub struct PromptedSetup<'a> {
    pub backend: &'a dyn CompletionBackend,
    pub lexicon: &'a Lexicon,
    pub decoding: &'a DecodingParams,
}

pub fn load_fine_tuned(path: impl AsRef<Path>) -> Result<HashMap<String, String>, EvalError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn prompted(instance: &EvalInstance, setup: &PromptedSetup<'_>) -> Candidate {
    // Static prompts condition on the gold intent with no acknowledgement,
    // since the evaluated turn is judged on its own.
    let policy = PolicyKind::GroundTruthReplay(Box::new(instance.clone()));
    let planner = crate::policy::PlannerState::new(instance.task);
    let prompt = next_intent(&planner, &policy)
        .map_err(EvalError::from)
        .and_then(|intent| {
            build_prompt(
                instance.task,
                instance.metadata.as_ref(),
                &instance.history,
                &GenerationTarget::plain(intent),
                setup.lexicon,
            )
            .map_err(EvalError::from)
        });
    let prompt = match prompt {
        Ok(p) => p,
        Err(e) => {
            return Candidate {
                text: None,
                error: Some(e.to_string()),
                prompt: None,
            }
        }
    };
    let request = GenerationRequest::new(prompt.clone(), instance.task, setup.decoding);
    let outcome = generate(&request, setup.backend).and_then(|r| {
        let raw = r.raw_text.ok_or(GenerationError::ContentFiltered)?;
        postprocess(&raw, instance.task)
    });
    match outcome {
        Ok(text) => Candidate {
            text: Some(text),
            error: None,
            prompt: Some(prompt),
        },
        Err(e) => {
            tracing::warn!(instance = %instance.id, error = %e, "prompted candidate failed");
            Candidate {
                text: None,
                error: Some(e.to_string()),
                prompt: Some(prompt),
            }
        }
    }
}

/// Produces one response per (instance, source). Generation failures are
/// recorded in the cell; a fine-tuned file missing an instance is an
/// error for the whole batch.
pub fn generate_candidates(
    instances: &[EvalInstance],
    sources: &[CandidateSource],
    setup: Option<&PromptedSetup<'_>>,
) -> Result<CandidateTable, EvalError> {
    let mut fine_tuned = None;
    for source in sources {
        if let CandidateSource::FineTuned(path) = source {
            let map = load_fine_tuned(path)?;
            if let Some(missing) = instances.iter().find(|i| !map.contains_key(&i.id)) {
                return Err(EvalError::MissingFineTunedResponse(missing.id.clone()));
            }
            fine_tuned = Some(map);
        }
    }
    let needs_backend = sources.contains(&CandidateSource::Prompted);
    if needs_backend && setup.is_none() {
        return Err(EvalError::InvalidArgument("prompted source needs a completion backend".into()));
    }

    let rows: Vec<(String, BTreeMap<SourceKey, Candidate>)> = instances
        .par_iter()
        .map(|instance| {
            let row = sources
                .iter()
                .map(|source| {
                    let cell = match source {
                        CandidateSource::GroundTruth => Candidate::ok(instance.gold_response.clone()),
                        CandidateSource::FineTuned(_) => {
                            Candidate::ok(fine_tuned.as_ref().expect("loaded above")[&instance.id].trim())
                        }
                        CandidateSource::Prompted => prompted(instance, setup.expect("checked above")),
                    };
                    (source.key(), cell)
                })
                .collect();
            (instance.id.clone(), row)
        })
        .collect();

    Ok(CandidateTable {
        instances: instances.to_vec(),
        sources: sources.iter().map(CandidateSource::key).collect(),
        cells: rows.into_iter().collect(),
    })
}
