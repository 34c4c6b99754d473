//! Natural-language directive forms of dialogue intents.
//!
//! The mapping is data: a JSON file keyed by task, then intent name, with a
//! directive sentence or `null` for intents that are rendered without a
//! directive line. The default table is compiled in from
//! `assets/lexicon.v1.json`; alternates can be loaded from disk.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::intent::{DialogueIntent, TaskKind};

const DEFAULT_LEXICON: &str = include_str!("../assets/lexicon.v1.json");

/// Prefix that asks the model to acknowledge the user's last message
/// before executing the intent.
pub const ACKNOWLEDGEMENT_PREFIX: &str = "The Persuader acknowledges the Persuadee's response and";

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("invalid lexicon JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("failed to read lexicon: {0}")]
    Io(#[from] std::io::Error),
    #[error("lexicon has no entry for {task} intent `{name}`")]
    MissingIntent { task: TaskKind, name: &'static str },
    #[error("lexicon names unknown {task} intent `{name}`")]
    UnknownIntent { task: TaskKind, name: String },
    #[error("directive for {task} `{name}` must start with `The {label}` and end with a period")]
    MalformedDirective {
        task: TaskKind,
        name: String,
        label: &'static str,
    },
    #[error("acknowledgement does not apply: {0}")]
    NotApplicable(&'static str),
}

/// The directive sentence for one intent, or its absence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentDirective {
    pub intent: DialogueIntent,
    pub text: Option<String>,
    pub acknowledged: bool,
}

impl IntentDirective {
    pub fn is_present(&self) -> bool {
        self.text.is_some()
    }

    /// Prepends the acknowledgement prefix verbatim. The original sentence
    /// keeps its capital "The".
    pub fn with_acknowledgement(&self) -> Result<IntentDirective, LexiconError> {
        if self.intent.task() != TaskKind::P4g {
            return Err(LexiconError::NotApplicable("acknowledgement is only defined for P4G"));
        }
        if self.acknowledged {
            return Err(LexiconError::NotApplicable("directive is already acknowledged"));
        }
        let text = self
            .text
            .as_ref()
            .ok_or(LexiconError::NotApplicable("intent has no directive"))?;
        Ok(IntentDirective {
            intent: self.intent,
            text: Some(format!("{ACKNOWLEDGEMENT_PREFIX} {text}")),
            acknowledged: true,
        })
    }
}

#[derive(Deserialize, Serialize)]
struct LexiconFile {
    version: u32,
    #[serde(rename = "ESC")]
    esc: BTreeMap<String, Option<String>>,
    #[serde(rename = "P4G")]
    p4g: BTreeMap<String, Option<String>>,
}

/// Total mapping from every intent of both tasks to its directive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    version: u32,
    entries: HashMap<DialogueIntent, Option<String>>,
}

impl Lexicon {
    pub fn from_json(raw: &str) -> Result<Self, LexiconError> {
        let file: LexiconFile = serde_json::from_str(raw)?;
        let mut entries = HashMap::new();
        for (task, table) in [(TaskKind::Esc, file.esc), (TaskKind::P4g, file.p4g)] {
            for (name, text) in table {
                let intent = DialogueIntent::parse(task, &name).map_err(|_| LexiconError::UnknownIntent {
                    task,
                    name: name.clone(),
                })?;
                if let Some(text) = &text {
                    let label = task.system_label();
                    if !text.starts_with(&format!("The {label} ")) || !text.ends_with('.') {
                        return Err(LexiconError::MalformedDirective { task, name, label });
                    }
                }
                entries.insert(intent, text);
            }
            for intent in DialogueIntent::all(task) {
                if !entries.contains_key(&intent) {
                    return Err(LexiconError::MissingIntent {
                        task,
                        name: intent.name(),
                    });
                }
            }
        }
        Ok(Self {
            version: file.version,
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn directive_for(&self, intent: DialogueIntent) -> IntentDirective {
        IntentDirective {
            intent,
            text: self.entries.get(&intent).cloned().flatten(),
            acknowledged: false,
        }
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_json(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}
