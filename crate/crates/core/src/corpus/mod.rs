//! Normalized conversation model for both corpora, plus loaders for the
//! normalized JSON file and the upstream release formats.

mod upstream;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::intent::{DialogueIntent, SpeakerRole, SpeakerSide, TaskKind};

pub use upstream::{p4g_upstream_label, UPSTREAM_P4G_LABELS};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("failed to read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },
    #[error("unknown intent label `{label}` in conversation `{conversation_id}`")]
    UnknownIntentLabel { label: String, conversation_id: String },
    #[error("corpus declares task {found} but {expected} was requested")]
    TaskMismatch { expected: TaskKind, found: TaskKind },
    #[error("requested {requested} evaluation turns but only {available} are eligible")]
    InsufficientData { requested: usize, available: usize },
}

impl CorpusError {
    fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        CorpusError::Schema {
            location: location.into(),
            message: message.into(),
        }
    }
}

/// One utterance. System-side turns carry the annotated intent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub side: SpeakerSide,
    pub text: String,
    pub intent: Option<DialogueIntent>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TurnError {
    #[error("turn text is empty")]
    EmptyText,
    #[error("user-side turns cannot carry an intent")]
    UserIntent,
}

impl Turn {
    /// Builds a turn, trimming the text and enforcing the side/intent rule.
    pub fn new(
        side: SpeakerSide,
        text: impl AsRef<str>,
        intent: Option<DialogueIntent>,
    ) -> Result<Self, TurnError> {
        let text = text.as_ref().trim();
        if text.is_empty() {
            return Err(TurnError::EmptyText);
        }
        if side == SpeakerSide::User && intent.is_some() {
            return Err(TurnError::UserIntent);
        }
        Ok(Self {
            side,
            text: text.to_string(),
            intent,
        })
    }

    pub fn system(text: impl AsRef<str>, intent: DialogueIntent) -> Result<Self, TurnError> {
        Self::new(SpeakerSide::System, text, Some(intent))
    }

    pub fn user(text: impl AsRef<str>) -> Result<Self, TurnError> {
        Self::new(SpeakerSide::User, text, None)
    }

    pub fn role(&self, task: TaskKind) -> SpeakerRole {
        SpeakerRole::new(task, self.side)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SituationMetadata {
    pub emotion_type: String,
    pub problem_type: String,
    pub situation: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub task: TaskKind,
    pub metadata: Option<SituationMetadata>,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Deterministic hold-out membership: the first 8 bytes of
    /// SHA-256(id), read as a fraction of 2^64, fall below `fraction`.
    pub fn is_holdout(&self, fraction: f64) -> bool {
        let digest = Sha256::digest(self.id.as_bytes());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        (u64::from_be_bytes(head) as f64 / u64::MAX as f64) < fraction
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub task: TaskKind,
    pub conversations: Vec<Conversation>,
}

/// A static-evaluation item: the history up to (excluding) a system turn,
/// and that turn's gold annotation and text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub id: String,
    pub conversation_id: String,
    pub task: TaskKind,
    pub metadata: Option<SituationMetadata>,
    pub turn_index: usize,
    pub history: Vec<Turn>,
    pub gold_intent: DialogueIntent,
    pub gold_response: String,
}

// Normalized file schema.

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    task: TaskKind,
    conversations: Vec<ConversationRecord>,
}

#[derive(Serialize, Deserialize)]
struct ConversationRecord {
    id: String,
    metadata: Option<SituationMetadata>,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    speaker: SpeakerSide,
    text: String,
    intent: Option<String>,
}

/// Loads a corpus from the normalized JSON schema, an ESConv-style JSON
/// export, or a PersuasionForGood annotated-dialog CSV export.
pub fn load_corpus(path: impl AsRef<Path>, task: TaskKind) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CorpusError::FileNotFound(path.to_path_buf()));
    }
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let is_csv = path
        .extension()
        .is_some_and(|ext| ext.eq_ignore_ascii_case("csv"));
    if is_csv {
        if task != TaskKind::P4g {
            return Err(CorpusError::schema("file", "CSV exports are only recognized for P4G"));
        }
        return upstream::parse_p4g_csv(&raw);
    }
    parse_corpus_json(&raw, task)
}

/// Parses JSON text, dispatching on shape: an object is the normalized
/// schema, a top-level array is an upstream ESConv export.
pub fn parse_corpus_json(raw: &str, task: TaskKind) -> Result<Corpus, CorpusError> {
    let value: serde_json::Value = serde_json::from_str(raw).map_err(json_error)?;
    match value {
        serde_json::Value::Array(_) if task == TaskKind::Esc => upstream::parse_esconv(value),
        serde_json::Value::Array(_) => Err(CorpusError::schema(
            "top level",
            "array-shaped upstream exports are only recognized for ESC",
        )),
        _ => {
            let file: CorpusFile = serde_json::from_value(value)
                .map_err(|e| CorpusError::schema("top level", e.to_string()))?;
            from_records(file, task)
        }
    }
}

fn json_error(e: serde_json::Error) -> CorpusError {
    CorpusError::schema(format!("line {}, column {}", e.line(), e.column()), e.to_string())
}

fn from_records(file: CorpusFile, task: TaskKind) -> Result<Corpus, CorpusError> {
    if file.task != task {
        return Err(CorpusError::TaskMismatch {
            expected: task,
            found: file.task,
        });
    }
    let mut conversations = Vec::with_capacity(file.conversations.len());
    for (ci, record) in file.conversations.into_iter().enumerate() {
        let mut turns = Vec::with_capacity(record.turns.len());
        for (ti, t) in record.turns.into_iter().enumerate() {
            let location = || format!("conversations[{ci}].turns[{ti}]");
            let intent = match (t.speaker, t.intent) {
                (SpeakerSide::User, _) => None,
                (SpeakerSide::System, None) => {
                    return Err(CorpusError::schema(location(), "system-side turn has no intent"))
                }
                (SpeakerSide::System, Some(label)) => Some(
                    DialogueIntent::parse(task, &label).map_err(|_| {
                        CorpusError::UnknownIntentLabel {
                            label,
                            conversation_id: record.id.clone(),
                        }
                    })?,
                ),
            };
            let turn = Turn::new(t.speaker, &t.text, intent)
                .map_err(|e| CorpusError::schema(location(), e.to_string()))?;
            turns.push(turn);
        }
        let conversation = Conversation {
            id: record.id,
            task,
            metadata: record.metadata,
            turns,
        };
        validate_conversation(&conversation, &format!("conversations[{ci}]"))?;
        conversations.push(conversation);
    }
    let corpus = Corpus {
        task,
        conversations,
    };
    check_unique_ids(&corpus)?;
    Ok(corpus)
}

pub(crate) fn validate_conversation(c: &Conversation, location: &str) -> Result<(), CorpusError> {
    if c.id.trim().is_empty() {
        return Err(CorpusError::schema(location, "conversation id is empty"));
    }
    if c.turns.is_empty() {
        return Err(CorpusError::schema(location, "conversation has no turns"));
    }
    match (c.task, &c.metadata) {
        (TaskKind::Esc, None) => {
            return Err(CorpusError::schema(location, "ESC conversation is missing metadata"))
        }
        (TaskKind::Esc, Some(m)) => {
            if [&m.emotion_type, &m.problem_type, &m.situation]
                .iter()
                .any(|f| f.trim().is_empty())
            {
                return Err(CorpusError::schema(location, "ESC metadata fields must be non-empty"));
            }
        }
        (TaskKind::P4g, Some(_)) => {
            return Err(CorpusError::schema(location, "P4G conversations carry no metadata"))
        }
        (TaskKind::P4g, None) => {}
    }
    Ok(())
}

pub(crate) fn check_unique_ids(corpus: &Corpus) -> Result<(), CorpusError> {
    let mut seen = std::collections::HashSet::new();
    for (i, c) in corpus.conversations.iter().enumerate() {
        if !seen.insert(c.id.as_str()) {
            return Err(CorpusError::schema(
                format!("conversations[{i}]"),
                format!("duplicate conversation id `{}`", c.id),
            ));
        }
    }
    Ok(())
}

impl Corpus {
    /// Serializes to the normalized schema.
    pub fn to_json(&self) -> String {
        let file = CorpusFile {
            task: self.task,
            conversations: self
                .conversations
                .iter()
                .map(|c| ConversationRecord {
                    id: c.id.clone(),
                    metadata: c.metadata.clone(),
                    turns: c
                        .turns
                        .iter()
                        .map(|t| TurnRecord {
                            speaker: t.side,
                            text: t.text.clone(),
                            intent: t.intent.map(|i| i.name().to_string()),
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("corpus serialization is infallible")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.to_json())
    }

    /// All (conversation index, turn index) pairs whose turn is system-side
    /// and annotated.
    pub fn eligible_turns(&self) -> Vec<(usize, usize)> {
        self.conversations
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| {
                c.turns
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.side == SpeakerSide::System && t.intent.is_some())
                    .map(move |(ti, _)| (ci, ti))
            })
            .collect()
    }

    pub fn instance_at(&self, conversation: usize, turn: usize) -> Option<EvalInstance> {
        let c = self.conversations.get(conversation)?;
        let t = c.turns.get(turn)?;
        let gold_intent = t.intent?;
        Some(EvalInstance {
            id: format!("{}#{}", c.id, turn),
            conversation_id: c.id.clone(),
            task: c.task,
            metadata: c.metadata.clone(),
            turn_index: turn,
            history: c.turns[..turn].to_vec(),
            gold_intent,
            gold_response: t.text.clone(),
        })
    }
}

/// Draws `n` evaluation instances uniformly without replacement over all
/// eligible system turns. Deterministic for a fixed seed.
pub fn sample_eval_turns(corpus: &Corpus, n: usize, seed: u64) -> Result<Vec<EvalInstance>, CorpusError> {
    let eligible = corpus.eligible_turns();
    if eligible.len() < n {
        return Err(CorpusError::InsufficientData {
            requested: n,
            available: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, eligible.len(), n);
    Ok(picked
        .into_iter()
        .map(|i| {
            let (ci, ti) = eligible[i];
            corpus.instance_at(ci, ti).expect("eligible turns are annotated")
        })
        .collect())
}
