//! Session orchestration: the mixed-initiative loop that wires the policy,
//! knowledge retrieval, prompt compiler and completion backend together and
//! records every step in an append-only event log.
//!
//! The event log is the source of truth. [`SessionState`] is a cache that is
//! rebuilt by [`SessionState::replay`].

mod clock;
mod store;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock, TryLockError};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::Turn;
use crate::generation::{generate, postprocess, CompletionBackend, DecodingParams, FinishReason, GenerationError, GenerationRequest};
use crate::intent::{DialogueIntent, P4gStrategy, SpeakerSide, TaskKind};
use crate::lexicon::Lexicon;
use crate::policy::{plan, Plan, PlannerState, PolicyError, PolicyKind, FLAG_FACTUAL_QUESTION};
use crate::prompt::{build_prompt, GenerationTarget, PromptError};
use crate::retrieval::{retrieve, should_trigger_retrieval, Embedder, KnowledgeBase, RetrievalError, DEFAULT_OFFLINE_THRESHOLD};

pub use clock::{Clock, SequentialIds, SessionIdSource, SteppingClock, SystemClock, UuidIds};
pub use store::{EventStore, JsonlEventStore, MemoryEventStore};

const CLOSING: DialogueIntent = DialogueIntent::P4g(P4gStrategy::Closing);

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session is handling another message")]
    SessionBusy,
    #[error("session is closed")]
    SessionClosed,
    #[error("message text is empty")]
    EmptyInput,
    #[error("interactive sessions are not supported for {0}")]
    UnsupportedTask(TaskKind),
    #[error("ground-truth replay is a static-evaluation policy and cannot drive a live session")]
    UnsupportedPolicy,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("generation failed: {source}")]
    Generation {
        #[source]
        source: GenerationError,
        retriable: bool,
    },
    #[error("event store: {0}")]
    Store(#[from] std::io::Error),
    #[error("event log for {session_id} is inconsistent: {message}")]
    Replay { session_id: String, message: String },
}

impl EngineError {
    pub fn is_retriable(&self) -> bool {
        match self {
            EngineError::Generation { retriable, .. } => *retriable,
            EngineError::SessionBusy => true,
            _ => false,
        }
    }
}

impl From<GenerationError> for EngineError {
    fn from(source: GenerationError) -> Self {
        let retriable = source.is_retriable();
        EngineError::Generation { source, retriable }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    /// The user wrote once more after the policy's Closing turn, or the
    /// policy ran out of intents.
    Completed,
    IdleTimeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Closed { reason: CloseReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventKind {
    SessionStarted {
        task: TaskKind,
        policy: PolicyKind,
        config_snapshot: serde_json::Value,
    },
    UserMessage {
        text: String,
    },
    RetrievalUsed {
        index: usize,
        question: String,
        answer: String,
        distance: f64,
    },
    IntentChosen {
        intent: DialogueIntent,
        preempting: bool,
    },
    PromptBuilt {
        prompt: String,
    },
    Generated {
        attempt: u32,
        raw_text: Option<String>,
        finish_reason: FinishReason,
        latency_ms: u64,
        backend: String,
    },
    BotReply {
        text: String,
        intent: DialogueIntent,
        preempting: bool,
        retrieval_used: bool,
    },
    Error {
        message: String,
        retriable: bool,
    },
    SessionClosed {
        reason: CloseReason,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Everything known about one session, derived from its events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub task: TaskKind,
    pub created_at: DateTime<Utc>,
    pub history: Vec<Turn>,
    pub planner_state: PlannerState,
    pub policy: PolicyKind,
    pub config_snapshot: serde_json::Value,
    pub status: SessionStatus,
    pub last_activity: DateTime<Utc>,
    /// Sequence number for the next event.
    pub next_seq: u64,
}

impl SessionState {
    /// Rebuilds a session from its complete event log.
    pub fn replay(session_id: &str, events: &[SessionEvent]) -> Result<Self, EngineError> {
        let bad = |message: String| EngineError::Replay {
            session_id: session_id.to_string(),
            message,
        };
        let (first, rest) = events.split_first().ok_or_else(|| bad("log is empty".into()))?;
        let EventKind::SessionStarted {
            task,
            policy,
            config_snapshot,
        } = &first.kind
        else {
            return Err(bad("log does not open with SessionStarted".into()));
        };
        let mut state = SessionState {
            session_id: session_id.to_string(),
            task: *task,
            created_at: first.at,
            history: Vec::new(),
            planner_state: PlannerState::new(*task),
            policy: policy.clone(),
            config_snapshot: config_snapshot.clone(),
            status: SessionStatus::Active,
            last_activity: first.at,
            next_seq: first.seq + 1,
        };
        for event in rest {
            state.apply(event).map_err(bad)?;
        }
        Ok(state)
    }

    /// Folds one event into the state.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), String> {
        if event.seq != self.next_seq {
            return Err(format!("expected event {} but found {}", self.next_seq, event.seq));
        }
        match &event.kind {
            EventKind::SessionStarted { .. } => return Err("SessionStarted after the first event".into()),
            EventKind::UserMessage { text } => {
                let turn = Turn::user(text).map_err(|e| e.to_string())?;
                self.history.push(turn);
            }
            EventKind::BotReply {
                text,
                intent,
                preempting,
                ..
            } => {
                let turn = Turn::system(text, *intent).map_err(|e| e.to_string())?;
                self.history.push(turn);
                self.planner_state.record(&Plan {
                    intent: *intent,
                    preempting: *preempting,
                });
            }
            EventKind::SessionClosed { reason } => self.status = SessionStatus::Closed { reason: *reason },
            EventKind::RetrievalUsed { .. }
            | EventKind::IntentChosen { .. }
            | EventKind::PromptBuilt { .. }
            | EventKind::Generated { .. }
            | EventKind::Error { .. } => {}
        }
        self.last_activity = event.at;
        self.next_seq += 1;
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.status == SessionStatus::Active
    }

    pub fn user_turns(&self) -> usize {
        self.history.iter().filter(|t| t.side == SpeakerSide::User).count()
    }

    pub fn closing_reached(&self) -> bool {
        self.history.iter().any(|t| t.intent == Some(CLOSING))
    }

    /// Whether post-chat ratings may be submitted: the bot has closed, the
    /// session ended, or the user has written `min_user_turns` messages.
    pub fn rating_unlocked(&self, min_user_turns: usize) -> bool {
        self.closing_reached() || !self.is_active() || self.user_turns() >= min_user_turns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSettings {
    pub decoding: DecodingParams,
    pub retrieval_threshold: f64,
    pub idle_timeout_secs: u64,
    /// Added to the temperature when retrying an empty generation.
    pub empty_retry_temperature_step: f64,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            decoding: DecodingParams::default(),
            retrieval_threshold: DEFAULT_OFFLINE_THRESHOLD,
            idle_timeout_secs: 600,
            empty_retry_temperature_step: 0.1,
        }
    }
}

/// A generated system turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BotReply {
    pub text: String,
    pub intent: DialogueIntent,
    pub retrieval_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub opening: BotReply,
}

/// Result of a user message. `reply` is `None` when the message ended the
/// session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageOutcome {
    pub reply: Option<BotReply>,
    pub session_closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    /// `System` or `User`.
    pub party: String,
    /// Task-specific speaker label, e.g. `Persuader`.
    pub speaker: String,
    pub text: String,
    pub intent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub task: TaskKind,
    pub status: SessionStatus,
    pub turns: Vec<TranscriptTurn>,
    pub events: Vec<SessionEvent>,
}

impl Transcript {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }
}

/// Events of one step, stamped and numbered as they are produced.
struct Pending<'a> {
    clock: &'a dyn Clock,
    next_seq: u64,
    events: Vec<SessionEvent>,
}

impl<'a> Pending<'a> {
    fn new(clock: &'a dyn Clock, next_seq: u64) -> Self {
        Self {
            clock,
            next_seq,
            events: Vec::new(),
        }
    }

    fn push(&mut self, kind: EventKind) -> &SessionEvent {
        let event = SessionEvent {
            seq: self.next_seq,
            at: self.clock.now(),
            kind,
        };
        self.next_seq += 1;
        self.events.push(event);
        self.events.last().expect("just pushed")
    }
}

type SessionHandle = Arc<Mutex<SessionState>>;

pub struct DialogueEngine {
    backend: Arc<dyn CompletionBackend>,
    retrieval: Option<(Arc<KnowledgeBase>, Arc<dyn Embedder>)>,
    lexicon: Lexicon,
    settings: EngineSettings,
    store: Arc<dyn EventStore>,
    clock: Arc<dyn Clock>,
    ids: Arc<dyn SessionIdSource>,
    sessions: RwLock<HashMap<String, SessionHandle>>,
}

impl DialogueEngine {
    pub fn new(
        backend: Arc<dyn CompletionBackend>,
        lexicon: Lexicon,
        settings: EngineSettings,
        store: Arc<dyn EventStore>,
    ) -> Self {
        Self {
            backend,
            retrieval: None,
            lexicon,
            settings,
            store,
            clock: Arc::new(SystemClock),
            ids: Arc::new(UuidIds),
            sessions: RwLock::new(HashMap::new()),
        }
    }

    pub fn with_retrieval(mut self, kb: Arc<KnowledgeBase>, embedder: Arc<dyn Embedder>) -> Self {
        self.retrieval = Some((kb, embedder));
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_ids(mut self, ids: Arc<dyn SessionIdSource>) -> Self {
        self.ids = ids;
        self
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    fn config_snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "backend": self.backend.name(),
            "decoding": self.settings.decoding,
            "embedder": self.retrieval.as_ref().map(|(_, e)| e.name().to_string()),
            "idle_timeout_secs": self.settings.idle_timeout_secs,
            "knowledge_entries": self.retrieval.as_ref().map(|(kb, _)| kb.len()),
            "lexicon_version": self.lexicon.version(),
            "retrieval_threshold": self.settings.retrieval_threshold,
        })
    }

    /// Starts a session and generates its opening system turn.
    pub fn create_session(&self, task: TaskKind, policy: PolicyKind) -> Result<CreatedSession, EngineError> {
        if !policy.is_interactive() {
            return Err(EngineError::UnsupportedPolicy);
        }
        if task != TaskKind::P4g {
            return Err(EngineError::UnsupportedTask(task));
        }
        if policy.task() != task {
            return Err(PolicyError::TaskMismatch {
                policy: policy.task(),
                session: task,
            }
            .into());
        }
        let session_id = self.ids.next_id();
        let mut pending = Pending::new(self.clock.as_ref(), 0);
        pending.push(EventKind::SessionStarted {
            task,
            policy,
            config_snapshot: self.config_snapshot(),
        });
        let mut working = SessionState::replay(&session_id, &pending.events)?;
        let opening = self.system_turn(&mut working, &mut pending)?;
        self.store.append(&session_id, &pending.events)?;
        let state = SessionState::replay(&session_id, &pending.events)?;
        tracing::info!(session_id = %session_id, %task, "session created");
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(session_id.clone(), Arc::new(Mutex::new(state)));
        Ok(CreatedSession { session_id, opening })
    }

    fn handle(&self, session_id: &str) -> Result<SessionHandle, EngineError> {
        if let Some(h) = self.sessions.read().unwrap_or_else(|p| p.into_inner()).get(session_id) {
            return Ok(h.clone());
        }
        // Not in memory: rebuild from the log if it exists.
        let events = self
            .store
            .load(session_id)?
            .ok_or_else(|| EngineError::UnknownSession(session_id.to_string()))?;
        let state = SessionState::replay(session_id, &events)?;
        let mut sessions = self.sessions.write().unwrap_or_else(|p| p.into_inner());
        Ok(sessions
            .entry(session_id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(state)))
            .clone())
    }

    /// A copy of the current state.
    pub fn session(&self, session_id: &str) -> Result<SessionState, EngineError> {
        let handle = self.handle(session_id)?;
        let state = handle.lock().unwrap_or_else(|p| p.into_inner());
        Ok(state.clone())
    }

    /// Writes events to the store, then folds them into the cached state.
    fn commit(&self, state: &mut SessionState, events: &[SessionEvent]) -> Result<(), EngineError> {
        self.store.append(&state.session_id, events)?;
        for event in events {
            state.apply(event).map_err(|message| EngineError::Replay {
                session_id: state.session_id.clone(),
                message,
            })?;
        }
        Ok(())
    }

    /// Handles one user message. Messages to the same session are
    /// serialized; a message arriving while another is in flight gets
    /// [`EngineError::SessionBusy`].
    pub fn user_message(&self, session_id: &str, text: &str) -> Result<MessageOutcome, EngineError> {
        let handle = self.handle(session_id)?;
        let mut state = match handle.try_lock() {
            Ok(guard) => guard,
            Err(TryLockError::WouldBlock) => return Err(EngineError::SessionBusy),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let text = text.trim();
        if text.is_empty() {
            return Err(EngineError::EmptyInput);
        }
        if !state.is_active() {
            return Err(EngineError::SessionClosed);
        }

        let mut pending = Pending::new(self.clock.as_ref(), state.next_seq);
        let now = self.clock.now();
        let idle = (now - state.last_activity).num_seconds();
        if idle > self.settings.idle_timeout_secs as i64 {
            pending.push(EventKind::SessionClosed {
                reason: CloseReason::IdleTimeout,
            });
            let events = std::mem::take(&mut pending.events);
            self.commit(&mut state, &events)?;
            tracing::info!(session_id, idle_secs = idle, "session closed after idle timeout");
            return Err(EngineError::SessionClosed);
        }

        pending.push(EventKind::UserMessage { text: text.to_string() });
        if state.planner_state.last_intent == Some(CLOSING) {
            return self.close_completed(&mut state, pending);
        }

        let mut working = state.clone();
        working.apply(&pending.events[0]).map_err(|message| EngineError::Replay {
            session_id: session_id.to_string(),
            message,
        })?;
        match self.system_turn(&mut working, &mut pending) {
            Ok(reply) => {
                let events = std::mem::take(&mut pending.events);
                self.commit(&mut state, &events)?;
                Ok(MessageOutcome {
                    reply: Some(reply),
                    session_closed: false,
                })
            }
            Err(EngineError::Policy(PolicyError::PolicyExhausted)) => {
                pending.events.truncate(1);
                pending.next_seq = state.next_seq + 1;
                self.close_completed(&mut state, pending)
            }
            Err(error) => {
                // Nothing of the failed turn is kept except the error itself,
                // so the user can resend the same message.
                let mut failure = Pending::new(self.clock.as_ref(), state.next_seq);
                failure.push(EventKind::Error {
                    message: error.to_string(),
                    retriable: error.is_retriable(),
                });
                let events = failure.events;
                self.commit(&mut state, &events)?;
                tracing::warn!(session_id, %error, "turn failed");
                Err(error)
            }
        }
    }

    fn close_completed(&self, state: &mut SessionState, mut pending: Pending<'_>) -> Result<MessageOutcome, EngineError> {
        pending.push(EventKind::SessionClosed {
            reason: CloseReason::Completed,
        });
        let events = std::mem::take(&mut pending.events);
        self.commit(state, &events)?;
        tracing::info!(session_id = %state.session_id, "session completed");
        Ok(MessageOutcome {
            reply: None,
            session_closed: true,
        })
    }

    /// Plans, prompts and generates the next system turn for `working`,
    /// appending the step's events (ending in BotReply) to `pending` and
    /// folding them into `working`.
    fn system_turn(&self, working: &mut SessionState, pending: &mut Pending<'_>) -> Result<BotReply, EngineError> {
        let task = working.task;
        let opening = working.history.is_empty();
        let mut planner = working.planner_state.clone();

        let mut knowledge = None;
        if let (false, TaskKind::P4g, Some((kb, embedder))) = (opening, task, &self.retrieval) {
            let question = working.history.last().map(|t| t.text.clone()).unwrap_or_default();
            let hit = match retrieve(&question, kb, embedder.as_ref()) {
                Ok(hit) => Some(hit),
                Err(RetrievalError::ZeroVector | RetrievalError::EmptyKnowledgeBase) => None,
                Err(e) => return Err(e.into()),
            };
            if should_trigger_retrieval(&question, hit.as_ref(), self.settings.retrieval_threshold) {
                let hit = hit.expect("trigger implies a hit");
                planner.set_flag(FLAG_FACTUAL_QUESTION, true);
                pending.push(EventKind::RetrievalUsed {
                    index: hit.index,
                    question: hit.entry.question.clone(),
                    answer: hit.entry.answer.clone(),
                    distance: hit.distance,
                });
                knowledge = Some(hit.entry.answer);
            }
        }

        let chosen = plan(&planner, &working.policy)?;
        pending.push(EventKind::IntentChosen {
            intent: chosen.intent,
            preempting: chosen.preempting,
        });

        let target = GenerationTarget {
            intent: chosen.intent,
            acknowledge: task == TaskKind::P4g && !opening,
            knowledge: knowledge.clone(),
        };
        let prompt = build_prompt(task, None, &working.history, &target, &self.lexicon)?;
        pending.push(EventKind::PromptBuilt { prompt: prompt.clone() });

        let mut request = GenerationRequest::new(prompt, task, &self.settings.decoding);
        let mut attempt = 0;
        let text = loop {
            let result = generate(&request, self.backend.as_ref())?;
            pending.push(EventKind::Generated {
                attempt,
                raw_text: result.raw_text.clone(),
                finish_reason: result.finish_reason,
                latency_ms: result.latency_ms,
                backend: result.backend.clone(),
            });
            let raw = result.raw_text.ok_or(GenerationError::ContentFiltered)?;
            let cleaned = match &knowledge {
                Some(k) => postprocess(&format!("{k} {}", raw.trim_start()), task),
                None => postprocess(&raw, task),
            };
            match cleaned {
                Ok(text) => break text,
                Err(GenerationError::EmptyGeneration) if attempt == 0 => {
                    attempt += 1;
                    request.temperature += self.settings.empty_retry_temperature_step;
                    tracing::debug!("empty generation, retrying once");
                }
                Err(e) => return Err(e.into()),
            }
        };

        let reply = BotReply {
            text,
            intent: chosen.intent,
            retrieval_used: knowledge.is_some(),
        };
        pending.push(EventKind::BotReply {
            text: reply.text.clone(),
            intent: reply.intent,
            preempting: chosen.preempting,
            retrieval_used: reply.retrieval_used,
        });
        // Fold everything after what `working` has already seen.
        let start = pending
            .events
            .iter()
            .position(|e| e.seq == working.next_seq)
            .unwrap_or(pending.events.len());
        for event in &pending.events[start..] {
            working.apply(event).map_err(|message| EngineError::Replay {
                session_id: working.session_id.clone(),
                message,
            })?;
        }
        Ok(reply)
    }

    /// The session's turns and full event log, read back from the store.
    pub fn export_transcript(&self, session_id: &str) -> Result<Transcript, EngineError> {
        let events = self
            .store
            .load(session_id)?
            .ok_or_else(|| EngineError::UnknownSession(session_id.to_string()))?;
        let state = SessionState::replay(session_id, &events)?;
        let turns = state
            .history
            .iter()
            .map(|t| TranscriptTurn {
                party: match t.side {
                    SpeakerSide::System => "System".to_string(),
                    SpeakerSide::User => "User".to_string(),
                },
                speaker: t.role(state.task).display_label().to_string(),
                text: t.text.clone(),
                intent: t.intent.map(|i| i.name().to_string()),
            })
            .collect();
        Ok(Transcript {
            session_id: session_id.to_string(),
            task: state.task,
            status: state.status,
            turns,
            events,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{MockBackend, MockScript};
    use crate::policy::{default_p4g_ordering, IntentOrdering, RuleSet};
    use crate::retrieval::HashingEmbedder;
    use chrono::TimeZone;

    fn engine(script: MockScript) -> (DialogueEngine, Arc<MemoryEventStore>, Arc<SteppingClock>) {
        let store = Arc::new(MemoryEventStore::new());
        let clock = Arc::new(SteppingClock::new(
            Utc.with_ymd_and_hms(2023, 3, 1, 12, 0, 0).unwrap(),
            chrono::Duration::seconds(1),
        ));
        let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::default());
        let kb = Arc::new(KnowledgeBase::bundled(embedder.as_ref()).unwrap());
        let e = DialogueEngine::new(
            Arc::new(MockBackend::new(script)),
            Lexicon::default(),
            EngineSettings::default(),
            store.clone(),
        )
        .with_retrieval(kb, embedder)
        .with_clock(clock.clone())
        .with_ids(Arc::new(SequentialIds::new("t")));
        (e, store, clock)
    }

    fn fixed() -> PolicyKind {
        PolicyKind::FixedOrdering(default_p4g_ordering())
    }

    #[test]
    fn opening_turn_is_greeting() {
        let (e, _, _) = engine(MockScript::ordinal([" Hi, how are you doing?"]));
        let created = e.create_session(TaskKind::P4g, fixed()).unwrap();
        assert_eq!(created.opening.text, "Hi, how are you doing?");
        assert_eq!(created.opening.intent, DialogueIntent::P4g(P4gStrategy::Greeting));
        assert_eq!(e.export_transcript(&created.session_id).unwrap().turns.len(), 1);
    }

    #[test]
    fn esc_and_replay_rejected() {
        let (e, _, _) = engine(MockScript::constant("x"));
        let esc = PolicyKind::FixedOrdering(
            IntentOrdering::new(vec![DialogueIntent::Esc(crate::intent::EscStrategy::Question)]).unwrap(),
        );
        assert!(matches!(e.create_session(TaskKind::Esc, esc), Err(EngineError::UnsupportedTask(TaskKind::Esc))));
    }

    #[test]
    fn distinct_ids() {
        let (e, _, _) = engine(MockScript::constant("Hello."));
        let a = e.create_session(TaskKind::P4g, fixed()).unwrap();
        let b = e.create_session(TaskKind::P4g, fixed()).unwrap();
        assert_ne!(a.session_id, b.session_id);
    }

    #[test]
    fn third_system_turn_follows_ordering() {
        let (e, _, _) = engine(MockScript::constant("Sure."));
        let s = e.create_session(TaskKind::P4g, fixed()).unwrap().session_id;
        let r = e.user_message(&s, "Hello. I'm fine and you?").unwrap().reply.unwrap();
        assert_eq!(r.intent, DialogueIntent::P4g(P4gStrategy::SourceRelatedInquiry));
        let r = e.user_message(&s, "No, can you tell me about the institution?").unwrap().reply.unwrap();
        assert_eq!(r.intent, DialogueIntent::P4g(P4gStrategy::CredibilityAppeal));
    }

    #[test]
    fn empty_input_changes_nothing() {
        let (e, store, _) = engine(MockScript::constant("Sure."));
        let s = e.create_session(TaskKind::P4g, fixed()).unwrap().session_id;
        let before = store.load(&s).unwrap().unwrap();
        assert!(matches!(e.user_message(&s, "   "), Err(EngineError::EmptyInput)));
        assert_eq!(store.load(&s).unwrap().unwrap(), before);
    }

    #[test]
    fn factual_question_uses_knowledge() {
        let (e, store, _) = engine(MockScript::constant(" They have helped millions of children."));
        let s = e.create_session(TaskKind::P4g, fixed()).unwrap().session_id;
        let r = e.user_message(&s, "Where is Save the Children headquartered?").unwrap().reply.unwrap();
        assert!(r.retrieval_used);
        assert_eq!(
            r.text,
            "Save the Children is headquartered in London. They have helped millions of children."
        );
        let events = store.load(&s).unwrap().unwrap();
        assert!(events.iter().any(|ev| matches!(ev.kind, EventKind::RetrievalUsed { .. })));
        let prompt = events
            .iter()
            .rev()
            .find_map(|ev| match &ev.kind {
                EventKind::PromptBuilt { prompt } => Some(prompt.clone()),
                _ => None,
            })
            .unwrap();
        assert!(prompt.ends_with("\nPersuader: Save the Children is headquartered in London."));
    }

    #[test]
    fn rule_based_preempts_without_advancing() {
        let (e, _, _) = engine(MockScript::constant("Sure."));
        let policy = PolicyKind::RuleBased(RuleSet::rap_like(default_p4g_ordering()));
        let s = e.create_session(TaskKind::P4g, policy).unwrap().session_id;
        let r = e.user_message(&s, "How long has Save the Children been around?").unwrap().reply.unwrap();
        assert_eq!(r.intent, DialogueIntent::P4g(P4gStrategy::CredibilityAppeal));
        let r = e.user_message(&s, "ok").unwrap().reply.unwrap();
        assert_eq!(r.intent, DialogueIntent::P4g(P4gStrategy::SourceRelatedInquiry));
    }

    #[test]
    fn failed_turn_keeps_only_error() {
        let script = MockScript {
            by_ordinal: vec!["Hi.".into()],
            ..MockScript::default()
        };
        let (e, store, _) = engine(script);
        let s = e.create_session(TaskKind::P4g, fixed()).unwrap().session_id;
        let err = e.user_message(&s, "hello").unwrap_err();
        assert!(err.is_retriable());
        let state = e.session(&s).unwrap();
        assert_eq!(state.history.len(), 1);
        let last = store.load(&s).unwrap().unwrap().pop().unwrap();
        assert!(matches!(last.kind, EventKind::Error { retriable: true, .. }));
        assert_eq!(SessionState::replay(&s, &store.load(&s).unwrap().unwrap()).unwrap(), state);
    }

    #[test]
    fn empty_generation_retried_once() {
        let (e, _, _) = engine(MockScript::ordinal(["Hi.", "   ", "Second try."]));
        let s = e.create_session(TaskKind::P4g, fixed()).unwrap().session_id;
        assert_eq!(e.user_message(&s, "hello").unwrap().reply.unwrap().text, "Second try.");
    }

    #[test]
    fn closing_then_message_closes() {
        let (e, _, _) = engine(MockScript::constant("Bye."));
        let ordering = IntentOrdering::new(vec![
            DialogueIntent::P4g(P4gStrategy::Greeting),
            DialogueIntent::P4g(P4gStrategy::Closing),
        ])
        .unwrap();
        let s = e.create_session(TaskKind::P4g, PolicyKind::FixedOrdering(ordering)).unwrap().session_id;
        let r = e.user_message(&s, "hi").unwrap();
        assert_eq!(r.reply.unwrap().intent, CLOSING);
        assert!(e.session(&s).unwrap().rating_unlocked(8));
        let r = e.user_message(&s, "bye").unwrap();
        assert!(r.session_closed && r.reply.is_none());
        assert!(matches!(e.user_message(&s, "again"), Err(EngineError::SessionClosed)));
    }

    #[test]
    fn idle_timeout_closes() {
        let (e, _, clock) = engine(MockScript::constant("Hi."));
        let s = e.create_session(TaskKind::P4g, fixed()).unwrap().session_id;
        clock.advance(chrono::Duration::minutes(11));
        assert!(matches!(e.user_message(&s, "hello"), Err(EngineError::SessionClosed)));
        assert_eq!(
            e.session(&s).unwrap().status,
            SessionStatus::Closed {
                reason: CloseReason::IdleTimeout
            }
        );
    }

    #[test]
    fn unknown_session() {
        let (e, _, _) = engine(MockScript::constant("Hi."));
        assert!(matches!(e.export_transcript("nope"), Err(EngineError::UnknownSession(_))));
        assert!(matches!(e.user_message("nope", "x"), Err(EngineError::UnknownSession(_))));
    }

    #[test]
    fn restart_rebuilds_from_log() {
        let store = Arc::new(MemoryEventStore::new());
        let make = |store: Arc<MemoryEventStore>| {
            DialogueEngine::new(
                Arc::new(MockBackend::new(MockScript::constant("Sure."))),
                Lexicon::default(),
                EngineSettings::default(),
                store,
            )
        };
        let first = make(store.clone());
        let s = first.create_session(TaskKind::P4g, fixed()).unwrap().session_id;
        first.user_message(&s, "hello").unwrap();
        let second = make(store);
        assert_eq!(second.session(&s).unwrap(), first.session(&s).unwrap());
        let r = second.user_message(&s, "tell me more").unwrap().reply.unwrap();
        assert_eq!(r.intent, DialogueIntent::P4g(P4gStrategy::CredibilityAppeal));
    }
}
