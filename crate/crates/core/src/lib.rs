//! Prompt-driven response generation for mixed-initiative dialogue.
//!
//! A policy planner picks the next system intent; the prompt compiler turns
//! the task background, the annotated history, and that intent into a
//! completion prompt; a completion backend writes the utterance. The same
//! pieces drive static evaluation against corpus ground truth.

pub mod config;
pub mod corpus;
pub mod credentials;
pub mod engine;
pub mod eval;
pub mod generation;
pub mod intent;
pub mod interactive;
pub mod lexicon;
pub mod policy;
pub mod prompt;
pub mod retrieval;

pub use corpus::{load_corpus, sample_eval_turns, Conversation, Corpus, CorpusError, EvalInstance, SituationMetadata, Turn};
pub use intent::{DialogueIntent, EscStrategy, P4gStrategy, SpeakerRole, SpeakerSide, TaskKind};
pub use lexicon::{IntentDirective, Lexicon, LexiconError, ACKNOWLEDGEMENT_PREFIX};
pub use policy::{default_p4g_ordering, next_intent, IntentOrdering, PlannerState, PolicyError, PolicyKind, RuleSet};
pub use prompt::{build_prompt, build_task_background, render_history, GenerationTarget, PromptDocument, PromptError};
pub use credentials::{ApiKey, CredentialsError, CredentialsRef};
pub use generation::{
    generate, postprocess, BackendKind, CompletionBackend, DecodingParams, FinishReason, GenerationError,
    GenerationRequest, GenerationResult, MockBackend, MockScript,
};
pub use retrieval::{
    cosine_distance, retrieve, should_trigger_retrieval, Embedder, HashingEmbedder, KnowledgeBase, KnowledgeEntry,
    RetrievalError, RetrievalResult,
};
pub use config::{ConfigError, ServiceConfig};
pub use engine::{
    BotReply, CreatedSession, DialogueEngine, EngineError, EngineSettings, EventKind, EventStore, MessageOutcome,
    SessionEvent, SessionState, Transcript,
};
pub use eval::{distinct_n, make_pairings, win_rates, DistinctLevel, EvalError, MetricReport, RatingRecord, SourceKey};
pub use interactive::{InteractiveRating, RatingLog, RatingSubmission, INTERACTIVE_ITEMS};
