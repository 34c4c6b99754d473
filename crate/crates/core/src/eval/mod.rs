//! Static evaluation: candidate generation from ground truth, external
//! fine-tuned outputs and prompting; Distinct-N; pairwise rating sheets;
//! win rates; significance marks; report assembly.

mod candidates;
mod coherence;
mod distinct;
mod pairing;
mod ratings;
mod report;
mod stats;

pub use candidates::{generate_candidates, load_fine_tuned, Candidate, CandidateSource, CandidateTable, PromptedSetup, SourceKey};
pub use coherence::{CoherenceScorer, HttpCoherenceScorer};
pub use distinct::{distinct_n, tokenize, DistinctLevel};
pub use pairing::{make_pairings, write_pairing_sheet, PairingJob, PresentedOrder};
pub use ratings::{read_ratings, win_rates, write_ratings, Criterion, RatingRecord, RatingValue, Side, WinCell, WinRates};
pub use report::{build_report, MetricReport, ReportOptions, SourceMetrics, WinRateEntry};
pub use stats::{two_proportion_z_rates, two_proportion_z_test, welch_t_test, TestResult};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("input is empty")]
    EmptyInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fine-tuned responses have no entry for instance {0}")]
    MissingFineTunedResponse(String),
    #[error("no preference ratings compare {a} with {b}")]
    NoData { a: SourceKey, b: SourceKey },
    #[error("need at least 2 samples per group, got {left} and {right}")]
    InsufficientSamples { left: usize, right: usize },
    #[error("ratings line {line}: {message}")]
    InvalidRating { line: usize, message: String },
    #[error("coherence scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Prompt(#[from] crate::prompt::PromptError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}
