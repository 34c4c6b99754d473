//! Policy planning: choosing the intent of the next system turn.
//!
//! Generation only executes what the planner decides. Three planners are
//! provided: replay of a gold annotation (static evaluation), a fixed
//! strategy ordering, and a rule set that lets a factual user question
//! preempt the ordering for one turn.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::EvalInstance;
use crate::intent::{DialogueIntent, P4gStrategy, TaskKind};

const DEFAULT_ORDERING: &str = include_str!("../assets/p4g_ordering.json");

/// Flag set for the turn being planned when retrieval fires.
pub const FLAG_FACTUAL_QUESTION: &str = "user_asked_factual_question";
/// Set once a Propose Donation turn has been emitted.
pub const FLAG_DONATION_PROPOSED: &str = "donation_proposed";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("strategy ordering must not be empty")]
    EmptyOrdering,
    #[error("`{key}[{index}]`: `{name}` is not a P4G intent")]
    UnknownIntent { key: String, index: usize, name: String },
    #[error("invalid ordering config: {0}")]
    Config(String),
    #[error("policy is for {policy} but the session is {session}")]
    TaskMismatch { policy: TaskKind, session: TaskKind },
    #[error("policy has finished the conversation")]
    PolicyExhausted,
}

/// A non-empty intent sequence for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DialogueIntent>", into = "Vec<DialogueIntent>")]
pub struct IntentOrdering(Vec<DialogueIntent>);

impl IntentOrdering {
    pub fn new(intents: Vec<DialogueIntent>) -> Result<Self, PolicyError> {
        let first = intents.first().ok_or(PolicyError::EmptyOrdering)?;
        if let Some(other) = intents.iter().find(|i| i.task() != first.task()) {
            return Err(PolicyError::TaskMismatch {
                policy: first.task(),
                session: other.task(),
            });
        }
        Ok(Self(intents))
    }

    /// Parses P4G intent names, reporting the offending position under `key`.
    pub fn from_names<S: AsRef<str>>(key: &str, names: &[S]) -> Result<Self, PolicyError> {
        let intents = names
            .iter()
            .enumerate()
            .map(|(index, name)| {
                DialogueIntent::parse(TaskKind::P4g, name.as_ref()).map_err(|_| PolicyError::UnknownIntent {
                    key: key.to_string(),
                    index,
                    name: name.as_ref().to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(intents)
    }

    pub fn intents(&self) -> &[DialogueIntent] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn task(&self) -> TaskKind {
        self.0[0].task()
    }

    /// Element at `index`, clamped to the last one.
    pub fn at_clamped(&self, index: usize) -> DialogueIntent {
        self.0[index.min(self.0.len() - 1)]
    }
}

impl TryFrom<Vec<DialogueIntent>> for IntentOrdering {
    type Error = PolicyError;

    fn try_from(v: Vec<DialogueIntent>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<IntentOrdering> for Vec<DialogueIntent> {
    fn from(o: IntentOrdering) -> Self {
        o.0
    }
}

#[derive(Deserialize)]
struct OrderingFile {
    p4g_ordering: Vec<String>,
}

/// Reads the `p4g_ordering` key from a JSON config document.
pub fn ordering_from_config(raw: &str) -> Result<IntentOrdering, PolicyError> {
    let file: OrderingFile = serde_json::from_str(raw).map_err(|e| PolicyError::Config(e.to_string()))?;
    IntentOrdering::from_names("p4g_ordering", &file.p4g_ordering)
}

/// The shipped P4G ordering. It reconstructs the general flow of a
/// persuasion session (greet, introduce the charity, appeal, ask, close);
/// it is a stand-in, not a published planner.
pub fn default_p4g_ordering() -> IntentOrdering {
    ordering_from_config(DEFAULT_ORDERING).expect("bundled ordering is valid")
}

/// Ordering plus preemption rule for factual questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub id: String,
    pub ordering: IntentOrdering,
    /// Intent used for a turn that answers a factual question.
    pub answer_intent: DialogueIntent,
}

impl RuleSet {
    /// Fixed ordering with one-turn preemption when the user asks a
    /// factual question; ends after the ordering's Closing.
    pub fn rap_like(ordering: IntentOrdering) -> Self {
        Self {
            id: "rap-like".to_string(),
            ordering,
            answer_intent: DialogueIntent::P4g(P4gStrategy::CredibilityAppeal),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Static evaluation only: condition on the annotated intent.
    GroundTruthReplay(Box<EvalInstance>),
    FixedOrdering(IntentOrdering),
    RuleBased(RuleSet),
}

impl PolicyKind {
    pub fn task(&self) -> TaskKind {
        match self {
            PolicyKind::GroundTruthReplay(i) => i.task,
            PolicyKind::FixedOrdering(o) => o.task(),
            PolicyKind::RuleBased(r) => r.ordering.task(),
        }
    }

    pub fn is_interactive(&self) -> bool {
        !matches!(self, PolicyKind::GroundTruthReplay(_))
    }
}

/// Planner bookkeeping owned by one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerState {
    pub task: TaskKind,
    /// Number of system turns so far.
    pub turn_index: usize,
    /// System turns that answered a question instead of advancing the
    /// ordering.
    pub preempted_turns: usize,
    pub last_intent: Option<DialogueIntent>,
    pub flags: BTreeMap<String, bool>,
}

impl PlannerState {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            turn_index: 0,
            preempted_turns: 0,
            last_intent: None,
            flags: BTreeMap::new(),
        }
    }

    pub fn flag(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }

    pub fn set_flag(&mut self, name: &str, value: bool) {
        self.flags.insert(name.to_string(), value);
    }

    /// Position in the ordering, not counting preempting turns.
    pub fn ordering_cursor(&self) -> usize {
        self.turn_index - self.preempted_turns
    }

    /// Advances past a planned system turn.
    pub fn record(&mut self, plan: &Plan) {
        self.turn_index += 1;
        if plan.preempting {
            self.preempted_turns += 1;
        }
        if plan.intent == DialogueIntent::P4g(P4gStrategy::ProposeDonation) {
            self.set_flag(FLAG_DONATION_PROPOSED, true);
        }
        self.set_flag(FLAG_FACTUAL_QUESTION, false);
        self.last_intent = Some(plan.intent);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub intent: DialogueIntent,
    /// The turn answers a question and leaves the ordering cursor in place.
    pub preempting: bool,
}

pub fn plan(state: &PlannerState, policy: &PolicyKind) -> Result<Plan, PolicyError> {
    if policy.task() != state.task {
        return Err(PolicyError::TaskMismatch {
            policy: policy.task(),
            session: state.task,
        });
    }
    let keep = |intent| Plan {
        intent,
        preempting: false,
    };
    match policy {
        PolicyKind::GroundTruthReplay(instance) => Ok(keep(instance.gold_intent)),
        PolicyKind::FixedOrdering(ordering) => Ok(keep(ordering.at_clamped(state.turn_index))),
        PolicyKind::RuleBased(rules) => {
            let closing = DialogueIntent::P4g(P4gStrategy::Closing);
            if state.last_intent == Some(closing) && state.ordering_cursor() >= rules.ordering.len() {
                return Err(PolicyError::PolicyExhausted);
            }
            if state.turn_index > 0 && state.flag(FLAG_FACTUAL_QUESTION) {
                return Ok(Plan {
                    intent: rules.answer_intent,
                    preempting: true,
                });
            }
            Ok(keep(rules.ordering.at_clamped(state.ordering_cursor())))
        }
    }
}

pub fn next_intent(state: &PlannerState, policy: &PolicyKind) -> Result<DialogueIntent, PolicyError> {
    plan(state, policy).map(|p| p.intent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::EscStrategy;

    fn p4g(s: P4gStrategy) -> DialogueIntent {
        DialogueIntent::P4g(s)
    }

    fn state_at(turn_index: usize) -> PlannerState {
        PlannerState {
            turn_index,
            ..PlannerState::new(TaskKind::P4g)
        }
    }

    #[test]
    fn fixed_ordering_indexing_and_clamping() {
        let ordering = IntentOrdering::new(vec![
            p4g(P4gStrategy::Greeting),
            p4g(P4gStrategy::SourceRelatedInquiry),
            p4g(P4gStrategy::CredibilityAppeal),
        ])
        .unwrap();
        let policy = PolicyKind::FixedOrdering(ordering);
        assert_eq!(next_intent(&state_at(1), &policy), Ok(p4g(P4gStrategy::SourceRelatedInquiry)));
        assert_eq!(next_intent(&state_at(7), &policy), Ok(p4g(P4gStrategy::CredibilityAppeal)));
    }

    #[test]
    fn replay_returns_gold() {
        let instance = EvalInstance {
            id: "c#1".into(),
            conversation_id: "c".into(),
            task: TaskKind::Esc,
            metadata: None,
            turn_index: 1,
            history: vec![],
            gold_intent: DialogueIntent::Esc(EscStrategy::Question),
            gold_response: "What happened?".into(),
        };
        let policy = PolicyKind::GroundTruthReplay(Box::new(instance));
        assert_eq!(
            next_intent(&PlannerState::new(TaskKind::Esc), &policy),
            Ok(DialogueIntent::Esc(EscStrategy::Question))
        );
        assert!(!policy.is_interactive());
        assert!(matches!(
            next_intent(&PlannerState::new(TaskKind::P4g), &policy),
            Err(PolicyError::TaskMismatch { .. })
        ));
    }

    #[test]
    fn default_ordering_shape() {
        let o = default_p4g_ordering();
        assert_eq!(o.len(), 9);
        assert_eq!(o.intents()[0], p4g(P4gStrategy::Greeting));
        assert_eq!(o.intents()[8], p4g(P4gStrategy::Closing));
    }

    #[test]
    fn ordering_override_and_validation() {
        let o = ordering_from_config(r#"{"p4g_ordering":["Greeting","Closing"]}"#).unwrap();
        assert_eq!(o.intents(), &[p4g(P4gStrategy::Greeting), p4g(P4gStrategy::Closing)]);
        assert_eq!(
            ordering_from_config(r#"{"p4g_ordering":["Greeting","Bribery"]}"#),
            Err(PolicyError::UnknownIntent {
                key: "p4g_ordering".into(),
                index: 1,
                name: "Bribery".into()
            })
        );
        assert_eq!(ordering_from_config(r#"{"p4g_ordering":[]}"#), Err(PolicyError::EmptyOrdering));
    }

    #[test]
    fn coverage_before_clamping() {
        let ordering = default_p4g_ordering();
        let policy = PolicyKind::FixedOrdering(ordering.clone());
        let mut state = PlannerState::new(TaskKind::P4g);
        let mut emitted = Vec::new();
        for _ in 0..ordering.len() + 3 {
            let p = plan(&state, &policy).unwrap();
            emitted.push(p.intent);
            state.record(&p);
        }
        assert_eq!(&emitted[..ordering.len()], ordering.intents());
        assert!(emitted[ordering.len()..].iter().all(|i| *i == p4g(P4gStrategy::Closing)));
    }

    #[test]
    fn rule_based_preemption_keeps_cursor() {
        let ordering = IntentOrdering::new(vec![
            p4g(P4gStrategy::Greeting),
            p4g(P4gStrategy::EmotionAppeal),
            p4g(P4gStrategy::Closing),
        ])
        .unwrap();
        let policy = PolicyKind::RuleBased(RuleSet::rap_like(ordering));
        let mut state = PlannerState::new(TaskKind::P4g);

        let greet = plan(&state, &policy).unwrap();
        assert_eq!(greet.intent, p4g(P4gStrategy::Greeting));
        state.record(&greet);

        state.set_flag(FLAG_FACTUAL_QUESTION, true);
        let answer = plan(&state, &policy).unwrap();
        assert!(answer.preempting);
        assert_eq!(answer.intent, p4g(P4gStrategy::CredibilityAppeal));
        state.record(&answer);
        assert!(!state.flag(FLAG_FACTUAL_QUESTION));

        let resumed = plan(&state, &policy).unwrap();
        assert_eq!(resumed.intent, p4g(P4gStrategy::EmotionAppeal));
        state.record(&resumed);
        let close = plan(&state, &policy).unwrap();
        assert_eq!(close.intent, p4g(P4gStrategy::Closing));
        state.record(&close);
        assert_eq!(plan(&state, &policy), Err(PolicyError::PolicyExhausted));
    }

    #[test]
    fn donation_flag() {
        let mut state = PlannerState::new(TaskKind::P4g);
        state.record(&Plan {
            intent: p4g(P4gStrategy::ProposeDonation),
            preempting: false,
        });
        assert!(state.flag(FLAG_DONATION_PROPOSED));
    }

    #[test]
    fn plan_is_pure() {
        let policy = PolicyKind::RuleBased(RuleSet::rap_like(default_p4g_ordering()));
        let mut state = state_at(3);
        state.set_flag(FLAG_FACTUAL_QUESTION, true);
        assert_eq!(plan(&state, &policy), plan(&state, &policy));
    }
}
