//! Closed enumerations of the two tasks, their speaker roles, and the
//! system-side dialogue intents annotated in each corpus.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The two supported mixed-initiative tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    /// Emotional support conversations.
    #[serde(rename = "ESC")]
    Esc,
    /// Persuasion for a charity donation.
    #[serde(rename = "P4G")]
    P4g,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::Esc, TaskKind::P4g];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Esc => "ESC",
            TaskKind::P4g => "P4G",
        }
    }

    pub fn system_label(self) -> &'static str {
        SpeakerRole::new(self, SpeakerSide::System).display_label()
    }

    pub fn user_label(self) -> &'static str {
        SpeakerRole::new(self, SpeakerSide::User).display_label()
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown task `{0}` (expected ESC or P4G)")]
pub struct UnknownTask(pub String);

impl FromStr for TaskKind {
    type Err = UnknownTask;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ESC" => Ok(TaskKind::Esc),
            "P4G" => Ok(TaskKind::P4g),
            _ => Err(UnknownTask(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerSide {
    /// Supporter / persuader: the side the system plays.
    System,
    /// Help-seeker / persuadee.
    User,
}

/// A speaker as rendered in prompts. The label is fixed by task and side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpeakerRole {
    pub task: TaskKind,
    pub side: SpeakerSide,
}

impl SpeakerRole {
    pub fn new(task: TaskKind, side: SpeakerSide) -> Self {
        Self { task, side }
    }

    pub fn display_label(&self) -> &'static str {
        match (self.task, self.side) {
            (TaskKind::Esc, SpeakerSide::System) => "Therapist",
            (TaskKind::Esc, SpeakerSide::User) => "Patient",
            (TaskKind::P4g, SpeakerSide::System) => "Persuader",
            (TaskKind::P4g, SpeakerSide::User) => "Persuadee",
        }
    }
}

macro_rules! strategy_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Canonical annotation label.
            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            pub fn from_label(label: &str) -> Option<Self> {
                match label {
                    $($label => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

strategy_enum! {
    /// Emotional support strategies annotated on supporter turns.
    EscStrategy {
        Question => "Question",
        RestatementOrParaphrasing => "Restatement or Paraphrasing",
        ReflectionOfFeelings => "Reflection of feelings",
        SelfDisclosure => "Self-disclosure",
        AffirmationAndReassurance => "Affirmation and Reassurance",
        ProvidingSuggestions => "Providing Suggestions",
        Information => "Information",
        Others => "Others",
    }
}

strategy_enum! {
    /// Persuasion strategies annotated on persuader turns, plus the
    /// greeting and closing acts.
    P4gStrategy {
        PersonalStory => "Personal Story",
        CredibilityAppeal => "Credibility Appeal",
        EmotionAppeal => "Emotion Appeal",
        ProposeDonation => "Propose Donation",
        FootInTheDoor => "Foot-in-the-door",
        LogicalAppeal => "Logical Appeal",
        SelfModeling => "Self-modeling",
        TaskRelatedInquiry => "Task-related inquiry",
        SourceRelatedInquiry => "Source-related inquiry",
        PersonalRelatedInquiry => "Personal-related-inquiry",
        Greeting => "Greeting",
        Closing => "Closing",
    }
}

/// A system-side dialogue intent. The task is implied by the variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DialogueIntent {
    Esc(EscStrategy),
    P4g(P4gStrategy),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("`{label}` is not a {task} dialogue intent")]
pub struct UnknownIntent {
    pub task: TaskKind,
    pub label: String,
}

impl DialogueIntent {
    pub fn task(self) -> TaskKind {
        match self {
            DialogueIntent::Esc(_) => TaskKind::Esc,
            DialogueIntent::P4g(_) => TaskKind::P4g,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DialogueIntent::Esc(s) => s.label(),
            DialogueIntent::P4g(s) => s.label(),
        }
    }

    /// Parses an exact annotation label for the given task.
    pub fn parse(task: TaskKind, label: &str) -> Result<Self, UnknownIntent> {
        let found = match task {
            TaskKind::Esc => EscStrategy::from_label(label).map(DialogueIntent::Esc),
            TaskKind::P4g => P4gStrategy::from_label(label).map(DialogueIntent::P4g),
        };
        found.ok_or_else(|| UnknownIntent {
            task,
            label: label.to_string(),
        })
    }

    /// Every intent of a task in declaration order.
    pub fn all(task: TaskKind) -> Vec<DialogueIntent> {
        match task {
            TaskKind::Esc => EscStrategy::ALL.iter().copied().map(DialogueIntent::Esc).collect(),
            TaskKind::P4g => P4gStrategy::ALL.iter().copied().map(DialogueIntent::P4g).collect(),
        }
    }
}

impl fmt::Display for DialogueIntent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Serialize, Deserialize)]
struct IntentRepr {
    task: TaskKind,
    name: String,
}

impl Serialize for DialogueIntent {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        IntentRepr {
            task: self.task(),
            name: self.name().to_string(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DialogueIntent {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = IntentRepr::deserialize(deserializer)?;
        DialogueIntent::parse(repr.task, &repr.name).map_err(serde::de::Error::custom)
    }
}
