//! Prompt assembly: task background, rendered conversation history with
//! interleaved intent directives, and the cue line that hands the turn to
//! the system speaker.
//!
//! Layout (single `\n` between lines, one blank line after the background,
//! no trailing newline):
//!
//! ```text
//! <task background>
//!
//! [<directive>]
//! <Label>: <utterance>
//! ...
//! [<target directive>]
//! <SystemLabel>:[ <knowledge>]
//! ```

use serde::{Deserialize, Serialize};

use crate::corpus::{SituationMetadata, Turn};
use crate::intent::{DialogueIntent, SpeakerSide, TaskKind};
use crate::lexicon::{Lexicon, LexiconError};

/// Fixed P4G task background.
pub const P4G_TASK_BACKGROUND: &str = include_str!("../assets/p4g_background.txt");

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("ESC prompts need situation metadata")]
    MissingMetadata,
    #[error("P4G prompts take no situation metadata")]
    UnexpectedMetadata,
    #[error("system-side turn {index} has no intent")]
    MissingIntent { index: usize },
    #[error("intent `{intent}` belongs to {found}, not {expected}")]
    TaskMismatch {
        intent: DialogueIntent,
        expected: TaskKind,
        found: TaskKind,
    },
    #[error("invalid generation target: {0}")]
    InvalidTarget(&'static str),
}

/// What the next system utterance should do.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationTarget {
    pub intent: DialogueIntent,
    /// Prefix the directive with the acknowledgement instruction (P4G only).
    pub acknowledge: bool,
    /// Retrieved answer to seed the system utterance with (P4G only).
    pub knowledge: Option<String>,
}

impl GenerationTarget {
    pub fn plain(intent: DialogueIntent) -> Self {
        Self {
            intent,
            acknowledge: false,
            knowledge: None,
        }
    }
}

/// A prompt split into its parts. `render` joins them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDocument {
    pub task_background: String,
    pub history_lines: Vec<String>,
    pub target_directive: Option<String>,
    pub cue_line: String,
}

impl PromptDocument {
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(
            self.task_background.len() + self.history_lines.iter().map(|l| l.len() + 1).sum::<usize>() + 128,
        );
        out.push_str(&self.task_background);
        out.push_str("\n\n");
        for line in &self.history_lines {
            out.push_str(line);
            out.push('\n');
        }
        if let Some(directive) = &self.target_directive {
            out.push_str(directive);
            out.push('\n');
        }
        out.push_str(&self.cue_line);
        out
    }
}

/// ESC background built from the corpus situation annotations; P4G uses the
/// fixed charity background.
pub fn build_task_background(task: TaskKind, metadata: Option<&SituationMetadata>) -> Result<String, PromptError> {
    match (task, metadata) {
        (TaskKind::Esc, Some(m)) => Ok(format!(
            "The following is a conversation between a Therapist and a Patient about {} regarding {}. Patient's situation: {}",
            m.emotion_type.trim(),
            m.problem_type.trim(),
            m.situation.trim()
        )),
        (TaskKind::Esc, None) => Err(PromptError::MissingMetadata),
        (TaskKind::P4g, None) => Ok(P4G_TASK_BACKGROUND.to_string()),
        (TaskKind::P4g, Some(_)) => Err(PromptError::UnexpectedMetadata),
    }
}

/// One directive line (when the intent has one) followed by a labeled
/// utterance per turn; user turns get only the labeled line.
pub fn render_history(task: TaskKind, turns: &[Turn], lexicon: &Lexicon) -> Result<Vec<String>, PromptError> {
    let mut lines = Vec::with_capacity(turns.len() * 2);
    for (index, turn) in turns.iter().enumerate() {
        if turn.side == SpeakerSide::System {
            let intent = turn.intent.ok_or(PromptError::MissingIntent { index })?;
            check_task(task, intent)?;
            if let Some(text) = lexicon.directive_for(intent).text {
                lines.push(text);
            }
        }
        lines.push(format!("{}: {}", turn.role(task).display_label(), turn.text));
    }
    Ok(lines)
}

fn check_task(task: TaskKind, intent: DialogueIntent) -> Result<(), PromptError> {
    if intent.task() != task {
        return Err(PromptError::TaskMismatch {
            intent,
            expected: task,
            found: intent.task(),
        });
    }
    Ok(())
}

pub fn build_prompt_document(
    task: TaskKind,
    metadata: Option<&SituationMetadata>,
    history: &[Turn],
    target: &GenerationTarget,
    lexicon: &Lexicon,
) -> Result<PromptDocument, PromptError> {
    check_task(task, target.intent)?;
    if task != TaskKind::P4g && (target.acknowledge || target.knowledge.is_some()) {
        return Err(PromptError::InvalidTarget("acknowledgement and knowledge are P4G-only"));
    }
    let task_background = build_task_background(task, metadata)?;
    let history_lines = render_history(task, history, lexicon)?;

    let directive = lexicon.directive_for(target.intent);
    let directive = if target.acknowledge && directive.is_present() {
        directive.with_acknowledgement().map_err(|e| match e {
            LexiconError::NotApplicable(why) => PromptError::InvalidTarget(why),
            _ => PromptError::InvalidTarget("acknowledgement failed"),
        })?
    } else {
        directive
    };

    let label = task.system_label();
    let cue_line = match target.knowledge.as_deref().map(str::trim) {
        Some(k) if !k.is_empty() => format!("{label}: {k}"),
        _ => format!("{label}:"),
    };
    Ok(PromptDocument {
        task_background,
        history_lines,
        target_directive: directive.text,
        cue_line,
    })
}

pub fn build_prompt(
    task: TaskKind,
    metadata: Option<&SituationMetadata>,
    history: &[Turn],
    target: &GenerationTarget,
    lexicon: &Lexicon,
) -> Result<String, PromptError> {
    build_prompt_document(task, metadata, history, target, lexicon).map(|d| d.render())
}
