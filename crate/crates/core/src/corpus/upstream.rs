//! Adapters from the upstream release formats.
//!
//! ESConv ships a JSON array of conversations whose `dialog` entries carry
//! `speaker` (`seeker`/`supporter`), `content`, and `annotation.strategy`.
//! Consecutive supporter utterances stay separate turns, each with its own
//! strategy.
//!
//! PersuasionForGood's annotated dialogs are read from a CSV export of the
//! annotation sheet: one row per sentence (`Unit`), grouped into turns by
//! `B2` (dialog id), `Turn`, and `B4` (0 = persuader, 1 = persuadee), with the
//! persuader strategy in `er_label_1`. A persuader turn is split at each
//! labeled sentence; unlabeled sentences join the segment before them (or
//! the first labeled one when they lead the turn).

use serde::Deserialize;

use super::{check_unique_ids, validate_conversation, Conversation, Corpus, CorpusError, SituationMetadata, Turn};
use crate::intent::{DialogueIntent, P4gStrategy, SpeakerSide, TaskKind};

/// Upstream hyphenated P4G strategy labels and their canonical intents.
pub const UPSTREAM_P4G_LABELS: &[(&str, P4gStrategy)] = &[
    ("personal-story", P4gStrategy::PersonalStory),
    ("credibility-appeal", P4gStrategy::CredibilityAppeal),
    ("emotion-appeal", P4gStrategy::EmotionAppeal),
    ("proposition-of-donation", P4gStrategy::ProposeDonation),
    ("foot-in-the-door", P4gStrategy::FootInTheDoor),
    ("logical-appeal", P4gStrategy::LogicalAppeal),
    ("self-modeling", P4gStrategy::SelfModeling),
    ("task-related-inquiry", P4gStrategy::TaskRelatedInquiry),
    ("source-related-inquiry", P4gStrategy::SourceRelatedInquiry),
    ("personal-related-inquiry", P4gStrategy::PersonalRelatedInquiry),
    ("greeting", P4gStrategy::Greeting),
    ("closing", P4gStrategy::Closing),
];

/// Resolves an upstream or canonical P4G label.
pub fn p4g_upstream_label(label: &str) -> Option<P4gStrategy> {
    P4gStrategy::from_label(label).or_else(|| {
        let lower = label.trim().to_ascii_lowercase();
        UPSTREAM_P4G_LABELS
            .iter()
            .find(|(l, _)| *l == lower)
            .map(|(_, s)| *s)
    })
}

#[derive(Deserialize)]
struct EsconvConversation {
    emotion_type: String,
    problem_type: String,
    situation: String,
    dialog: Vec<EsconvUtterance>,
}

#[derive(Deserialize)]
struct EsconvUtterance {
    speaker: String,
    content: String,
    #[serde(default)]
    annotation: EsconvAnnotation,
}

#[derive(Deserialize, Default)]
struct EsconvAnnotation {
    strategy: Option<String>,
}

pub(super) fn parse_esconv(value: serde_json::Value) -> Result<Corpus, CorpusError> {
    let items = match value {
        serde_json::Value::Array(items) => items,
        _ => unreachable!("dispatched on array shape"),
    };
    let mut conversations = Vec::with_capacity(items.len());
    for (ci, item) in items.into_iter().enumerate() {
        let location = format!("[{ci}]");
        let raw: EsconvConversation = serde_json::from_value(item)
            .map_err(|e| CorpusError::schema(location.clone(), e.to_string()))?;
        let id = format!("esconv-{ci:04}");
        let mut turns = Vec::with_capacity(raw.dialog.len());
        for (ti, u) in raw.dialog.into_iter().enumerate() {
            let at = || format!("[{ci}].dialog[{ti}]");
            let side = match u.speaker.as_str() {
                "supporter" => SpeakerSide::System,
                "seeker" => SpeakerSide::User,
                other => return Err(CorpusError::schema(at(), format!("unknown speaker `{other}`"))),
            };
            let intent = match side {
                SpeakerSide::User => None,
                SpeakerSide::System => {
                    let label = u
                        .annotation
                        .strategy
                        .ok_or_else(|| CorpusError::schema(at(), "supporter utterance has no strategy"))?;
                    Some(DialogueIntent::parse(TaskKind::Esc, &label).map_err(|_| {
                        CorpusError::UnknownIntentLabel {
                            label,
                            conversation_id: id.clone(),
                        }
                    })?)
                }
            };
            turns.push(Turn::new(side, &u.content, intent).map_err(|e| CorpusError::schema(at(), e.to_string()))?);
        }
        let conversation = Conversation {
            id,
            task: TaskKind::Esc,
            metadata: Some(SituationMetadata {
                emotion_type: raw.emotion_type.trim().to_string(),
                problem_type: raw.problem_type.trim().to_string(),
                situation: raw.situation.trim().to_string(),
            }),
            turns,
        };
        validate_conversation(&conversation, &location)?;
        conversations.push(conversation);
    }
    Ok(Corpus {
        task: TaskKind::Esc,
        conversations,
    })
}

#[derive(Deserialize)]
struct P4gRow {
    #[serde(rename = "B2")]
    dialog_id: String,
    #[serde(rename = "B4")]
    role: String,
    #[serde(rename = "Turn")]
    turn: String,
    #[serde(rename = "Unit")]
    unit: String,
    #[serde(rename = "er_label_1", default)]
    er_label: Option<String>,
}

struct Segment {
    text: Vec<String>,
    label: Option<String>,
}

pub(super) fn parse_p4g_csv(raw: &str) -> Result<Corpus, CorpusError> {
    let mut reader = csv::Reader::from_reader(raw.as_bytes());
    let mut conversations: Vec<Conversation> = Vec::new();
    // (dialog id, turn number, role) of the turn being accumulated
    let mut current_key: Option<(String, String, String)> = None;
    let mut pending: Vec<(String, Option<String>)> = Vec::new();

    for (ri, row) in reader.deserialize::<P4gRow>().enumerate() {
        // Header is line 1.
        let line = ri + 2;
        let row = row.map_err(|e| CorpusError::schema(format!("line {line}"), e.to_string()))?;
        let key = (row.dialog_id.clone(), row.turn.clone(), row.role.clone());
        if current_key.as_ref() != Some(&key) {
            if let Some(prev) = current_key.take() {
                flush_p4g_turn(&mut conversations, prev, std::mem::take(&mut pending), line)?;
            }
            current_key = Some(key);
        }
        let label = row
            .er_label
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty() && !l.eq_ignore_ascii_case("nan"));
        pending.push((row.unit, label));
    }
    if let Some(prev) = current_key.take() {
        flush_p4g_turn(&mut conversations, prev, pending, 0)?;
    }
    let corpus = Corpus {
        task: TaskKind::P4g,
        conversations,
    };
    for (i, c) in corpus.conversations.iter().enumerate() {
        validate_conversation(c, &format!("dialog {} (#{i})", c.id))?;
    }
    check_unique_ids(&corpus)?;
    Ok(corpus)
}

fn flush_p4g_turn(
    conversations: &mut Vec<Conversation>,
    (dialog_id, _turn, role): (String, String, String),
    sentences: Vec<(String, Option<String>)>,
    line: usize,
) -> Result<(), CorpusError> {
    let side = match role.trim() {
        "0" => SpeakerSide::System,
        "1" => SpeakerSide::User,
        other => {
            return Err(CorpusError::schema(
                format!("before line {line}"),
                format!("unknown B4 role `{other}` in dialog `{dialog_id}`"),
            ))
        }
    };
    if conversations.last().map(|c| c.id.as_str()) != Some(dialog_id.as_str()) {
        conversations.push(Conversation {
            id: dialog_id.clone(),
            task: TaskKind::P4g,
            metadata: None,
            turns: Vec::new(),
        });
    }
    let conversation = conversations.last_mut().expect("pushed above");

    if side == SpeakerSide::User {
        let text = join_sentences(sentences.iter().map(|(s, _)| s.as_str()));
        if !text.is_empty() {
            conversation.turns.push(Turn::user(text).expect("non-empty"));
        }
        return Ok(());
    }

    let mut segments: Vec<Segment> = Vec::new();
    let mut leading: Vec<String> = Vec::new();
    for (sentence, label) in sentences {
        match label {
            Some(label) => {
                let mut text = std::mem::take(&mut leading);
                text.push(sentence);
                segments.push(Segment { text, label: Some(label) });
            }
            None => match segments.last_mut() {
                Some(seg) => seg.text.push(sentence),
                None => leading.push(sentence),
            },
        }
    }
    if segments.is_empty() {
        return Err(CorpusError::schema(
            format!("before line {line}"),
            format!("persuader turn in dialog `{dialog_id}` has no strategy label"),
        ));
    }
    for seg in segments {
        let label = seg.label.expect("segments start at a labeled sentence");
        let strategy = p4g_upstream_label(&label).ok_or_else(|| CorpusError::UnknownIntentLabel {
            label: label.clone(),
            conversation_id: dialog_id.clone(),
        })?;
        let text = join_sentences(seg.text.iter().map(String::as_str));
        if text.is_empty() {
            continue;
        }
        conversation
            .turns
            .push(Turn::system(text, DialogueIntent::P4g(strategy)).expect("non-empty"));
    }
    Ok(())
}

fn join_sentences<'a>(parts: impl Iterator<Item = &'a str>) -> String {
    parts
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus_json;
    use crate::intent::EscStrategy;

    #[test]
    fn esconv_export() {
        let raw = r#"[{"experience_type":"Previous Experience","emotion_type":"anxiety","problem_type":"job crisis",
            "situation":"I lost my job.","survey_score":{},
            "dialog":[
              {"speaker":"seeker","annotation":{},"content":"Hello\n"},
              {"speaker":"supporter","annotation":{"strategy":"Question"},"content":"What happened?"},
              {"speaker":"supporter","annotation":{"strategy":"Others"},"content":"Take your time."}
            ]}]"#;
        let corpus = parse_corpus_json(raw, TaskKind::Esc).unwrap();
        let c = &corpus.conversations[0];
        assert_eq!(c.turns.len(), 3);
        assert_eq!(c.turns[0].text, "Hello");
        assert_eq!(c.turns[1].intent, Some(DialogueIntent::Esc(EscStrategy::Question)));
        assert_eq!(c.turns[2].intent, Some(DialogueIntent::Esc(EscStrategy::Others)));
        assert_eq!(c.metadata.as_ref().unwrap().problem_type, "job crisis");
    }

    #[test]
    fn esconv_unknown_strategy() {
        let raw = r#"[{"emotion_type":"a","problem_type":"b","situation":"c",
            "dialog":[{"speaker":"supporter","annotation":{"strategy":"Qestion"},"content":"x"}]}]"#;
        match parse_corpus_json(raw, TaskKind::Esc) {
            Err(CorpusError::UnknownIntentLabel { label, conversation_id }) => {
                assert_eq!(label, "Qestion");
                assert_eq!(conversation_id, "esconv-0000");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn p4g_csv_segments() {
        let raw = "\
B2,B4,Turn,Unit,er_label_1
d1,0,0,Hello!,greeting
d1,0,0,How are you?,
d1,1,0,Good thanks.,
d1,0,1,They are great.,credibility-appeal
d1,0,1,Would you donate?,proposition-of-donation
d2,0,0,Hi.,Greeting
";
        let corpus = parse_p4g_csv(raw).unwrap();
        assert_eq!(corpus.conversations.len(), 2);
        let t = &corpus.conversations[0].turns;
        assert_eq!(t.len(), 4);
        assert_eq!(t[0].text, "Hello! How are you?");
        assert_eq!(t[0].intent, Some(DialogueIntent::P4g(P4gStrategy::Greeting)));
        assert_eq!(t[1].side, SpeakerSide::User);
        assert_eq!(t[3].intent, Some(DialogueIntent::P4g(P4gStrategy::ProposeDonation)));
    }

    #[test]
    fn p4g_csv_unknown_label() {
        let raw = "B2,B4,Turn,Unit,er_label_1\nd9,0,0,ok,praise-user\n";
        assert!(matches!(
            parse_p4g_csv(raw),
            Err(CorpusError::UnknownIntentLabel { ref label, ref conversation_id }) if label == "praise-user" && conversation_id == "d9"
        ));
    }

    #[test]
    fn p4g_csv_unlabeled_persuader_turn() {
        let raw = "B2,B4,Turn,Unit,er_label_1\nd9,0,0,ok,\n";
        assert!(matches!(parse_p4g_csv(raw), Err(CorpusError::Schema { .. })));
    }
}
