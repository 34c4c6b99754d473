//! Cross-module invariants checked with generated inputs and independent
//! oracles.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use mixinit_core::corpus::parse_corpus_json;
use mixinit_core::engine::{EventKind, MemoryEventStore, SequentialIds, SteppingClock};
use mixinit_core::eval::{
    build_report, tokenize, Candidate, CandidateTable, Criterion, PresentedOrder, ReportOptions, RatingValue, Side,
};
use mixinit_core::retrieval::{EmbedError, QaPair};
use mixinit_core::{
    cosine_distance, distinct_n, make_pairings, next_intent, render_history, retrieve, sample_eval_turns, win_rates,
    Conversation, Corpus, DialogueEngine, DialogueIntent, DistinctLevel, Embedder, EngineSettings, EvalInstance,
    EventStore, HashingEmbedder, IntentOrdering, KnowledgeBase, KnowledgeEntry, Lexicon, MockBackend,
    MockScript, P4gStrategy, PlannerState, PolicyKind, RatingRecord, SessionState, SourceKey, TaskKind, Turn,
};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------- corpus ----------

fn arb_corpus() -> impl Strategy<Value = Corpus> {
    let intents = DialogueIntent::all(TaskKind::P4g);
    let turn = (any::<bool>(), 0..intents.len(), "[A-Za-z][A-Za-z ,.?']{0,20}");
    prop::collection::vec(prop::collection::vec(turn, 1..8), 1..5).prop_map(move |convs| Corpus {
        task: TaskKind::P4g,
        conversations: convs
            .into_iter()
            .enumerate()
            .map(|(ci, turns)| Conversation {
                id: format!("c{ci}"),
                task: TaskKind::P4g,
                metadata: None,
                turns: turns
                    .into_iter()
                    .map(|(system, i, text)| {
                        if system {
                            Turn::system(&text, intents[i]).unwrap()
                        } else {
                            Turn::user(&text).unwrap()
                        }
                    })
                    .collect(),
            })
            .collect(),
    })
}

proptest! {
    #[test]
    fn corpus_round_trips_through_json(corpus in arb_corpus()) {
        let again = parse_corpus_json(&corpus.to_json(), TaskKind::P4g).unwrap();
        prop_assert_eq!(&again, &corpus);
        for c in &again.conversations {
            for t in &c.turns {
                if let Some(intent) = t.intent {
                    prop_assert_eq!(intent.task(), TaskKind::P4g);
                }
            }
        }
    }
}

#[test]
fn sampling_differs_across_seeds() {
    let intents = DialogueIntent::all(TaskKind::P4g);
    let corpus = Corpus {
        task: TaskKind::P4g,
        conversations: (0..50)
            .map(|c| Conversation {
                id: format!("c{c}"),
                task: TaskKind::P4g,
                metadata: None,
                turns: (0..10)
                    .flat_map(|i| [Turn::system(format!("s{i}"), intents[i % 12]).unwrap(), Turn::user(format!("u{i}")).unwrap()])
                    .collect(),
            })
            .collect(),
    };
    let samples: HashSet<Vec<String>> = (0..20)
        .map(|seed| sample_eval_turns(&corpus, 30, seed).unwrap().into_iter().map(|i| i.id).collect())
        .collect();
    assert_eq!(samples.len(), 20);
}

// ---------- policy ----------

fn p4g(s: P4gStrategy) -> DialogueIntent {
    DialogueIntent::P4g(s)
}

proptest! {
    #[test]
    fn fixed_ordering_covers_every_intent_then_clamps(picks in prop::collection::vec(0usize..12, 1..10), extra in 0usize..5) {
        let all = DialogueIntent::all(TaskKind::P4g);
        let ordering = IntentOrdering::new(picks.iter().map(|&i| all[i]).collect()).unwrap();
        let policy = PolicyKind::FixedOrdering(ordering.clone());
        let mut state = PlannerState::new(TaskKind::P4g);
        let mut emitted = Vec::new();
        for _ in 0..ordering.len() + extra {
            let intent = next_intent(&state, &policy).unwrap();
            prop_assert_eq!(next_intent(&state, &policy).unwrap(), intent, "pure function of its inputs");
            emitted.push(intent);
            state.turn_index += 1;
            state.last_intent = Some(intent);
        }
        prop_assert_eq!(&emitted[..ordering.len()], ordering.intents());
        prop_assert!(emitted[ordering.len()..].iter().all(|i| i == ordering.intents().last().unwrap()));
    }
}

#[test]
fn ground_truth_replay_reproduces_corpus_intents() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let corpus = arb_corpus().new_tree(&mut runner).unwrap().current();
    for (ci, c) in corpus.conversations.iter().enumerate() {
        for (ti, t) in c.turns.iter().enumerate() {
            let Some(gold) = t.intent else { continue };
            let instance = corpus.instance_at(ci, ti).unwrap();
            let policy = PolicyKind::GroundTruthReplay(Box::new(instance));
            assert_eq!(next_intent(&PlannerState::new(TaskKind::P4g), &policy).unwrap(), gold);
        }
    }
}

// ---------- retrieval ----------

/// Looks query vectors up by text.
struct TableEmbedder {
    dimension: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl Embedder for TableEmbedder {
    fn name(&self) -> &str {
        "table"
    }
    fn dimension(&self) -> usize {
        self.dimension
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        Ok(self.vectors[text].clone())
    }
}

/// Plain cosine distance, clamped, written independently of the library.
pub fn oracle_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

pub fn oracle_nearest(query: &[f64], kb: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, v) in kb.iter().enumerate() {
        let d = oracle_distance(query, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn kb_from_vectors(vectors: &[Vec<f64>]) -> KnowledgeBase {
    let entries = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| KnowledgeEntry {
            question: format!("q{i}"),
            answer: format!("a{i}"),
            embedding: v.clone(),
        })
        .collect();
    KnowledgeBase::from_entries("table", entries).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn retrieval_agrees_with_exhaustive_scan(seed in any::<u64>(), size in 1usize..200, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 16;
        let vectors: Vec<Vec<f64>> = (0..size).map(|_| random_vector(&mut rng, dim)).collect();
        let kb = kb_from_vectors(&vectors);
        let scaled = kb_from_vectors(&vectors.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect::<Vec<_>>());
        let query = random_vector(&mut rng, dim);
        let embedder = TableEmbedder { dimension: dim, vectors: HashMap::from([("q".to_string(), query.clone())]) };
        let got = retrieve("q", &kb, &embedder).unwrap();
        let (index, distance) = oracle_nearest(&query, &vectors);
        prop_assert_eq!(got.index, index);
        prop_assert!((got.distance - distance).abs() < 1e-9);
        prop_assert!((0.0..=2.0).contains(&got.distance));
        prop_assert_eq!(retrieve("q", &scaled, &embedder).unwrap().index, index);
    }

    #[test]
    fn cosine_distance_is_bounded_and_symmetric(a in prop::collection::vec(-10.0f64..10.0, 8), b in prop::collection::vec(-10.0f64..10.0, 8)) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-6) && b.iter().any(|x| x.abs() > 1e-6));
        let d = cosine_distance(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert!((d - cosine_distance(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((d - oracle_distance(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn hashing_embedder_finds_paraphrased_question() {
    let embedder = HashingEmbedder::default();
    let kb = KnowledgeBase::build(
        vec![
            QaPair { question: "Where is Save the Children headquartered?".into(), answer: "London.".into() },
            QaPair { question: "How can I donate?".into(), answer: "Online.".into() },
        ],
        &embedder,
    )
    .unwrap();
    assert_eq!(retrieve("where is save the children headquartered", &kb, &embedder).unwrap().index, 0);
}

// ---------- distinct-n ----------

/// Brute force over explicit n-gram vectors.
pub fn oracle_distinct(texts: &[&str], n: usize) -> f64 {
    let mut all = Vec::new();
    for t in texts {
        let tokens = tokenize(t);
        if tokens.len() >= n {
            for i in 0..=tokens.len() - n {
                all.push(tokens[i..i + n].to_vec());
            }
        }
    }
    if all.is_empty() {
        return 1.0;
    }
    let unique: HashSet<&Vec<String>> = all.iter().collect();
    unique.len() as f64 / all.len() as f64
}

proptest! {
    #[test]
    fn distinct_n_matches_brute_force(texts in prop::collection::vec("([a-d]{1,2} ){0,12}", 1..8), n in 1usize..5) {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let got = distinct_n(&refs, n, DistinctLevel::Corpus).unwrap();
        prop_assert_eq!(got, oracle_distinct(&refs, n));
        prop_assert!((0.0..=1.0).contains(&got));
    }
}

// ---------- pairing and win rates ----------

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("i{i:03}")).collect()
}

const SOURCES: [SourceKey; 3] = [SourceKey::GroundTruth, SourceKey::FineTuned, SourceKey::Prompted];

#[test]
fn pairing_left_right_balance_over_large_batch() {
    let jobs = make_pairings(&ids(2000), &SOURCES, 11).unwrap();
    let ab = jobs.iter().filter(|j| j.presented_order == PresentedOrder::AB).count() as f64;
    let p = ab / jobs.len() as f64;
    // 6000 fair coin flips: four standard deviations is about 0.026.
    assert!((p - 0.5).abs() < 0.026, "{p}");
}

proptest! {
    #[test]
    fn each_response_appears_in_exactly_two_pairs(n in 1usize..60, seed in any::<u64>()) {
        let jobs = make_pairings(&ids(n), &SOURCES, seed).unwrap();
        prop_assert_eq!(jobs.len(), 3 * n);
        let mut seen: BTreeMap<(String, SourceKey), usize> = BTreeMap::new();
        for j in &jobs {
            *seen.entry((j.instance_id.clone(), j.source_a)).or_default() += 1;
            *seen.entry((j.instance_id.clone(), j.source_b)).or_default() += 1;
        }
        prop_assert!(seen.values().all(|&c| c == 2));
        prop_assert_eq!(seen.len(), 3 * n);
    }

    #[test]
    fn win_rates_are_complementary(prefs in prop::collection::vec(any::<bool>(), 1..300)) {
        let records: Vec<RatingRecord> = prefs.iter().enumerate().map(|(i, &left)| preference(i, left)).collect();
        let rates = win_rates(&records);
        let ab = rates.win_rate(SourceKey::Prompted, SourceKey::GroundTruth).unwrap();
        let ba = rates.win_rate(SourceKey::GroundTruth, SourceKey::Prompted).unwrap();
        prop_assert_eq!(ab + ba, 1.0);
    }
}

fn preference(i: usize, left_wins: bool) -> RatingRecord {
    RatingRecord {
        pair_id: format!("p{i:05}"),
        instance_id: format!("i{i}"),
        left_source: SourceKey::Prompted,
        right_source: SourceKey::GroundTruth,
        presented_order: PresentedOrder::AB,
        criterion: Criterion::Preference,
        target: None,
        value: RatingValue::Choice(if left_wins { Side::Left } else { Side::Right }),
    }
}

#[test]
fn report_is_deterministic() {
    let instances: Vec<EvalInstance> = (0..5)
        .map(|i| EvalInstance {
            id: format!("i{i}"),
            conversation_id: "c".into(),
            task: TaskKind::P4g,
            metadata: None,
            turn_index: 1,
            history: vec![Turn::user("hello").unwrap()],
            gold_intent: p4g(P4gStrategy::LogicalAppeal),
            gold_response: format!("gold response number {i} about children"),
        })
        .collect();
    let cells = instances
        .iter()
        .map(|i| {
            let row = [SourceKey::GroundTruth, SourceKey::Prompted]
                .into_iter()
                .map(|s| (s, Candidate { text: Some(format!("{s} says {} today", i.id)), error: None, prompt: None }))
                .collect();
            (i.id.clone(), row)
        })
        .collect();
    let table = CandidateTable { instances, sources: vec![SourceKey::GroundTruth, SourceKey::Prompted], cells };
    let mut ratings: Vec<RatingRecord> = (0..40).map(|i| preference(i, i % 3 != 0)).collect();
    ratings.extend((0..40).map(|i| RatingRecord {
        criterion: Criterion::Coherence,
        target: Some(if i % 2 == 0 { Side::Left } else { Side::Right }),
        value: RatingValue::Scale((i % 5 + 1) as u8),
        ..preference(i, true)
    }));
    let a = build_report(&table, &ratings, None, &ReportOptions::default()).unwrap().to_json_pretty();
    let b = build_report(&table, &ratings, None, &ReportOptions::default()).unwrap().to_json_pretty();
    assert_eq!(a, b);
}

// ---------- engine ----------

fn scripted_engine(store: Arc<MemoryEventStore>) -> DialogueEngine {
    let clock = SteppingClock::new(Utc.with_ymd_and_hms(2023, 5, 1, 9, 0, 0).unwrap(), chrono::Duration::seconds(2));
    DialogueEngine::new(
        Arc::new(MockBackend::new(MockScript::constant(" That is a great point. Every dollar helps."))),
        Lexicon::default(),
        EngineSettings::default(),
        store,
    )
    .with_clock(Arc::new(clock))
    .with_ids(Arc::new(SequentialIds::new("prop")))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn engine_replay_is_deterministic_and_prompts_match_history(
        messages in prop::collection::vec("[A-Za-z][a-z ,.?]{0,30}", 1..6)
    ) {
        let policy = PolicyKind::FixedOrdering(mixinit_core::default_p4g_ordering());
        let run = || {
            let store = Arc::new(MemoryEventStore::new());
            let engine = scripted_engine(store.clone());
            let id = engine.create_session(TaskKind::P4g, policy.clone()).unwrap().session_id;
            for m in &messages {
                if engine.user_message(&id, m).is_err() {
                    break;
                }
            }
            (engine.export_transcript(&id).unwrap().to_json_pretty(), store.load(&id).unwrap().unwrap(), engine.session(&id).unwrap(), id)
        };
        let (first, events, live, id) = run();
        let (second, _, _, _) = run();
        prop_assert_eq!(&first, &second);

        let replayed = SessionState::replay(&id, &events).unwrap();
        prop_assert_eq!(&replayed, &live);

        // Each prompt's history section equals the history rendered at that point.
        let lexicon = Lexicon::default();
        let mut history: Vec<Turn> = Vec::new();
        for e in &events {
            match &e.kind {
                EventKind::UserMessage { text } => history.push(Turn::user(text).unwrap()),
                EventKind::BotReply { text, intent, .. } => history.push(Turn::system(text, *intent).unwrap()),
                EventKind::PromptBuilt { prompt } => {
                    let rendered = render_history(TaskKind::P4g, &history, &lexicon).unwrap().join("\n");
                    let (_, body) = prompt.split_once("\n\n").unwrap();
                    prop_assert!(body.starts_with(&rendered), "prompt body does not start with history");
                }
                _ => {}
            }
        }
    }
}
