use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener as StdListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use mixinit_core::engine::{DialogueEngine, EngineSettings, JsonlEventStore, MemoryEventStore};
use mixinit_core::generation::{HttpCompletionBackend, RetryPolicy};
use mixinit_core::interactive::{RatingLog, ValidationQuestion, INTERACTIVE_ITEMS};
use mixinit_core::{
    CompletionBackend, CredentialsRef, DialogueIntent, IntentOrdering, Lexicon, MockBackend, MockScript, P4gStrategy,
    PolicyKind,
};
use mixinit_service::{router, AppState, RequestLog, ServiceSettings};
use serde_json::{json, Value};

fn short_policy() -> PolicyKind {
    PolicyKind::FixedOrdering(
        IntentOrdering::new(vec![
            DialogueIntent::P4g(P4gStrategy::Greeting),
            DialogueIntent::P4g(P4gStrategy::SourceRelatedInquiry),
            DialogueIntent::P4g(P4gStrategy::Closing),
        ])
        .unwrap(),
    )
}

fn settings() -> ServiceSettings {
    ServiceSettings {
        policy: short_policy(),
        disclosure_text: "You are chatting with an automated system.".into(),
        rating_unlock_user_turns: 2,
        validation: ValidationQuestion::default(),
        message_timeout: Duration::from_secs(10),
        privacy_mode: true,
    }
}

fn mock_state(script: MockScript, settings: ServiceSettings) -> AppState {
    let engine = DialogueEngine::new(
        Arc::new(MockBackend::new(script)),
        Lexicon::default(),
        EngineSettings::default(),
        Arc::new(MemoryEventStore::new()),
    );
    AppState::new(engine, RatingLog::in_memory(), settings)
}

struct Server {
    base: String,
    client: reqwest::Client,
}

impl Server {
    async fn start(state: AppState) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move {
            axum::serve(listener, router(state)).await.unwrap();
        });
        Self {
            base: format!("http://{addr}"),
            client: reqwest::Client::new(),
        }
    }

    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = r.status().as_u16();
        let text = r.text().await.unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn new_session(&self) -> String {
        let (status, body) = self.post("/sessions", json!({"task": "P4G"})).await;
        assert_eq!(status, 201, "{body}");
        body["session_id"].as_str().unwrap().to_string()
    }
}

fn all_ratings(value: u8, answer: &str) -> Value {
    let ratings: Vec<Value> = INTERACTIVE_ITEMS.iter().map(|i| json!({"item": i, "value": value})).collect();
    json!({"ratings": ratings, "validation_answer": answer})
}

#[tokio::test(flavor = "multi_thread")]
async fn full_session_lifecycle() {
    let script = MockScript::ordinal([
        " Hi, how are you doing?",
        " Have you heard of Save the Children?",
        " Thank you for chatting with me today.",
    ]);
    let server = Server::start(mock_state(script, settings())).await;

    let (status, created) = server.post("/sessions", json!({"task": "P4G"})).await;
    assert_eq!(status, 201);
    assert_eq!(created["opening_message"], "Hi, how are you doing?");
    assert_eq!(created["intent"], "Greeting");
    assert_eq!(created["disclosure_text"], "You are chatting with an automated system.");
    let id = created["session_id"].as_str().unwrap();

    let (status, r) = server.post(&format!("/sessions/{id}/messages"), json!({"text": "Hello. I'm fine and you?"})).await;
    assert_eq!(status, 200, "{r}");
    assert_eq!(r["reply"], "Have you heard of Save the Children?");
    assert_eq!(r["intent"], "Source-related inquiry");
    assert_eq!(r["session_closed"], false);

    let (status, r) = server.post(&format!("/sessions/{id}/messages"), json!({"text": "No, I have not."})).await;
    assert_eq!(status, 200);
    assert_eq!(r["intent"], "Closing");
    assert_eq!(r["rating_unlocked"], true);

    let (status, r) = server.post(&format!("/sessions/{id}/messages"), json!({"text": "Bye."})).await;
    assert_eq!(status, 200);
    assert_eq!(r["reply"], Value::Null);
    assert_eq!(r["session_closed"], true);

    let (status, r) = server.post(&format!("/sessions/{id}/messages"), json!({"text": "Still there?"})).await;
    assert_eq!(status, 409, "{r}");

    let (status, t) = server.get(&format!("/sessions/{id}/transcript")).await;
    assert_eq!(status, 200);
    assert_eq!(t["turns"].as_array().unwrap().len(), 6);
    assert_eq!(t["status"]["state"], "closed");
}

#[tokio::test(flavor = "multi_thread")]
async fn request_validation_errors() {
    let server = Server::start(mock_state(MockScript::constant("Sure."), settings())).await;
    let (status, _) = server.post("/sessions", json!({"task": "ESC"})).await;
    assert_eq!(status, 400);

    let (status, _) = server.post("/sessions/nope/messages", json!({"text": "hi"})).await;
    assert_eq!(status, 404);
    let (status, _) = server.get("/sessions/nope/transcript").await;
    assert_eq!(status, 404);

    let id = server.new_session().await;
    let (status, body) = server.post(&format!("/sessions/{id}/messages"), json!({"text": "   "})).await;
    assert_eq!(status, 422);
    assert_eq!(body["retriable"], false);
    let (status, _) = server.post(&format!("/sessions/{id}/messages"), json!({"words": "hi"})).await;
    assert_eq!(status, 422);

    // A session id created with no body defaults to P4G.
    let r = server.client.post(format!("{}/sessions", server.base)).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 201);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_message_gets_conflict() {
    let script = MockScript {
        fallback: Some("Sure.".into()),
        latency_ms: 600,
        ..MockScript::default()
    };
    let server = Arc::new(Server::start(mock_state(script, settings())).await);
    let id = server.new_session().await;
    let path = format!("/sessions/{id}/messages");
    let (a, b) = tokio::join!(
        server.post(&path, json!({"text": "first"})),
        async {
            tokio::time::sleep(Duration::from_millis(150)).await;
            server.post(&path, json!({"text": "second"})).await
        }
    );
    assert_eq!(a.0, 200);
    assert_eq!(b.0, 409);
    assert_eq!(b.1["retriable"], true);
}

#[tokio::test(flavor = "multi_thread")]
async fn backend_unavailable_is_503() {
    let script = MockScript {
        unavailable: true,
        ..MockScript::default()
    };
    let server = Server::start(mock_state(script, settings())).await;
    let (status, body) = server.post("/sessions", json!({})).await;
    assert_eq!(status, 503);
    assert_eq!(body["retriable"], true);
}

#[tokio::test(flavor = "multi_thread")]
async fn slow_generation_times_out_with_504() {
    let slow = MockScript {
        by_ordinal: vec!["Hello.".into()],
        fallback: Some("Sure.".into()),
        latency_ms: 0,
        ..MockScript::default()
    };
    let mut s = settings();
    s.message_timeout = Duration::from_millis(100);
    let backend = Arc::new(SlowAfterFirst(MockBackend::new(slow)));
    let engine = DialogueEngine::new(backend, Lexicon::default(), EngineSettings::default(), Arc::new(MemoryEventStore::new()));
    let server = Server::start(AppState::new(engine, RatingLog::in_memory(), s)).await;
    let id = server.new_session().await;
    let (status, body) = server.post(&format!("/sessions/{id}/messages"), json!({"text": "hi"})).await;
    assert_eq!(status, 504);
    assert_eq!(body["retriable"], true);
}

/// Answers the first call at once and sleeps on later ones.
struct SlowAfterFirst(MockBackend);

impl CompletionBackend for SlowAfterFirst {
    fn complete(
        &self,
        request: &mixinit_core::GenerationRequest,
    ) -> Result<mixinit_core::GenerationResult, mixinit_core::GenerationError> {
        if self.0.calls() > 0 {
            std::thread::sleep(Duration::from_millis(500));
        }
        self.0.complete(request)
    }

    fn name(&self) -> &str {
        "slow"
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn ratings_flow() {
    let mut s = settings();
    s.rating_unlock_user_turns = 1;
    let server = Server::start(mock_state(MockScript::constant("Sure."), s)).await;
    let id = server.new_session().await;
    let path = format!("/sessions/{id}/ratings");

    let (status, _) = server.post(&path, all_ratings(4, "Save the Children")).await;
    assert_eq!(status, 409, "locked before any user turn");

    server.post(&format!("/sessions/{id}/messages"), json!({"text": "hi"})).await;

    let mut thirteen = all_ratings(4, "Save the Children");
    thirteen["ratings"].as_array_mut().unwrap().pop();
    assert_eq!(server.post(&path, thirteen).await.0, 422);
    assert_eq!(server.post(&path, all_ratings(4, "Red Cross")).await.0, 422);
    assert_eq!(server.post(&path, all_ratings(9, "Save the Children")).await.0, 422);
    assert_eq!(server.post("/sessions/nope/ratings", all_ratings(4, "x")).await.0, 404);

    let r = server
        .client
        .post(format!("{}{path}", server.base))
        .json(&all_ratings(4, "save the children"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 204);
    assert_eq!(server.post(&path, all_ratings(5, "Save the Children")).await.0, 409);

    let (status, summary) = server.get("/ratings/summary").await;
    assert_eq!(status, 200);
    assert_eq!(summary["sessions"], 1);
    let items = summary["items"].as_array().unwrap();
    assert_eq!(items.len(), 14);
    for (got, want) in items.iter().zip(INTERACTIVE_ITEMS) {
        assert_eq!(got["item"], want);
        assert_eq!(got["n"], 1);
        assert_eq!(got["mean"], 4.0);
    }
    assert_eq!(items[5]["reverse_scored"], true);
    assert_eq!(items[0]["reverse_scored"], false);
}

/// Minimal completion endpoint on a std socket. Records every raw request.
fn spawn_completion_stub(status_line: &'static str, body: &'static str) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = StdListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
                let end = line == "\r\n";
                head.push_str(&line);
                if end {
                    break;
                }
            }
            let mut buf = vec![0u8; content_length];
            reader.read_exact(&mut buf).ok();
            head.push_str(&String::from_utf8_lossy(&buf));
            log.lock().unwrap().push(head);
            let reply = format!(
                "HTTP/1.1 {status_line}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).ok();
        }
    });
    (format!("http://{addr}/v1/completions"), seen)
}

fn http_engine(endpoint: String, var: &str, dir: &std::path::Path) -> DialogueEngine {
    let retry = RetryPolicy {
        max_retries: 0,
        base_delay_ms: 1,
        max_delay_ms: 1,
        request_timeout_ms: 5_000,
    };
    let backend = HttpCompletionBackend::new(endpoint, CredentialsRef::Env { var: var.into() }, retry);
    DialogueEngine::new(
        Arc::new(backend),
        Lexicon::default(),
        EngineSettings::default(),
        Arc::new(JsonlEventStore::new(dir.join("sessions")).unwrap()),
    )
}

fn files_under(dir: &std::path::Path) -> Vec<String> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(std::fs::read_to_string(&path).unwrap());
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread")]
async fn api_key_never_leaks_into_responses_or_files() {
    const KEY: &str = "sk-test-3f9a1c77e0b24d5d";
    const VAR: &str = "MIXINIT_SERVICE_TEST_KEY";
    std::env::set_var(VAR, KEY);
    let dir = tempfile::tempdir().unwrap();

    let (ok_url, seen) = spawn_completion_stub(
        "200 OK",
        r#"{"choices":[{"text":" Hi, how are you doing?","finish_reason":"stop"}],"usage":{"prompt_tokens":10,"completion_tokens":6}}"#,
    );
    let engine = tokio::task::spawn_blocking({
        let dir = dir.path().to_path_buf();
        move || http_engine(ok_url, VAR, &dir)
    })
    .await
    .unwrap();
    let log_path = dir.path().join("requests.jsonl");
    let state = AppState::new(engine, RatingLog::open(dir.path().join("ratings.jsonl")).unwrap(), settings())
        .with_request_log(RequestLog::open(&log_path).unwrap());
    let server = Server::start(state).await;

    let (status, created) = server.post("/sessions", json!({})).await;
    assert_eq!(status, 201, "{created}");
    assert_eq!(created["opening_message"], "Hi, how are you doing?");
    let id = created["session_id"].as_str().unwrap();
    let (_, reply) = server.post(&format!("/sessions/{id}/messages"), json!({"text": "my secret message"})).await;
    let (_, transcript) = server.get(&format!("/sessions/{id}/transcript")).await;

    // The key goes to the backend and nowhere else.
    let requests = seen.lock().unwrap().clone();
    assert!(requests[0].to_ascii_lowercase().contains(&format!("authorization: bearer {}", KEY.to_ascii_lowercase())));
    for text in [created.to_string(), reply.to_string(), transcript.to_string()] {
        assert!(!text.contains(KEY));
    }
    for text in files_under(dir.path()) {
        assert!(!text.contains(KEY));
    }
    let log = std::fs::read_to_string(&log_path).unwrap();
    assert!(log.lines().count() >= 3);
    assert!(!log.contains("my secret message"), "privacy mode keeps message text out of the log");

    // A rejected key surfaces as a non-retriable 502 without echoing it.
    let (bad_url, _) = spawn_completion_stub("401 Unauthorized", r#"{"error":{"message":"bad key sk-test-3f9a1c77e0b24d5d"}}"#);
    let engine = tokio::task::spawn_blocking({
        let dir = dir.path().to_path_buf();
        move || http_engine(bad_url, VAR, &dir)
    })
    .await
    .unwrap();
    let server = Server::start(AppState::new(engine, RatingLog::in_memory(), settings())).await;
    let (status, body) = server.post("/sessions", json!({})).await;
    assert_eq!(status, 502, "{body}");
    assert_eq!(body["retriable"], false);
    assert!(!body.to_string().contains(KEY));
}
