use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::post;
use axum::{Json, Router};
use plate_bench::backend::{
    build_backends, load_backend_configs, Auth, Backend, CachePolicy, ErrorKind, HttpBackend, HttpSettings,
    ResponseCache, RetryPolicy, VisionQuery,
};
use plate_bench::forge::{forge_dataset, MANIFEST_FILE};
use plate_bench::harness::{load_run_records, prepare, run_experiment, ExperimentPlan};
use plate_core::forge::ForgeSpec;
use serde_json::{json, Value};

#[derive(Default)]
struct Server {
    flaky_calls: AtomicUsize,
    echo_calls: AtomicUsize,
}

fn chat(text: &str) -> Json<Value> {
    Json(json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] }))
}

fn auth_header(h: &HeaderMap) -> String {
    h.get("authorization").and_then(|v| v.to_str().ok()).unwrap_or("").to_string()
}

async fn ok(headers: HeaderMap, Json(body): Json<Value>) -> impl IntoResponse {
    let prompt = body["messages"][0]["content"][0]["text"].as_str().unwrap_or("").to_string();
    let image = body["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap_or("");
    if !image.starts_with("data:image/png;base64,") {
        return (StatusCode::BAD_REQUEST, "no image").into_response();
    }
    if body["model"] == "inspect" {
        return chat(&format!("auth={} prompt={prompt}", auth_header(&headers))).into_response();
    }
    chat("The plate reads WXY 1234.").into_response()
}

async fn flaky(State(s): State<Arc<Server>>) -> impl IntoResponse {
    if s.flaky_calls.fetch_add(1, Ordering::SeqCst) == 0 {
        (StatusCode::TOO_MANY_REQUESTS, "slow down").into_response()
    } else {
        chat("ABC1234").into_response()
    }
}

async fn unauthorized() -> impl IntoResponse {
    (StatusCode::UNAUTHORIZED, "bad key")
}

async fn malformed() -> impl IntoResponse {
    (StatusCode::OK, "<html>not json</html>")
}

async fn missing_pointer() -> impl IntoResponse {
    Json(json!({ "choices": [] }))
}

async fn echo_secret(State(s): State<Arc<Server>>, headers: HeaderMap) -> impl IntoResponse {
    s.echo_calls.fetch_add(1, Ordering::SeqCst);
    (StatusCode::INTERNAL_SERVER_ERROR, format!("upstream saw header {}", auth_header(&headers)))
}

async fn slow() -> impl IntoResponse {
    tokio::time::sleep(Duration::from_secs(3)).await;
    chat("late")
}

fn start() -> (SocketAddr, Arc<Server>) {
    let state = Arc::new(Server::default());
    let app = Router::new()
        .route("/ok", post(ok))
        .route("/flaky", post(flaky))
        .route("/unauthorized", post(unauthorized))
        .route("/malformed", post(malformed))
        .route("/missing", post(missing_pointer))
        .route("/echo", post(echo_secret))
        .route("/slow", post(slow))
        .with_state(state.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (rx.recv().unwrap(), state)
}

fn settings(addr: SocketAddr, path: &str, auth_env: Option<&str>) -> HttpSettings {
    HttpSettings {
        endpoint: format!("http://{addr}{path}"),
        model: "test-model".into(),
        auth: auth_env.map(|env| Auth {
            env: env.into(),
            header: "Authorization".into(),
            scheme: "Bearer ".into(),
        }),
        request_template: None,
        response_pointer: None,
        timeout: Duration::from_millis(500),
        rate_limit_per_min: 0,
        retry: RetryPolicy {
            max_attempts: 3,
            backoff: Duration::from_millis(10),
            max_backoff: Duration::from_millis(50),
        },
        concurrency: 2,
    }
}

fn query() -> VisionQuery {
    VisionQuery::new(plate_bench::backend::probe_image(), "image/png", "read the \"plate\"")
}

#[test]
fn reply_text_comes_from_the_pointer() {
    let (addr, _) = start();
    std::env::set_var("PLATE_TEST_KEY_OK", "k-ok");
    let b = HttpBackend::new("ok", settings(addr, "/ok", Some("PLATE_TEST_KEY_OK"))).unwrap();
    let r = b.query(&query()).unwrap();
    assert_eq!(r.text, "The plate reads WXY 1234.");
    assert_eq!(r.backend_id, "ok");
    let mut s = settings(addr, "/ok", Some("PLATE_TEST_KEY_OK"));
    s.model = "inspect".into();
    let r = HttpBackend::new("ok", s).unwrap().query(&query()).unwrap();
    assert_eq!(r.text, "auth=Bearer k-ok prompt=read the \"plate\"");
    assert!(b.check().is_ok());
}

#[test]
fn rate_limited_reply_is_retried() {
    let (addr, state) = start();
    let b = HttpBackend::new("flaky", settings(addr, "/flaky", None)).unwrap();
    assert_eq!(b.query(&query()).unwrap().text, "ABC1234");
    assert_eq!(state.flaky_calls.load(Ordering::SeqCst), 2);
}

#[test]
fn error_kinds_are_classified() {
    let (addr, _) = start();
    let kind = |path: &str| HttpBackend::new("x", settings(addr, path, None)).unwrap().query(&query()).unwrap_err().kind;
    assert_eq!(kind("/unauthorized"), ErrorKind::Auth);
    assert_eq!(kind("/malformed"), ErrorKind::Malformed);
    assert_eq!(kind("/missing"), ErrorKind::Malformed);
    assert_eq!(kind("/slow"), ErrorKind::Timeout);
    assert_eq!(kind("/nowhere"), ErrorKind::Permanent);
}

#[test]
fn missing_secret_is_an_auth_error_without_a_request() {
    let (addr, state) = start();
    let b = HttpBackend::new("echo", settings(addr, "/echo", Some("PLATE_TEST_KEY_UNSET_X"))).unwrap();
    let e = b.query(&query()).unwrap_err();
    assert_eq!(e.kind, ErrorKind::Auth);
    assert!(e.message.contains("PLATE_TEST_KEY_UNSET_X"));
    assert_eq!(state.echo_calls.load(Ordering::SeqCst), 0);
}

fn files_containing(dir: &Path, needle: &str) -> Vec<String> {
    let mut hits = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if String::from_utf8_lossy(&std::fs::read(&p).unwrap()).contains(needle) {
                hits.push(p.display().to_string());
            }
        }
    }
    hits
}

#[test]
fn secret_never_reaches_results_or_cache() {
    let canary = "canary-7f3e9a1c-do-not-log";
    std::env::set_var("PLATE_TEST_CANARY_KEY", canary);
    let (addr, state) = start();
    let dir = tempfile::tempdir().unwrap();
    forge_dataset(&ForgeSpec { count: 3, seed: 1, ..ForgeSpec::default() }, dir.path(), 1).unwrap();
    let config = dir.path().join("backends.toml");
    std::fs::write(
        &config,
        format!(
            r#"
[[backend]]
id = "echo"
kind = "http_chat"
endpoint = "http://{addr}/echo"
model = "m"
auth_env = "PLATE_TEST_CANARY_KEY"
retry = {{ max_attempts = 2, backoff_ms = 5 }}

[[backend]]
id = "ok"
kind = "http_chat"
endpoint = "http://{addr}/ok"
model = "m"
auth_env = "PLATE_TEST_CANARY_KEY"
"#
        ),
    )
    .unwrap();
    let configs = load_backend_configs(&config).unwrap();
    let cache = Arc::new(ResponseCache::new(dir.path().join("cache")));
    let available: BTreeMap<String, Arc<dyn Backend>> = build_backends(&configs, Some(cache), CachePolicy::Use).unwrap();
    let run_file = dir.path().join("run.jsonl");
    let plan = ExperimentPlan {
        manifest: dir.path().join(MANIFEST_FILE),
        backends_file: Some(config),
        backends: vec!["echo".into(), "ok".into()],
        prompts: vec!["canonical".into()],
        run_file: run_file.clone(),
        cache_dir: Some(dir.path().join("cache")),
        cache: CachePolicy::Use,
        concurrency: 2,
        custom_prompts: Vec::new(),
    };
    let s = run_experiment(&prepare(&plan, &available).unwrap(), &run_file).unwrap();
    assert_eq!((s.ok, s.errors), (3, 3));
    // the server did see the secret, so the redaction was exercised
    assert_eq!(state.echo_calls.load(Ordering::SeqCst), 6);
    let records = load_run_records(&run_file).unwrap();
    let echoed: Vec<_> = records.iter().filter_map(|r| r.error.as_ref()).collect();
    assert_eq!(echoed.len(), 3);
    assert!(echoed.iter().all(|e| e.message.contains("[redacted]")), "{echoed:?}");
    assert!(records.iter().filter(|r| r.backend_id == "ok").all(|r| r.prediction.text() == "WXY1234"));
    assert_eq!(files_containing(dir.path(), canary), Vec::<String>::new());
}
