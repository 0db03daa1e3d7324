use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use had_core::backend::{
    BackendError, CachedBackend, ChatBackend, CompletionRequest, HttpBackend, HttpBackendConfig, ResponseCache,
    RetryPolicy,
};
use had_core::PromptText;
use serde_json::{json, Value};

#[derive(Clone)]
enum Reply {
    Ok(&'static str),
    Status(u16, Option<&'static str>),
    Raw(&'static str),
}

#[derive(Default)]
struct Stub {
    script: Mutex<VecDeque<Reply>>,
    bodies: Mutex<Vec<Value>>,
    auth: Mutex<Vec<Option<String>>>,
}

async fn handle(State(stub): State<Arc<Stub>>, headers: HeaderMap, body: String) -> Response {
    stub.bodies.lock().unwrap().push(serde_json::from_str(&body).unwrap());
    stub.auth
        .lock()
        .unwrap()
        .push(headers.get("authorization").map(|v| v.to_str().unwrap().to_owned()));
    let reply = stub.script.lock().unwrap().pop_front().unwrap_or(Reply::Ok("Neutral."));
    match reply {
        Reply::Ok(text) => axum::Json(json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3},
        }))
        .into_response(),
        Reply::Status(code, retry_after) => {
            let mut r = (StatusCode::from_u16(code).unwrap(), "busy").into_response();
            if let Some(v) = retry_after {
                r.headers_mut().insert("retry-after", v.parse().unwrap());
            }
            r
        }
        Reply::Raw(body) => ([("content-type", "application/json")], body).into_response(),
    }
}

async fn serve(script: Vec<Reply>) -> (String, Arc<Stub>) {
    let stub = Arc::new(Stub {
        script: Mutex::new(script.into()),
        ..Default::default()
    });
    let app = Router::new().route("/v1/chat/completions", post(handle)).with_state(stub.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1/chat/completions"), stub)
}

fn config(endpoint: String) -> HttpBackendConfig {
    HttpBackendConfig {
        endpoint,
        api_key_env: None,
        timeout: Duration::from_secs(5),
        retry: RetryPolicy {
            max_attempts: 4,
            base_delay: Duration::from_millis(5),
            max_delay: Duration::from_secs(5),
        },
        ..Default::default()
    }
}

fn request() -> CompletionRequest {
    CompletionRequest::new("gpt-3.5-turbo", PromptText::user("What is the sentiment?")).tagged("m1", "naive")
}

#[tokio::test(flavor = "multi_thread")]
async fn retries_rate_limits_then_succeeds() {
    let (url, stub) = serve(vec![Reply::Status(429, None), Reply::Status(429, None), Reply::Ok("Positive.")]).await;
    let backend = HttpBackend::new(config(url)).unwrap();
    let result = backend.complete(&request()).await.unwrap();
    assert_eq!(result.text, "Positive.");
    assert_eq!(result.attempts, 3);
    assert_eq!(result.usage.prompt_tokens, 12);
    assert_eq!(stub.bodies.lock().unwrap().len(), 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn request_body_follows_chat_schema() {
    let (url, stub) = serve(vec![]).await;
    let backend = HttpBackend::new(config(url)).unwrap();
    let mut req = request();
    req.prompt.system = Some("You are terse.".into());
    req.max_tokens = 64;
    backend.complete(&req).await.unwrap();
    let body = stub.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["model"], "gpt-3.5-turbo");
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "What is the sentiment?");
    assert_eq!(stub.auth.lock().unwrap()[0], None);
}

#[tokio::test(flavor = "multi_thread")]
async fn sends_bearer_token_from_environment() {
    let (url, stub) = serve(vec![]).await;
    std::env::set_var("HAD_TEST_TOKEN_OK", "sekrit");
    let backend = HttpBackend::new(HttpBackendConfig {
        api_key_env: Some("HAD_TEST_TOKEN_OK".into()),
        ..config(url)
    })
    .unwrap();
    backend.complete(&request()).await.unwrap();
    assert_eq!(stub.auth.lock().unwrap()[0].as_deref(), Some("Bearer sekrit"));
}

#[tokio::test]
async fn missing_credential_is_an_auth_error() {
    let err = HttpBackend::new(HttpBackendConfig {
        api_key_env: Some("HAD_TEST_TOKEN_UNSET".into()),
        ..config("http://127.0.0.1:9/".into())
    })
    .err()
    .unwrap();
    assert!(matches!(err, BackendError::Auth(_)), "{err}");
}

#[tokio::test(flavor = "multi_thread")]
async fn unauthorized_is_not_retried() {
    let (url, stub) = serve(vec![Reply::Status(401, None), Reply::Ok("Positive.")]).await;
    let backend = HttpBackend::new(config(url)).unwrap();
    let err = backend.complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Auth(_)), "{err}");
    assert_eq!(stub.bodies.lock().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_body_is_a_protocol_error() {
    let (url, _) = serve(vec![Reply::Raw("{\"choices\": [")]).await;
    let backend = HttpBackend::new(config(url)).unwrap();
    let err = backend.complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err}");

    let (url, _) = serve(vec![Reply::Raw("{\"choices\": []}")]).await;
    let backend = HttpBackend::new(config(url)).unwrap();
    let err = backend.complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err}");
}

#[tokio::test(flavor = "multi_thread")]
async fn gives_up_after_max_attempts() {
    let (url, stub) = serve(vec![Reply::Status(503, None); 6]).await;
    let backend = HttpBackend::new(config(url)).unwrap();
    let err = backend.complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Transport { attempts: 4, .. }), "{err}");
    assert_eq!(stub.bodies.lock().unwrap().len(), 4);
}

#[tokio::test(flavor = "multi_thread")]
async fn honors_retry_after() {
    let (url, _) = serve(vec![Reply::Status(429, Some("1")), Reply::Ok("Negative.")]).await;
    let backend = HttpBackend::new(config(url)).unwrap();
    let started = Instant::now();
    let result = backend.complete(&request()).await.unwrap();
    assert_eq!(result.text, "Negative.");
    assert!(started.elapsed() >= Duration::from_millis(950), "{:?}", started.elapsed());
}

#[tokio::test(flavor = "multi_thread")]
async fn cache_spares_repeat_requests() {
    let (url, stub) = serve(vec![Reply::Ok("Positive.")]).await;
    let http: Arc<dyn ChatBackend> = Arc::new(HttpBackend::new(config(url)).unwrap());
    let cache = Arc::new(ResponseCache::in_memory());
    let backend = CachedBackend::new(http, cache.clone());
    let first = backend.complete(&request()).await.unwrap();
    let second = backend.complete(&request()).await.unwrap();
    assert_eq!(first.text, second.text);
    assert!(second.from_cache);
    assert_eq!(stub.bodies.lock().unwrap().len(), 1);
    assert_eq!((cache.stats().hits, cache.stats().misses), (1, 1));
}
