//! Client for chat-completions style HTTP endpoints.

use std::time::{Duration, Instant};

use async_trait::async_trait;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{Mutex, Semaphore};
use tracing::{debug, warn};

use super::{BackendError, ChatBackend, CompletionRequest, CompletionResult, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, after `attempt` failures.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    /// Environment variable holding the bearer token. `None` sends no
    /// credential, for local servers.
    pub api_key_env: Option<String>,
    #[serde(with = "millis")]
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Maximum requests in flight at once.
    pub max_in_flight: usize,
    pub requests_per_minute: Option<u32>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            requests_per_minute: None,
        }
    }
}

/// Spaces request starts at least `interval` apart.
struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<tokio::time::Instant>,
}

impl RateLimiter {
    fn per_minute(rpm: u32) -> Self {
        Self {
            interval: Duration::from_secs(60) / rpm.max(1),
            next_slot: Mutex::new(tokio::time::Instant::now()),
        }
    }

    async fn acquire(&self) {
        let wait = {
            let mut next = self.next_slot.lock().await;
            let now = tokio::time::Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot - now
        };
        if !wait.is_zero() {
            tokio::time::sleep(wait).await;
        }
    }
}

pub struct HttpBackend {
    id: String,
    config: HttpBackendConfig,
    client: reqwest::Client,
    api_key: Option<String>,
    permits: Semaphore,
    limiter: Option<RateLimiter>,
}

enum Failure {
    Retryable { message: String, retry_after: Option<Duration> },
    Fatal(BackendError),
}

impl HttpBackend {
    /// Fails with [`BackendError::Auth`] when the configured credential
    /// variable is unset or empty.
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.trim().is_empty() => Some(v),
                _ => {
                    return Err(BackendError::Auth(format!(
                        "environment variable {var} is not set"
                    )))
                }
            },
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: format!("building HTTP client: {e}"),
            })?;
        Ok(Self {
            id: format!("http:{}", config.endpoint),
            permits: Semaphore::new(config.max_in_flight.max(1)),
            limiter: config.requests_per_minute.map(RateLimiter::per_minute),
            client,
            api_key,
            config,
        })
    }

    fn body(request: &CompletionRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.prompt.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.prompt.user}));
        json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    async fn attempt(&self, body: &Value) -> Result<(String, Usage), Failure> {
        let mut builder = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(|e| Failure::Retryable {
            message: e.to_string(),
            retry_after: None,
        })?;
        let status = response.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            let text = response.text().await.unwrap_or_default();
            return Err(Failure::Fatal(BackendError::Auth(format!("HTTP {status}: {text}"))));
        }
        if status == StatusCode::TOO_MANY_REQUESTS
            || status == StatusCode::REQUEST_TIMEOUT
            || status.is_server_error()
        {
            let retry_after = response
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(Failure::Retryable {
                message: format!("HTTP {status}"),
                retry_after,
            });
        }
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            return Err(Failure::Fatal(BackendError::Transport {
                attempts: 1,
                message: format!("HTTP {status}: {text}"),
            }));
        }
        let value: Value = response.json().await.map_err(|e| {
            // a body that stops mid-stream is a transport failure, not bad JSON
            if e.is_decode() {
                Failure::Fatal(BackendError::Protocol(e.to_string()))
            } else {
                Failure::Retryable {
                    message: e.to_string(),
                    retry_after: None,
                }
            }
        })?;
        parse_response(&value).map_err(Failure::Fatal)
    }
}

fn parse_response(value: &Value) -> Result<(String, Usage), BackendError> {
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))?;
    let usage = Usage {
        prompt_tokens: value.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: value
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok((text.to_owned(), usage))
}

#[async_trait]
impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let body = Self::body(request);
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let started = Instant::now();
        let max_attempts = self.config.retry.max_attempts.max(1);
        let mut attempts = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire().await;
            }
            attempts += 1;
            match self.attempt(&body).await {
                Ok((text, usage)) => {
                    debug!(tag = %request.tag, attempts, "completion ok");
                    return Ok(CompletionResult {
                        text,
                        usage,
                        latency: started.elapsed(),
                        from_cache: false,
                        attempts,
                    });
                }
                Err(Failure::Fatal(BackendError::Transport { message, .. })) => {
                    return Err(BackendError::Transport { attempts, message });
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable { message, retry_after }) => {
                    if attempts >= max_attempts {
                        return Err(BackendError::Transport { attempts, message });
                    }
                    let delay = retry_after
                        .unwrap_or_else(|| self.config.retry.delay(attempts))
                        .min(self.config.retry.max_delay);
                    warn!(tag = %request.tag, attempts, %message, ?delay, "retrying completion");
                    tokio::time::sleep(delay).await;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(700),
        };
        let delays: Vec<u128> = (1..=5).map(|a| p.delay(a).as_millis()).collect();
        assert_eq!(delays, [100, 200, 400, 700, 700]);
    }

    #[test]
    fn missing_credential_is_auth_error() {
        let config = HttpBackendConfig {
            api_key_env: Some("HAD_TEST_DEFINITELY_UNSET_KEY".into()),
            ..Default::default()
        };
        assert!(matches!(HttpBackend::new(config), Err(BackendError::Auth(_))));
    }

    #[test]
    fn response_parsing() {
        let v = json!({"choices":[{"message":{"role":"assistant","content":"Neutral."}}],
                       "usage":{"prompt_tokens":12,"completion_tokens":2}});
        let (text, usage) = parse_response(&v).unwrap();
        assert_eq!(text, "Neutral.");
        assert_eq!(usage.prompt_tokens, 12);
        assert!(matches!(parse_response(&json!({"choices": []})), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn request_body_roles() {
        let mut r = CompletionRequest::new("gpt", crate::agents::PromptText::user("hi"));
        r.prompt.system = Some("be brief".into());
        let body = HttpBackend::body(&r);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hi");
        assert_eq!(body["max_tokens"], 256);
        assert_eq!(body["temperature"], 0.0);
    }

    #[tokio::test(start_paused = true)]
    async fn rate_limiter_spaces_requests() {
        let limiter = RateLimiter::per_minute(60);
        let start = tokio::time::Instant::now();
        for _ in 0..3 {
            limiter.acquire().await;
        }
        // first slot immediate, then one per second
        assert!(start.elapsed() >= Duration::from_secs(2));
    }
}
