use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use super::{ScoreProvider, ScorerError, ToxicityScore, ToxicityScorer};
use crate::backend::{retry_with_policy, BackendErrorKind, RetryPolicy};
use crate::error::ConfigError;
use crate::text::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteScorerConfig {
    pub service_url: String,
    /// Environment variable holding the service key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    /// Process-wide request ceiling; `0` disables the limiter.
    #[serde(default = "default_rps")]
    pub requests_per_second: f64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_key_env() -> String {
    "PERSPECTIVE_API_KEY".into()
}

fn default_rps() -> f64 {
    1.0
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl RemoteScorerConfig {
    pub fn new(service_url: impl Into<String>) -> Self {
        Self {
            service_url: service_url.into(),
            api_key_env: default_key_env(),
            requests_per_second: default_rps(),
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Minimum spacing between requests, shared by every caller of one scorer.
#[derive(Debug)]
struct RateLimiter {
    interval: Duration,
    next: tokio::sync::Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(rps: f64) -> Self {
        let interval = if rps > 0.0 {
            Duration::from_secs_f64(1.0 / rps)
        } else {
            Duration::ZERO
        };
        Self {
            interval,
            next: tokio::sync::Mutex::new(None),
        }
    }

    async fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let mut next = self.next.lock().await;
        let now = Instant::now();
        let slot = match *next {
            Some(t) if t > now => t,
            _ => now,
        };
        *next = Some(slot + self.interval);
        drop(next);
        tokio::time::sleep_until(slot).await;
    }
}

#[derive(Debug, Serialize)]
struct AnalyzeRequest<'a> {
    comment: Comment<'a>,
    languages: [&'static str; 1],
    #[serde(rename = "requestedAttributes")]
    requested_attributes: RequestedAttributes,
}

#[derive(Debug, Serialize)]
struct Comment<'a> {
    text: &'a str,
}

#[derive(Debug, Serialize)]
struct RequestedAttributes {
    #[serde(rename = "TOXICITY")]
    toxicity: Empty,
}

#[derive(Debug, Serialize)]
struct Empty {}

/// Client for the remote comment-analysis service (TOXICITY summary score).
#[derive(Debug)]
pub struct RemoteScorer {
    config: RemoteScorerConfig,
    client: reqwest::Client,
    limiter: RateLimiter,
    cache: Mutex<HashMap<String, f64>>,
    calls: AtomicU64,
}

impl RemoteScorer {
    pub fn new(config: RemoteScorerConfig) -> Result<Self, ConfigError> {
        reqwest::Url::parse(&config.service_url).map_err(|e| {
            ConfigError::invalid(format!("invalid service_url `{}`: {e}", config.service_url))
        })?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms.max(1)))
            .build()
            .map_err(|e| ConfigError::invalid(format!("http client: {e}")))?;
        Ok(Self {
            limiter: RateLimiter::new(config.requests_per_second),
            config,
            client,
            cache: Mutex::new(HashMap::new()),
            calls: AtomicU64::new(0),
        })
    }

    /// Number of HTTP requests issued (retries included).
    pub fn request_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn request_body(text: &str) -> serde_json::Value {
        serde_json::to_value(AnalyzeRequest {
            comment: Comment { text },
            languages: ["en"],
            requested_attributes: RequestedAttributes { toxicity: Empty {} },
        })
        .expect("request serialization cannot fail")
    }

    async fn attempt(&self, key: &str, body: &serde_json::Value) -> Result<f64, BackendErrorKind> {
        self.limiter.acquire().await;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let resp = self
            .client
            .post(&self.config.service_url)
            .query(&[("key", key)])
            .json(body)
            .send()
            .await
            .map_err(|e| {
                if e.is_timeout() {
                    BackendErrorKind::Timeout
                } else {
                    BackendErrorKind::Transport(e.to_string())
                }
            })?;
        let status = resp.status();
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| BackendErrorKind::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendErrorKind::Status {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).chars().take(512).collect(),
            });
        }
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| BackendErrorKind::Malformed(e.to_string()))?;
        value
            .pointer("/attributeScores/TOXICITY/summaryScore/value")
            .and_then(serde_json::Value::as_f64)
            .filter(|v| (0.0..=1.0).contains(v))
            .ok_or_else(|| {
                BackendErrorKind::Malformed("missing attributeScores.TOXICITY.summaryScore.value".into())
            })
    }
}

#[async_trait]
impl ToxicityScorer for RemoteScorer {
    fn provider(&self) -> ScoreProvider {
        ScoreProvider::Remote
    }

    async fn score(&self, text: &str) -> Result<ToxicityScore, ScorerError> {
        if text.trim().is_empty() {
            return Err(ScorerError::EmptyText);
        }
        let digest = sha256_hex(text);
        if let Some(v) = self.cache.lock().unwrap().get(&digest).copied() {
            return Ok(ToxicityScore {
                value: v,
                provider: ScoreProvider::Remote,
            });
        }
        let key = std::env::var(&self.config.api_key_env)
            .map_err(|_| ScorerError::MissingApiKey(self.config.api_key_env.clone()))?;
        let body = Self::request_body(text);
        let value = retry_with_policy(&self.config.retry, "toxicity-service", |_| {
            self.attempt(&key, &body)
        })
        .await
        .map_err(|e| match e.kind {
            BackendErrorKind::Malformed(m) => ScorerError::Malformed(m),
            other => ScorerError::Unavailable {
                attempts: e.attempts,
                reason: other.to_string(),
            },
        })?;
        self.cache.lock().unwrap().insert(digest, value);
        Ok(ToxicityScore {
            value,
            provider: ScoreProvider::Remote,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_body_schema() {
        assert_eq!(
            RemoteScorer::request_body("hi there"),
            serde_json::json!({
                "comment": {"text": "hi there"},
                "languages": ["en"],
                "requestedAttributes": {"TOXICITY": {}}
            })
        );
    }

    #[test]
    fn rejects_bad_url() {
        assert!(RemoteScorer::new(RemoteScorerConfig::new("::nope")).is_err());
    }

    #[tokio::test]
    async fn empty_text_makes_no_call() {
        let s = RemoteScorer::new(RemoteScorerConfig::new("http://127.0.0.1:9/analyze")).unwrap();
        assert_eq!(s.score("  ").await.unwrap_err(), ScorerError::EmptyText);
        assert_eq!(s.request_count(), 0);
    }

    #[tokio::test]
    async fn limiter_spaces_requests() {
        let l = RateLimiter::new(50.0);
        let start = Instant::now();
        for _ in 0..4 {
            l.acquire().await;
        }
        // three gaps of 20 ms
        assert!(start.elapsed() >= Duration::from_millis(55));
    }
}
