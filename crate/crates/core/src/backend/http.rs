use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::retry::{retry_with_policy, RetryPolicy};
use super::{check_messages, Backend, BackendError, BackendErrorKind, ChatMessage};
use crate::error::ConfigError;
use crate::refine::GenerationParams;

/// One chat-completions endpoint serving one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendProfile {
    pub id: String,
    pub endpoint_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl BackendProfile {
    pub fn new(
        id: impl Into<String>,
        endpoint_url: impl Into<String>,
        model_name: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            auth_env_var: None,
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.id.trim().is_empty() {
            return Err(ConfigError::invalid("backend id must be non-empty"));
        }
        reqwest::Url::parse(&self.endpoint_url).map_err(|e| {
            ConfigError::invalid(format!(
                "backend `{}`: invalid endpoint_url `{}`: {e}",
                self.id, self.endpoint_url
            ))
        })?;
        if self.timeout_ms == 0 {
            return Err(ConfigError::invalid(format!(
                "backend `{}`: timeout_ms must be >= 1",
                self.id
            )));
        }
        if self.retry.max_attempts == 0 {
            return Err(ConfigError::invalid(format!(
                "backend `{}`: retry.max_attempts must be >= 1",
                self.id
            )));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.endpoint_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Chat-completions client for one [`BackendProfile`].
#[derive(Debug, Clone)]
pub struct HttpBackend {
    profile: BackendProfile,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(profile: BackendProfile) -> Result<Self, ConfigError> {
        profile.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(profile.timeout_ms))
            .build()
            .map_err(|e| ConfigError::invalid(format!("http client: {e}")))?;
        Ok(Self { profile, client })
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    /// JSON body sent for `messages` and `params`.
    pub fn request_body(&self, messages: &[ChatMessage], params: &GenerationParams) -> serde_json::Value {
        serde_json::to_value(ChatRequest {
            model: &self.profile.model_name,
            messages,
            temperature: params.temperature,
            max_tokens: params.max_output_tokens,
            top_p: params.nucleus_mass,
            seed: params.sampling_seed,
        })
        .expect("request serialization cannot fail")
    }

    async fn attempt(&self, body: &serde_json::Value, token: Option<&str>) -> Result<String, BackendErrorKind> {
        let mut req = self.client.post(self.profile.completions_url()).json(body);
        if let Some(token) = token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().await.map_err(classify)?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(classify)?;
        if !status.is_success() {
            return Err(BackendErrorKind::Status {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).chars().take(512).collect(),
            });
        }
        let parsed: ChatResponse = serde_json::from_slice(&bytes)
            .map_err(|e| BackendErrorKind::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendErrorKind::Malformed("no choices[0].message.content".into()))
    }
}

fn classify(err: reqwest::Error) -> BackendErrorKind {
    if err.is_timeout() {
        BackendErrorKind::Timeout
    } else if err.is_decode() {
        BackendErrorKind::Malformed(err.to_string())
    } else {
        BackendErrorKind::Transport(err.to_string())
    }
}

#[async_trait]
impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.profile.id
    }

    fn model_name(&self) -> &str {
        &self.profile.model_name
    }

    async fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        check_messages(&self.profile.id, messages)?;
        let token = match &self.profile.auth_env_var {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::new(
                    &self.profile.id,
                    0,
                    BackendErrorKind::InvalidRequest(format!("environment variable {var} is not set")),
                )
            })?),
            None => None,
        };
        let body = self.request_body(messages, params);
        retry_with_policy(&self.profile.retry, &self.profile.id, |_| {
            self.attempt(&body, token.as_deref())
        })
        .await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_validation() {
        assert!(BackendProfile::new("m", "http://localhost:8000/v1", "llama").validate().is_ok());
        assert!(BackendProfile::new("m", "not a url", "llama").validate().is_err());
        assert!(BackendProfile::new("", "http://x", "llama").validate().is_err());
    }

    #[test]
    fn url_join() {
        let p = BackendProfile::new("m", "http://h:1/v1/", "x");
        assert_eq!(p.completions_url(), "http://h:1/v1/chat/completions");
    }

    #[test]
    fn request_body_shape() {
        let b = HttpBackend::new(BackendProfile::new("m", "http://h/v1", "wizard-13b")).unwrap();
        let body = b.request_body(
            &[ChatMessage::system("s"), ChatMessage::user("u")],
            &GenerationParams::default(),
        );
        assert_eq!(
            body,
            serde_json::json!({
                "model": "wizard-13b",
                "messages": [{"role": "system", "content": "s"}, {"role": "user", "content": "u"}],
                "temperature": 0.7,
                "max_tokens": 512
            })
        );
        let with_opts = b.request_body(
            &[ChatMessage::user("u")],
            &GenerationParams {
                nucleus_mass: Some(0.9),
                sampling_seed: Some(7),
                ..Default::default()
            },
        );
        assert_eq!(with_opts["top_p"], 0.9);
        assert_eq!(with_opts["seed"], 7);
    }
}
