use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use regex::Regex;
use serde::Deserialize;

use super::{Backend, BackendError, BackendErrorKind, ChatMessage};
use crate::error::ConfigError;
use crate::refine::GenerationParams;

#[derive(Debug, Clone)]
pub enum Matcher {
    Substring(String),
    Pattern(Regex),
}

impl Matcher {
    pub fn pattern(p: &str) -> Result<Self, ConfigError> {
        Regex::new(p)
            .map(Matcher::Pattern)
            .map_err(|e| ConfigError::invalid(format!("bad pattern `{p}`: {e}")))
    }

    pub fn is_match(&self, haystack: &str) -> bool {
        match self {
            Matcher::Substring(s) => haystack.contains(s.as_str()),
            Matcher::Pattern(re) => re.is_match(haystack),
        }
    }
}

/// One rule as written in a config file: exactly one of `contains` / `pattern`.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub response: String,
}

impl ScriptRule {
    pub fn matcher(&self) -> Result<Matcher, ConfigError> {
        match (&self.contains, &self.pattern) {
            (Some(s), None) => Ok(Matcher::Substring(s.clone())),
            (None, Some(p)) => Matcher::pattern(p),
            _ => Err(ConfigError::invalid(
                "scripted rule needs exactly one of `contains` or `pattern`",
            )),
        }
    }
}

/// Deterministic rule-driven backend. Holds no network handle.
#[derive(Debug)]
pub struct ScriptedBackend {
    id: String,
    model_name: String,
    rules: Vec<(Matcher, String)>,
    default_response: String,
    call_log: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, default_response: impl Into<String>) -> Self {
        let id = id.into();
        Self {
            model_name: format!("scripted:{id}"),
            id,
            rules: Vec::new(),
            default_response: default_response.into(),
            call_log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_rules(
        id: impl Into<String>,
        rules: &[ScriptRule],
        default_response: impl Into<String>,
    ) -> Result<Self, ConfigError> {
        let mut backend = Self::new(id, default_response);
        for rule in rules {
            backend.rules.push((rule.matcher()?, rule.response.clone()));
        }
        Ok(backend)
    }

    pub fn rule(mut self, matcher: Matcher, response: impl Into<String>) -> Self {
        self.rules.push((matcher, response.into()));
        self
    }

    /// Shorthand for a substring rule.
    pub fn when(self, needle: impl Into<String>, response: impl Into<String>) -> Self {
        self.rule(Matcher::Substring(needle.into()), response)
    }

    /// Response for `messages` without logging the call.
    pub fn respond(&self, messages: &[ChatMessage]) -> &str {
        let haystack = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        self.rules
            .iter()
            .find(|(m, _)| m.is_match(&haystack))
            .map(|(_, r)| r.as_str())
            .unwrap_or(&self.default_response)
    }

    pub fn call_count(&self) -> usize {
        self.call_log.lock().unwrap().len()
    }

    pub fn call_log(&self) -> Vec<Vec<ChatMessage>> {
        self.call_log.lock().unwrap().clone()
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    async fn complete(
        &self,
        messages: &[ChatMessage],
        _params: &GenerationParams,
    ) -> Result<String, BackendError> {
        let response = self.respond(messages).to_owned();
        self.call_log.lock().unwrap().push(messages.to_vec());
        Ok(response)
    }
}

type Handler = dyn Fn(&[ChatMessage], &GenerationParams) -> Result<String, String> + Send + Sync;

/// Backend driven by a closure; useful for scripted dynamics that depend on
/// the prompt content. Errors returned by the closure are permanent failures.
pub struct FnBackend {
    id: String,
    model_name: String,
    handler: Box<Handler>,
    calls: AtomicU64,
}

impl std::fmt::Debug for FnBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnBackend").field("id", &self.id).finish()
    }
}

impl FnBackend {
    pub fn new<F>(id: impl Into<String>, handler: F) -> Self
    where
        F: Fn(&[ChatMessage], &GenerationParams) -> Result<String, String> + Send + Sync + 'static,
    {
        let id = id.into();
        Self {
            model_name: format!("fn:{id}"),
            id,
            handler: Box::new(handler),
            calls: AtomicU64::new(0),
        }
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl Backend for FnBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    async fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.handler)(messages, params)
            .map_err(|e| BackendError::new(&self.id, 1, BackendErrorKind::Failed(e)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> GenerationParams {
        GenerationParams::default()
    }

    #[tokio::test]
    async fn rule_match_and_fallback() {
        let b = ScriptedBackend::new("s", "fallback").when("toxic", "cleaned");
        let hit = b.complete(&[ChatMessage::user("some toxic text")], &params()).await.unwrap();
        assert_eq!(hit, "cleaned");
        let miss = b.complete(&[ChatMessage::user("benign")], &params()).await.unwrap();
        assert_eq!(miss, "fallback");
        assert_eq!(b.call_count(), 2);
        assert_eq!(b.call_log()[0][0].content, "some toxic text");
    }

    #[tokio::test]
    async fn first_rule_wins() {
        let b = ScriptedBackend::new("s", "d")
            .when("abc", "first")
            .rule(Matcher::pattern("a.c").unwrap(), "second");
        let r = b.complete(&[ChatMessage::user("xxabcxx")], &params()).await.unwrap();
        assert_eq!(r, "first");
        let r = b.complete(&[ChatMessage::user("axc")], &params()).await.unwrap();
        assert_eq!(r, "second");
    }

    #[tokio::test]
    async fn matches_across_concatenated_messages() {
        let b = ScriptedBackend::new("s", "d").rule(Matcher::pattern("(?s)sys.*usr").unwrap(), "both");
        let r = b
            .complete(&[ChatMessage::system("sys"), ChatMessage::user("usr")], &params())
            .await
            .unwrap();
        assert_eq!(r, "both");
    }

    #[test]
    fn config_rules() {
        let ok = ScriptRule {
            contains: Some("a".into()),
            pattern: None,
            response: "r".into(),
        };
        assert!(ScriptedBackend::from_rules("s", &[ok], "d").is_ok());
        let both = ScriptRule {
            contains: Some("a".into()),
            pattern: Some("b".into()),
            response: "r".into(),
        };
        assert!(ScriptedBackend::from_rules("s", &[both], "d").is_err());
        let bad = ScriptRule {
            contains: None,
            pattern: Some("(".into()),
            response: "r".into(),
        };
        assert!(ScriptedBackend::from_rules("s", &[bad], "d").is_err());
    }

    #[tokio::test]
    async fn fn_backend_counts_and_fails() {
        let b = FnBackend::new("f", |m, _| {
            if m[0].content == "boom" {
                Err("scripted failure".into())
            } else {
                Ok(m[0].content.to_uppercase())
            }
        });
        assert_eq!(b.complete(&[ChatMessage::user("hi")], &params()).await.unwrap(), "HI");
        assert!(b.complete(&[ChatMessage::user("boom")], &params()).await.is_err());
        assert_eq!(b.call_count(), 2);
    }
}
