#![allow(dead_code)]

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::{RawQuery, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::Router;
use ncritics::backend::{Backend, BackendError, ChatMessage, FnBackend};
use ncritics::refine::GenerationParams;
use ncritics::text::sha256_hex;
use ncritics::toxicity::{lexicon_tokens, ToxicLexicon};

/// What the stub saw for one request.
#[derive(Debug, Clone)]
pub struct Seen {
    pub headers: HeaderMap,
    pub query: Option<String>,
    pub body: serde_json::Value,
}

#[derive(Default)]
pub struct StubState {
    /// Replies served in order; `fallback` once exhausted.
    pub script: Mutex<VecDeque<(u16, String)>>,
    pub fallback: Mutex<(u16, String)>,
    pub seen: Mutex<Vec<Seen>>,
}

impl StubState {
    pub fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

async fn handle(
    State(state): State<Arc<StubState>>,
    headers: HeaderMap,
    RawQuery(query): RawQuery,
    body: String,
) -> (StatusCode, String) {
    let body = serde_json::from_str(&body).unwrap_or(serde_json::Value::String(body));
    state.seen.lock().unwrap().push(Seen { headers, query, body });
    let (status, reply) = state
        .script
        .lock()
        .unwrap()
        .pop_front()
        .unwrap_or_else(|| state.fallback.lock().unwrap().clone());
    (StatusCode::from_u16(status).unwrap(), reply)
}

/// Serves `path` on an ephemeral port; returns the base URL.
pub async fn stub_server(path: &str, script: Vec<(u16, String)>, fallback: (u16, String)) -> (String, Arc<StubState>) {
    let state = Arc::new(StubState {
        script: Mutex::new(script.into()),
        fallback: Mutex::new(fallback),
        seen: Mutex::new(Vec::new()),
    });
    let app = Router::new().route(path, post(handle)).with_state(Arc::clone(&state));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    (format!("http://{addr}"), state)
}

pub fn chat_reply(content: &str) -> String {
    serde_json::json!({
        "id": "x",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
    .to_string()
}

pub fn toxicity_reply(value: f64) -> String {
    serde_json::json!({
        "attributeScores": {"TOXICITY": {"summaryScore": {"value": value, "type": "PROBABILITY"}}},
        "languages": ["en"]
    })
    .to_string()
}

pub const CLEAN_WORDS: [&str; 6] = ["sunny", "garden", "river", "window", "music", "table"];

/// Toxic vocabulary for the scripted sweeps; every token weighs 1.
pub const TOXIC_WORDS: [&str; 12] = [
    "tox00", "tox01", "tox02", "tox03", "tox04", "tox05", "tox06", "tox07", "tox08", "tox09", "tox10",
    "tox11",
];

pub fn toxic_lexicon() -> ToxicLexicon {
    TOXIC_WORDS
        .iter()
        .fold(ToxicLexicon::new("test-toxic"), |l, w| l.with(w, 1.0))
}

fn last_user(messages: &[ChatMessage]) -> &str {
    messages.last().map(|m| m.content.as_str()).unwrap_or("")
}

/// Text between `start` and the following `=== END ===`.
fn section<'a>(text: &'a str, start: &str) -> Option<&'a str> {
    let from = text.rfind(start)? + start.len();
    let rest = &text[from..];
    Some(rest[..rest.find("=== END ===").unwrap_or(rest.len())].trim())
}

fn is_critique_request(text: &str) -> bool {
    text.contains("=== CONTINUATION ===") || text.contains("=== PROPOSED ANSWER ===")
}

/// Toxic tokens present in `text`, in order of first appearance.
pub fn toxic_tokens(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in lexicon_tokens(text) {
        if TOXIC_WORDS.contains(&t.as_str()) && !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

/// Generator for the detox sweep. Its first draft repeats the prompt; a
/// refinement request drops every token named in a critique and keeps the
/// rest of the previous output.
pub fn detox_generator() -> FnBackend {
    FnBackend::new("gen", |messages, _| {
        let text = last_user(messages);
        if is_critique_request(text) {
            return critic_reply(0, text);
        }
        if let Some(prev) = section(text, "=== PREVIOUS OUTPUT ===\n") {
            let feedback = text.split("=== FEEDBACK ===").nth(1).unwrap_or("");
            let flagged: Vec<String> = feedback
                .lines()
                .filter_map(|l| l.strip_prefix("remove: "))
                .map(|s| s.trim().to_owned())
                .collect();
            let prev = prev.split("=== FEEDBACK ===").next().unwrap_or(prev).trim();
            let kept: Vec<&str> = prev
                .split_whitespace()
                .filter(|w| !flagged.iter().any(|f| f == w))
                .collect();
            return Ok(kept.join(" "));
        }
        let prompt = section(text, "=== PROMPT ===").unwrap_or(text);
        Ok(prompt
            .lines()
            .rfind(|l| l.starts_with("Input:"))
            .map(|l| l.trim_start_matches("Input:").trim().to_owned())
            .unwrap_or_else(|| prompt.to_owned()))
    })
}

/// Critic `j` (0-based ensemble position) flags the j-th toxic token of the
/// output under review, if there is one.
fn critic_reply(j: usize, text: &str) -> Result<String, String> {
    let output = section(text, "=== CONTINUATION ===").ok_or("critique request without continuation")?;
    match toxic_tokens(output).get(j) {
        Some(tok) => Ok(format!("VERDICT: ISSUES\nremove: {tok}")),
        None => Ok("VERDICT: OK\nNothing further to remove.".to_owned()),
    }
}

pub fn detox_critic(j: usize) -> FnBackend {
    FnBackend::new(format!("critic{j}"), move |messages, _| critic_reply(j, last_user(messages)))
}

/// Synthetic detox prompts: 1–3 clean words followed by 5–12 distinct toxic
/// tokens, deterministic in `n`.
pub fn detox_prompts(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let clean = 1 + i % 3;
            let toxic = 5 + (i * 7) % 8;
            let mut words: Vec<&str> = (0..clean).map(|k| CLEAN_WORDS[(i + k) % CLEAN_WORDS.len()]).collect();
            words.extend((0..toxic).map(|k| TOXIC_WORDS[(i + k) % TOXIC_WORDS.len()]));
            words.join(" ")
        })
        .collect()
}

pub fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) {
    let body: Vec<String> = lines.into_iter().collect();
    std::fs::write(path, body.join("\n") + "\n").unwrap();
}

pub fn write_toxicity_dataset(path: &Path, prompts: &[String]) {
    write_lines(
        path,
        prompts
            .iter()
            .enumerate()
            .map(|(i, p)| serde_json::json!({"id": format!("p{i:03}"), "prompt_text": p}).to_string()),
    );
}

/// Index `i` of a synthetic question "What is item i?".
fn item_index(text: &str) -> Option<usize> {
    let at = text.rfind("What is item ")? + "What is item ".len();
    text[at..].split('?').next()?.trim().parse().ok()
}

pub fn qa_question(i: usize) -> String {
    format!("What is item {i}?")
}

pub fn qa_gold(i: usize) -> String {
    format!("answer{i}")
}

/// The generator itself knows items with `i % 4 == 0`; ensemble member `j`
/// (0 = the generator as critic) knows `i % 4 <= j + 1`. Knowledge is nested,
/// so adding members never loses a correction.
fn knows(member: usize, i: usize) -> bool {
    i % 4 <= member + 1
}

fn qa_critic_reply(member: usize, text: &str) -> Result<String, String> {
    let i = item_index(section(text, "=== QUESTION ===").unwrap_or(text)).ok_or("no item index")?;
    let proposed = section(text, "=== PROPOSED ANSWER ===").ok_or("no proposed answer")?;
    let correct = qa_gold(i);
    if proposed.contains(&format!("answer is {correct}.")) || !knows(member, i) {
        Ok("VERDICT: OK\nLooks right to me.".into())
    } else {
        Ok(format!("VERDICT: ISSUES\nThat is wrong. The correct answer is {correct}."))
    }
}

pub fn qa_generator() -> FnBackend {
    FnBackend::new("gen", |messages, _| {
        let text = last_user(messages);
        if is_critique_request(text) {
            return qa_critic_reply(0, text);
        }
        if let Some(feedback) = text.split("=== FEEDBACK ===").nth(1) {
            if let Some(at) = feedback.find("The correct answer is ") {
                let rest = &feedback[at + "The correct answer is ".len()..];
                let ans = rest.split('.').next().unwrap_or("").trim();
                return Ok(format!("Checking again. So the answer is {ans}."));
            }
            let prev = section(text, "=== PREVIOUS OUTPUT ===\n").unwrap_or("");
            let prev = prev.split("=== FEEDBACK ===").next().unwrap_or(prev).trim();
            return Ok(prev.to_owned());
        }
        let i = item_index(text).ok_or("no item index")?;
        Ok(if i % 4 == 0 {
            format!("I recall this one. So the answer is {}.", qa_gold(i))
        } else {
            format!("Not sure. So the answer is guess{i}.")
        })
    })
}

pub fn qa_critic(member: usize) -> FnBackend {
    FnBackend::new(format!("critic{member}"), move |messages, _| {
        qa_critic_reply(member, last_user(messages))
    })
}

pub fn write_qa_dataset(path: &Path, n: usize) {
    write_lines(
        path,
        (0..n).map(|i| {
            serde_json::json!({"id": format!("q{i:03}"), "question": qa_question(i), "answers": [qa_gold(i)]})
                .to_string()
        }),
    );
}

/// Delays each call by an amount derived from the prompt so examples finish
/// out of order.
pub struct Jitter(pub Arc<dyn Backend>);

#[async_trait]
impl Backend for Jitter {
    fn id(&self) -> &str {
        self.0.id()
    }
    fn model_name(&self) -> &str {
        self.0.model_name()
    }
    async fn complete(&self, m: &[ChatMessage], p: &GenerationParams) -> Result<String, BackendError> {
        let h = sha256_hex(m.last().map(|m| m.content.as_str()).unwrap_or(""));
        let ms = u64::from_str_radix(&h[..2], 16).unwrap() % 15;
        tokio::time::sleep(Duration::from_millis(ms)).await;
        self.0.complete(m, p).await
    }
}

/// Passes calls through until `limit` calls have started, then signals and
/// never completes another one.
pub struct Gate {
    pub inner: Arc<dyn Backend>,
    pub calls: Arc<AtomicU64>,
    pub limit: u64,
    pub tripped: Arc<tokio::sync::Notify>,
}

#[async_trait]
impl Backend for Gate {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
    async fn complete(&self, m: &[ChatMessage], p: &GenerationParams) -> Result<String, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.limit {
            self.tripped.notify_one();
            std::future::pending::<()>().await;
        }
        self.inner.complete(m, p).await
    }
}

