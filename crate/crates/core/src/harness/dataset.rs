use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::HarnessError;
use crate::tasks::{QaExample, TaskKind, ToxicityExample};

/// Share of malformed lines above which a load fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetRecord {
    Qa(QaExample),
    Toxicity(ToxicityExample),
    Generic { id: String, input: String },
}

impl DatasetRecord {
    pub fn id(&self) -> &str {
        match self {
            DatasetRecord::Qa(q) => &q.id,
            DatasetRecord::Toxicity(t) => &t.id,
            DatasetRecord::Generic { id, .. } => id,
        }
    }

    /// Text handed to the generator.
    pub fn input(&self) -> &str {
        match self {
            DatasetRecord::Qa(q) => &q.question,
            DatasetRecord::Toxicity(t) => &t.prompt_text,
            DatasetRecord::Generic { input, .. } => input,
        }
    }

    /// Gold answers, for QA records.
    pub fn references(&self) -> Option<&[String]> {
        match self {
            DatasetRecord::Qa(q) => Some(&q.gold_answers),
            _ => None,
        }
    }
}

#[derive(Deserialize)]
struct QaLine {
    id: String,
    question: String,
    answers: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ToxicityLine {
    Nested {
        id: Option<serde_json::Value>,
        prompt: NestedPrompt,
    },
    Flat {
        id: serde_json::Value,
        prompt_text: String,
    },
}

#[derive(Deserialize)]
struct NestedPrompt {
    text: String,
    toxicity: Option<f64>,
}

#[derive(Deserialize)]
struct GenericLine {
    id: serde_json::Value,
    input: String,
}

fn id_string(v: serde_json::Value) -> Result<String, String> {
    match v {
        serde_json::Value::String(s) if !s.is_empty() => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(format!("unusable id {other}")),
    }
}

fn parse_line(line: &str, lineno: usize, task: TaskKind) -> Result<DatasetRecord, String> {
    let err = |e: serde_json::Error| e.to_string();
    match task {
        TaskKind::FactualQa => {
            let q: QaLine = serde_json::from_str(line).map_err(err)?;
            if q.answers.is_empty() {
                return Err("no gold answers".into());
            }
            Ok(DatasetRecord::Qa(QaExample {
                id: q.id,
                question: q.question,
                gold_answers: q.answers,
            }))
        }
        TaskKind::Toxicity => {
            let (id, prompt_text, prompt_toxicity) = match serde_json::from_str(line).map_err(err)? {
                ToxicityLine::Nested { id, prompt } => {
                    let id = match id {
                        Some(v) => id_string(v)?,
                        None => format!("line-{lineno}"),
                    };
                    (id, prompt.text, prompt.toxicity)
                }
                ToxicityLine::Flat { id, prompt_text } => (id_string(id)?, prompt_text, None),
            };
            Ok(DatasetRecord::Toxicity(ToxicityExample {
                id,
                prompt_text,
                prompt_toxicity,
            }))
        }
        TaskKind::Generic => {
            let g: GenericLine = serde_json::from_str(line).map_err(err)?;
            Ok(DatasetRecord::Generic {
                id: id_string(g.id)?,
                input: g.input,
            })
        }
    }
    .and_then(|r| {
        if r.input().trim().is_empty() {
            Err("empty input text".into())
        } else {
            Ok(r)
        }
    })
}

/// Parses JSONL text for `task`. Blank lines are ignored; up to 1% of the
/// remaining lines may be malformed and are skipped with a warning.
pub fn parse_dataset(text: &str, task: TaskKind) -> Result<Vec<DatasetRecord>, HarnessError> {
    let mut records = Vec::new();
    let mut bad: Vec<(usize, String)> = Vec::new();
    let mut total = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(line, i + 1, task) {
            Ok(r) => records.push(r),
            Err(e) => bad.push((i + 1, e)),
        }
    }
    if total == 0 {
        return Err(HarnessError::Dataset("dataset has no records".into()));
    }
    if bad.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        let lines: Vec<String> = bad.iter().map(|(n, _)| n.to_string()).collect();
        return Err(HarnessError::Dataset(format!(
            "{} of {total} lines malformed for task `{task}` (lines {}); first error: {}",
            bad.len(),
            lines.join(", "),
            bad[0].1
        )));
    }
    for (n, e) in &bad {
        tracing::warn!(line = n, error = %e, "skipping malformed dataset line");
    }
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id()) {
            return Err(HarnessError::Dataset(format!("duplicate id `{}`", r.id())));
        }
    }
    Ok(records)
}

pub fn load_dataset(path: &Path, task: TaskKind) -> Result<Vec<DatasetRecord>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_dataset(&text, task)
}

/// Uniform sample without replacement: a partial Fisher–Yates shuffle driven
/// by ChaCha8 seeded with `seed`. Returned in sampled order.
pub fn sample_dataset(
    records: &[DatasetRecord],
    sample_size: usize,
    seed: u64,
) -> Result<Vec<DatasetRecord>, HarnessError> {
    if sample_size > records.len() {
        return Err(HarnessError::Dataset(format!(
            "sample_size {sample_size} exceeds dataset size {}",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..records.len()).collect();
    for i in 0..sample_size {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    Ok(idx[..sample_size].iter().map(|&i| records[i].clone()).collect())
}
