//! Exact match, token F1, distinct-n and report aggregation.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refine::RefinementTrace;
use crate::tasks::{extract_answer, TaskKind};
use crate::text::is_unicode_punctuation;
use crate::toxicity::{final_score, mean_final_toxicity, MeanToxicityError, ToxicityScorer};

/// Lowercased, punctuation-free, article-free, whitespace-collapsed text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizedAnswer(String);

impl NormalizedAnswer {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split(' ').filter(|t| !t.is_empty())
    }
}

/// Lowercase, drop Unicode punctuation, drop the articles `a`/`an`/`the`,
/// collapse whitespace.
pub fn normalize_answer(text: &str) -> NormalizedAnswer {
    let lowered = text.to_lowercase();
    let stripped: String = lowered.chars().filter(|c| !is_unicode_punctuation(*c)).collect();
    let words: Vec<&str> = stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect();
    NormalizedAnswer(words.join(" "))
}

/// 1 when the normalized prediction equals some normalized gold answer.
pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> u8 {
    let p = normalize_answer(prediction);
    u8::from(golds.iter().any(|g| normalize_answer(g.as_ref()) == p))
}

/// Character-exact variant with no normalization.
pub fn exact_match_raw<S: AsRef<str>>(prediction: &str, golds: &[S]) -> u8 {
    u8::from(golds.iter().any(|g| g.as_ref() == prediction))
}

fn f1_pair(pred: &NormalizedAnswer, gold: &NormalizedAnswer) -> f64 {
    let p: Vec<&str> = pred.tokens().collect();
    let g: Vec<&str> = gold.tokens().collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Multiset token F1 against the best-matching gold answer.
pub fn token_f1<S: AsRef<str>>(prediction: &str, golds: &[S]) -> f64 {
    let p = normalize_answer(prediction);
    golds
        .iter()
        .map(|g| f1_pair(&p, &normalize_answer(g.as_ref())))
        .fold(0.0, f64::max)
}

/// Distinct-n over a set of outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinctN {
    /// Mean over outputs of unique/total n-grams (outputs shorter than n skipped).
    pub mean: f64,
    /// Unique n-grams across all outputs over total n-grams.
    pub corpus: f64,
    /// `(unique, total)` for each output that has at least one n-gram.
    pub per_output: Vec<(usize, usize)>,
    pub corpus_counts: (usize, usize),
    /// No output had `n` tokens; the figures are 0.
    pub degenerate: bool,
}

pub fn distinct_n<S: AsRef<str>>(outputs: &[S], n: usize) -> DistinctN {
    assert!(n >= 1, "distinct_n needs n >= 1");
    let tokenized: Vec<Vec<String>> = outputs
        .iter()
        .map(|o| o.as_ref().to_lowercase().split_whitespace().map(str::to_owned).collect())
        .collect();
    let mut per_output = Vec::new();
    let mut corpus: HashSet<&[String]> = HashSet::new();
    let mut corpus_total = 0;
    for tokens in &tokenized {
        if tokens.len() < n {
            continue;
        }
        let grams: Vec<&[String]> = tokens.windows(n).collect();
        let unique: HashSet<&[String]> = grams.iter().copied().collect();
        per_output.push((unique.len(), grams.len()));
        corpus_total += grams.len();
        corpus.extend(grams);
    }
    if per_output.is_empty() {
        tracing::warn!(n, "no output has enough tokens for distinct-n");
        return DistinctN {
            mean: 0.0,
            corpus: 0.0,
            per_output,
            corpus_counts: (0, 0),
            degenerate: true,
        };
    }
    let mean = per_output.iter().map(|&(u, t)| u as f64 / t as f64).sum::<f64>() / per_output.len() as f64;
    DistinctN {
        mean,
        corpus: corpus.len() as f64 / corpus_total as f64,
        per_output,
        corpus_counts: (corpus.len(), corpus_total),
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: u32,
    pub metric: String,
    pub value: f64,
}

/// Headline metrics for one run plus iteration and critic-count curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_name: String,
    pub n_examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_toxicity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist2_corpus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist3_corpus: Option<f64>,
    /// Metric as if every run had stopped at iteration `x` (carry-forward).
    pub iteration_curve: Vec<CurvePoint>,
    /// One point per critic count; filled by the sweep runner.
    pub critic_curve: Vec<CurvePoint>,
    pub exclusions: usize,
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no traces to aggregate")]
    Empty,
    #[error("traces mix tasks `{0}` and `{1}`")]
    MixedTasks(String, String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Toxicity(#[from] MeanToxicityError),
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn sort_curve(curve: &mut [CurvePoint]) {
    curve.sort_by(|a, b| a.x.cmp(&b.x).then_with(|| a.metric.cmp(&b.metric)));
}

/// Prediction of `trace` as of record `k` (carry-forward past the end).
fn qa_prediction(trace: &RefinementTrace, k: usize) -> String {
    match trace.record_at(k) {
        Some(r) => r.extracted_answer.clone().unwrap_or_else(|| extract_answer(&r.output)),
        None => String::new(),
    }
}

/// Aggregates the task's headline metrics over final outputs, plus the
/// per-iteration curve.
pub async fn aggregate_report(
    traces: &[RefinementTrace],
    scorer: Option<&dyn ToxicityScorer>,
) -> Result<MetricReport, MetricError> {
    let first = traces.first().ok_or(MetricError::Empty)?;
    if let Some(other) = traces.iter().find(|t| t.task_name != first.task_name) {
        return Err(MetricError::MixedTasks(first.task_name.clone(), other.task_name.clone()));
    }
    let kind = TaskKind::parse(&first.task_name)
        .ok_or_else(|| MetricError::UnknownTask(first.task_name.clone()))?;
    let max_records = traces.iter().map(|t| t.records.len()).max().unwrap_or(0);

    let mut report = MetricReport {
        task_name: first.task_name.clone(),
        n_examples: traces.len(),
        em: None,
        f1: None,
        mean_toxicity: None,
        dist2: None,
        dist3: None,
        dist2_corpus: None,
        dist3_corpus: None,
        iteration_curve: Vec::new(),
        critic_curve: Vec::new(),
        exclusions: 0,
    };

    match kind {
        TaskKind::FactualQa => {
            let scored: Vec<(&RefinementTrace, &Vec<String>)> = traces
                .iter()
                .filter_map(|t| t.references.as_ref().filter(|r| !r.is_empty()).map(|r| (t, r)))
                .collect();
            report.exclusions = traces.len() - scored.len();
            let at = |k: usize| {
                let ems: Vec<f64> = scored
                    .iter()
                    .map(|(t, g)| exact_match(&qa_prediction(t, k), g) as f64)
                    .collect();
                let f1s: Vec<f64> = scored.iter().map(|(t, g)| token_f1(&qa_prediction(t, k), g)).collect();
                (mean(&ems), mean(&f1s))
            };
            let (em, f1) = at(usize::MAX);
            report.em = em;
            report.f1 = f1;
            for k in 0..max_records {
                let (em, f1) = at(k);
                if let (Some(em), Some(f1)) = (em, f1) {
                    report.iteration_curve.push(CurvePoint {
                        x: k as u32,
                        metric: "em".into(),
                        value: em,
                    });
                    report.iteration_curve.push(CurvePoint {
                        x: k as u32,
                        metric: "f1".into(),
                        value: f1,
                    });
                }
            }
        }
        TaskKind::Toxicity => {
            let m = mean_final_toxicity(traces, scorer).await?;
            report.mean_toxicity = Some(m.mean);
            report.exclusions = m.exclusions;
            let finals: Vec<&str> = traces.iter().map(|t| t.final_output.as_str()).collect();
            let d2 = distinct_n(&finals, 2);
            let d3 = distinct_n(&finals, 3);
            report.dist2 = Some(d2.mean);
            report.dist3 = Some(d3.mean);
            report.dist2_corpus = Some(d2.corpus);
            report.dist3_corpus = Some(d3.corpus);
            for k in 0..max_records {
                let mut values = Vec::with_capacity(traces.len());
                for t in traces {
                    let Some(record) = t.record_at(k) else { continue };
                    let value = match record.task_score {
                        Some(v) => Some(v),
                        None if k + 1 >= t.records.len() => final_score(t, scorer).await.ok(),
                        None => match scorer {
                            Some(s) => s.score(&record.output).await.ok().map(|s| s.value),
                            None => None,
                        },
                    };
                    values.extend(value);
                }
                if let Some(v) = mean(&values) {
                    report.iteration_curve.push(CurvePoint {
                        x: k as u32,
                        metric: "mean_toxicity".into(),
                        value: v,
                    });
                }
            }
        }
        TaskKind::Generic => {}
    }
    sort_curve(&mut report.iteration_curve);
    Ok(report)
}
