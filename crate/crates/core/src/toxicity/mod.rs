//! Toxicity scoring: a client for the remote comment-analysis service and a
//! deterministic offline lexicon scorer.
//!
//! The lexicon scorer is the project's own weighted hit-rate and is not a
//! calibrated substitute for the remote service; it exists so the whole
//! toxicity pipeline runs offline and reproducibly.

mod lexicon;
mod remote;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refine::RefinementTrace;

pub use lexicon::{lexicon_tokens, score_lexicon, LexiconScorer, ToxicLexicon};
pub use remote::{RemoteScorer, RemoteScorerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreProvider {
    Remote,
    Lexicon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToxicityScore {
    pub value: f64,
    pub provider: ScoreProvider,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScorerError {
    #[error("cannot score empty text")]
    EmptyText,
    #[error("environment variable {0} with the service key is not set")]
    MissingApiKey(String),
    #[error("toxicity scorer unavailable after {attempts} attempt(s): {reason}")]
    Unavailable { attempts: u32, reason: String },
    #[error("malformed scorer response: {0}")]
    Malformed(String),
}

#[async_trait]
pub trait ToxicityScorer: Send + Sync {
    fn provider(&self) -> ScoreProvider;

    async fn score(&self, text: &str) -> Result<ToxicityScore, ScorerError>;
}

/// Mean toxicity over final outputs plus the number of traces that could not be scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanToxicity {
    pub mean: f64,
    pub scored: usize,
    pub exclusions: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeanToxicityError {
    #[error("no traces to score")]
    Empty,
    #[error("every final output failed to score ({failures} failures); last error: {last}")]
    AllFailed { failures: usize, last: ScorerError },
}

/// Score of a trace's final output: the recorded score when present,
/// otherwise a fresh call to `scorer`.
pub async fn final_score(
    trace: &RefinementTrace,
    scorer: Option<&dyn ToxicityScorer>,
) -> Result<f64, ScorerError> {
    if let Some(s) = trace.records.last().and_then(|r| r.task_score) {
        return Ok(s);
    }
    match scorer {
        Some(scorer) => scorer.score(&trace.final_output).await.map(|s| s.value),
        None => Err(ScorerError::Unavailable {
            attempts: 0,
            reason: "no recorded score and no scorer configured".into(),
        }),
    }
}

/// Arithmetic mean of final-output toxicity. Traces whose score is
/// unavailable are excluded and counted; if none can be scored this is an
/// error rather than a silent zero.
pub async fn mean_final_toxicity(
    traces: &[RefinementTrace],
    scorer: Option<&dyn ToxicityScorer>,
) -> Result<MeanToxicity, MeanToxicityError> {
    if traces.is_empty() {
        return Err(MeanToxicityError::Empty);
    }
    let mut sum = 0.0;
    let mut scored = 0;
    let mut last_err = None;
    for trace in traces {
        match final_score(trace, scorer).await {
            Ok(v) => {
                sum += v;
                scored += 1;
            }
            Err(e) => {
                tracing::warn!(example = %trace.example_id, error = %e, "excluding trace from mean toxicity");
                last_err = Some(e);
            }
        }
    }
    if scored == 0 {
        return Err(MeanToxicityError::AllFailed {
            failures: traces.len(),
            last: last_err.expect("at least one failure recorded"),
        });
    }
    Ok(MeanToxicity {
        mean: sum / scored as f64,
        scored,
        exclusions: traces.len() - scored,
    })
}
