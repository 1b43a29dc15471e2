//! Task adapters: prompt templates, answer extraction and stopping rules for
//! toxicity reduction, factual QA and a task-agnostic fallback.

mod answer;
mod manifest;

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::refine::prompt::placeholders_in;
use crate::refine::{
    CotMode, CritiqueSet, FewShotExample, IterationRecord, PromptContext, StopReason, StopVariant,
};
use crate::toxicity::ToxicityScorer;

pub use answer::extract_answer;
pub use manifest::AdapterManifest;

/// Score threshold under which toxicity refinement stops.
pub const DEFAULT_TOXICITY_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Toxicity,
    FactualQa,
    Generic,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Toxicity => "toxicity",
            TaskKind::FactualQa => "factual_qa",
            TaskKind::Generic => "generic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "toxicity" => Some(TaskKind::Toxicity),
            "factual_qa" | "qa" => Some(TaskKind::FactualQa),
            "generic" => Some(TaskKind::Generic),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stopping predicate of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Satisfaction {
    /// Scorer value strictly below `threshold`. Critiques are not consulted.
    ToxicityBelow {
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    /// The last `consecutive` extracted answers are equal after normalization.
    /// `2` means one unchanged transition; `3` is the stricter reading.
    StableAnswer {
        #[serde(default = "default_consecutive")]
        consecutive: usize,
    },
    /// Every engaged critic returned `VERDICT: OK`.
    UnanimousOk,
}

fn default_threshold() -> f64 {
    DEFAULT_TOXICITY_THRESHOLD
}

fn default_consecutive() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToxicityExample {
    pub id: String,
    pub prompt_text: String,
    pub prompt_toxicity: Option<f64>,
}

/// Binds the generic loop to one task. Immutable once built.
#[derive(Clone)]
pub struct TaskAdapter {
    kind: TaskKind,
    system_preamble: String,
    critic_preamble: String,
    initial_template: String,
    critique_template: String,
    refine_template: String,
    few_shot_examples: Vec<FewShotExample>,
    cot_mode: CotMode,
    max_iterations_default: u32,
    satisfaction: Satisfaction,
    note: Option<String>,
    scorer: Option<Arc<dyn ToxicityScorer>>,
}

impl fmt::Debug for TaskAdapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskAdapter")
            .field("kind", &self.kind)
            .field("cot_mode", &self.cot_mode)
            .field("max_iterations_default", &self.max_iterations_default)
            .field("satisfaction", &self.satisfaction)
            .field("few_shot_examples", &self.few_shot_examples.len())
            .field("has_scorer", &self.scorer.is_some())
            .finish()
    }
}

impl TaskAdapter {
    /// Built-in adapter for `kind`, loaded from the bundled manifest.
    pub fn builtin(kind: TaskKind) -> Self {
        manifest::builtin(kind)
    }

    pub fn toxicity(scorer: Arc<dyn ToxicityScorer>) -> Self {
        Self::builtin(TaskKind::Toxicity).with_scorer(scorer)
    }

    pub fn factual_qa() -> Self {
        Self::builtin(TaskKind::FactualQa)
    }

    pub fn generic() -> Self {
        Self::builtin(TaskKind::Generic)
    }

    /// Loads an adapter manifest (TOML) whose template paths are relative to it.
    pub fn from_manifest_file(path: &Path) -> Result<Self, ConfigError> {
        manifest::load_file(path)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        kind: TaskKind,
        system_preamble: String,
        critic_preamble: String,
        initial_template: String,
        critique_template: String,
        refine_template: String,
        few_shot_examples: Vec<FewShotExample>,
        cot_mode: CotMode,
        max_iterations_default: u32,
        satisfaction: Satisfaction,
        note: Option<String>,
    ) -> Result<Self, ConfigError> {
        let adapter = Self {
            kind,
            system_preamble,
            critic_preamble,
            initial_template: initial_template.trim_end().to_owned(),
            critique_template: critique_template.trim_end().to_owned(),
            refine_template: refine_template.trim_end().to_owned(),
            few_shot_examples,
            cot_mode,
            max_iterations_default,
            satisfaction,
            note,
            scorer: None,
        };
        adapter.validate()?;
        Ok(adapter)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let require = |name: &str, template: &str, needed: &[&str]| -> Result<(), ConfigError> {
            let present = placeholders_in(template);
            for p in needed {
                if !present.contains(p) {
                    return Err(ConfigError::MissingPlaceholder {
                        template: format!("{}:{name}", self.kind),
                        placeholder: (*p).to_owned(),
                    });
                }
            }
            Ok(())
        };
        let mut initial = vec!["input"];
        if self.cot_mode == CotMode::FewShot && !self.few_shot_examples.is_empty() {
            initial.push("examples");
        }
        require("initial", &self.initial_template, &initial)?;
        require("critique", &self.critique_template, &["input", "output"])?;
        require("refine", &self.refine_template, &["input", "feedback"])?;
        if self.max_iterations_default == 0 {
            return Err(ConfigError::invalid("max_iterations_default must be >= 1"));
        }
        match self.satisfaction {
            Satisfaction::ToxicityBelow { threshold } if !(threshold > 0.0 && threshold <= 1.0) => {
                Err(ConfigError::invalid(format!("toxicity threshold {threshold} outside (0, 1]")))
            }
            Satisfaction::StableAnswer { consecutive } if consecutive < 2 => Err(ConfigError::invalid(
                "stable_answer needs consecutive >= 2",
            )),
            _ => Ok(()),
        }
    }

    pub fn with_scorer(mut self, scorer: Arc<dyn ToxicityScorer>) -> Self {
        self.scorer = Some(scorer);
        self
    }

    pub fn with_cot_mode(mut self, mode: CotMode) -> Result<Self, ConfigError> {
        self.cot_mode = mode;
        self.validate()?;
        Ok(self)
    }

    pub fn with_satisfaction(mut self, satisfaction: Satisfaction) -> Result<Self, ConfigError> {
        self.satisfaction = satisfaction;
        self.validate()?;
        Ok(self)
    }

    pub fn with_few_shot_examples(mut self, examples: Vec<FewShotExample>) -> Result<Self, ConfigError> {
        self.few_shot_examples = examples;
        self.validate()?;
        Ok(self)
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.as_str()
    }

    pub fn cot_mode(&self) -> CotMode {
        self.cot_mode
    }

    pub fn max_iterations_default(&self) -> u32 {
        self.max_iterations_default
    }

    pub fn satisfaction(&self) -> &Satisfaction {
        &self.satisfaction
    }

    pub fn few_shot_examples(&self) -> &[FewShotExample] {
        &self.few_shot_examples
    }

    pub fn note(&self) -> Option<&str> {
        self.note.as_deref()
    }

    pub fn scorer(&self) -> Option<&Arc<dyn ToxicityScorer>> {
        self.scorer.as_ref()
    }

    /// Checks that the adapter can run: a score-based predicate needs a scorer.
    pub fn check_runnable(&self) -> Result<(), ConfigError> {
        if matches!(self.satisfaction, Satisfaction::ToxicityBelow { .. }) && self.scorer.is_none() {
            return Err(ConfigError::invalid(format!(
                "task `{}` uses a toxicity threshold but has no scorer",
                self.kind
            )));
        }
        Ok(())
    }

    /// Initial context x for `input`; the feedback block is empty.
    pub fn build_initial_prompt(&self, input: &str) -> PromptContext {
        PromptContext {
            system_preamble: self.system_preamble.clone(),
            few_shot_examples: self.few_shot_examples.clone(),
            task_instruction: self.initial_template.clone(),
            input: input.to_owned(),
            candidate_output: String::new(),
            feedback_block: String::new(),
            cot_mode: self.cot_mode,
        }
    }

    /// Critic prompt carrying the original input and `output` verbatim.
    pub fn build_critique_prompt(&self, context: &PromptContext, output: &str) -> PromptContext {
        PromptContext {
            system_preamble: self.critic_preamble.clone(),
            few_shot_examples: Vec::new(),
            task_instruction: self.critique_template.clone(),
            input: context.input.clone(),
            candidate_output: output.to_owned(),
            feedback_block: String::new(),
            cot_mode: CotMode::None,
        }
    }

    /// Refinement prompt x′ around an already-built feedback block.
    pub fn build_refine_prompt(&self, context: &PromptContext, feedback_block: String) -> PromptContext {
        PromptContext {
            system_preamble: self.system_preamble.clone(),
            few_shot_examples: self.few_shot_examples.clone(),
            task_instruction: self.refine_template.clone(),
            input: context.input.clone(),
            candidate_output: String::new(),
            feedback_block,
            cot_mode: self.cot_mode,
        }
    }

    /// Task score and extracted answer for a fresh generation.
    pub async fn annotate(&self, output: &str) -> (Option<f64>, Option<String>) {
        let wants_score = self.kind == TaskKind::Toxicity
            || matches!(self.satisfaction, Satisfaction::ToxicityBelow { .. });
        let score = match &self.scorer {
            Some(scorer) if wants_score => match scorer.score(output).await {
                Ok(s) => Some(s.value),
                Err(e) => {
                    tracing::warn!(error = %e, "toxicity scoring failed; continuing without a score");
                    None
                }
            },
            _ => None,
        };
        let answer = (self.kind == TaskKind::FactualQa
            || matches!(self.satisfaction, Satisfaction::StableAnswer { .. }))
        .then(|| extract_answer(output));
        (score, answer)
    }

    /// Applies the task's stopping predicate to the latest record.
    pub fn check_stop(&self, critiques: &CritiqueSet, records: &[IterationRecord]) -> Option<StopReason> {
        match self.satisfaction {
            Satisfaction::ToxicityBelow { threshold } => {
                check_stop_toxicity_score(records.last()?.task_score, threshold)
            }
            Satisfaction::StableAnswer { consecutive } => check_stop_qa_window(records, consecutive),
            Satisfaction::UnanimousOk => {
                (!critiques.is_empty() && critiques.all_ok()).then(|| {
                    StopReason::new(
                        StopVariant::Satisfied,
                        format!("all {} critics returned VERDICT: OK", critiques.len()),
                    )
                })
            }
        }
    }
}

/// `satisfied` when `score < threshold` (strict). A missing score never stops.
pub fn check_stop_toxicity_score(score: Option<f64>, threshold: f64) -> Option<StopReason> {
    let s = score?;
    (s < threshold).then(|| {
        StopReason::new(
            StopVariant::Satisfied,
            format!("toxicity {s} below threshold {threshold}"),
        )
    })
}

/// Scores `output` and applies the strict threshold. A scorer failure is
/// logged and yields no stop.
pub async fn check_stop_toxicity(
    output: &str,
    scorer: &dyn ToxicityScorer,
    threshold: f64,
) -> (Option<StopReason>, Option<f64>) {
    match scorer.score(output).await {
        Ok(s) => (check_stop_toxicity_score(Some(s.value), threshold), Some(s.value)),
        Err(e) => {
            tracing::warn!(error = %e, "toxicity scorer failed");
            (None, None)
        }
    }
}

/// `stable_answer` when the last two records' answers agree after normalization.
pub fn check_stop_qa(records: &[IterationRecord]) -> Option<StopReason> {
    check_stop_qa_window(records, 2)
}

/// Generalization of [`check_stop_qa`] over the last `consecutive` records.
pub fn check_stop_qa_window(records: &[IterationRecord], consecutive: usize) -> Option<StopReason> {
    let consecutive = consecutive.max(2);
    if records.len() < consecutive {
        return None;
    }
    let answers: Vec<String> = records[records.len() - consecutive..]
        .iter()
        .map(|r| match &r.extracted_answer {
            Some(a) => crate::metrics::normalize_answer(a).into_string(),
            None => extract_answer(&r.output),
        })
        .collect();
    answers.windows(2).all(|w| w[0] == w[1]).then(|| {
        StopReason::new(
            StopVariant::StableAnswer,
            format!("answer `{}` unchanged across {consecutive} generations", answers[0]),
        )
    })
}
