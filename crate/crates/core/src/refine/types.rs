use std::fmt;
use std::sync::Arc;

use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ChatMessage, Role};
use crate::error::ConfigError;
use crate::text::CanonicalWriter;

/// Sampling parameters forwarded to a completion backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nucleus_mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling_seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_output_tokens: 512,
            nucleus_mass: None,
            sampling_seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ConfigError::invalid(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(ConfigError::invalid("max_output_tokens must be >= 1"));
        }
        if let Some(p) = self.nucleus_mass {
            if !(p > 0.0 && p <= 1.0) {
                return Err(ConfigError::invalid(format!(
                    "nucleus_mass {p} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// How the initial context elicits reasoning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CotMode {
    #[default]
    FewShot,
    ZeroShotStepByStep,
    None,
}

/// Suffix appended to every prompt rendered in [`CotMode::ZeroShotStepByStep`].
pub const STEP_BY_STEP_SUFFIX: &str = "Let's think step by step";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub input: String,
    pub output: String,
}

/// Everything needed to render one prompt.
///
/// `task_instruction` is a template; the placeholders `{input}`, `{output}`,
/// `{feedback}` and `{examples}` are expanded in a single pass when the
/// context is rendered, so substituted text is never re-expanded.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptContext {
    pub system_preamble: String,
    pub few_shot_examples: Vec<FewShotExample>,
    pub task_instruction: String,
    pub input: String,
    /// Candidate output under review (critique prompts only).
    pub candidate_output: String,
    pub feedback_block: String,
    pub cot_mode: CotMode,
}

impl PromptContext {
    /// The rendered user turn.
    pub fn render_user(&self) -> String {
        let examples = if self.cot_mode == CotMode::FewShot {
            render_examples(&self.few_shot_examples)
        } else {
            String::new()
        };
        let mut text = super::prompt::expand(&self.task_instruction, |name| match name {
            "input" => Some(self.input.as_str()),
            "output" => Some(self.candidate_output.as_str()),
            "feedback" => Some(self.feedback_block.as_str()),
            "examples" => Some(examples.as_str()),
            _ => None,
        });
        if self.cot_mode == CotMode::ZeroShotStepByStep {
            let trimmed = text.trim_end().len();
            text.truncate(trimmed);
            if !text.is_empty() {
                text.push_str("\n\n");
            }
            text.push_str(STEP_BY_STEP_SUFFIX);
        }
        text
    }

    pub fn to_messages(&self) -> Vec<ChatMessage> {
        let mut messages = Vec::with_capacity(2);
        if !self.system_preamble.is_empty() {
            messages.push(ChatMessage::new(Role::System, self.system_preamble.clone()));
        }
        messages.push(ChatMessage::new(Role::User, self.render_user()));
        messages
    }

    /// Full rendered text, system preamble first.
    pub fn render(&self) -> String {
        let user = self.render_user();
        if self.system_preamble.is_empty() {
            user
        } else {
            format!("{}\n\n{}", self.system_preamble, user)
        }
    }

    /// Content hash of the rendered message list.
    pub fn digest(&self) -> String {
        messages_digest(&self.to_messages())
    }
}

pub(crate) fn messages_digest(messages: &[ChatMessage]) -> String {
    let mut w = CanonicalWriter::new();
    w.field(&messages.len().to_string());
    for m in messages {
        w.field(m.role.as_str()).field(&m.content);
    }
    w.digest_hex()
}

fn render_examples(examples: &[FewShotExample]) -> String {
    examples
        .iter()
        .map(|ex| format!("Input: {}\nOutput: {}", ex.input, ex.output))
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Issues,
    Unparseable,
}

impl Verdict {
    /// Unparseable counts as issues.
    pub fn is_ok(self) -> bool {
        self == Verdict::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critique {
    pub critic_id: String,
    pub verdict: Verdict,
    pub body: String,
    #[serde(skip)]
    pub iteration: u32,
}

/// Critiques gathered at one iteration, in ensemble order.
///
/// Serialized as a bare list; the iteration is implied by the owning record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CritiqueSet {
    pub iteration: u32,
    pub critiques: Vec<Critique>,
}

impl CritiqueSet {
    pub fn new(iteration: u32, critiques: Vec<Critique>) -> Self {
        Self {
            iteration,
            critiques,
        }
    }

    pub fn len(&self) -> usize {
        self.critiques.len()
    }

    pub fn is_empty(&self) -> bool {
        self.critiques.is_empty()
    }

    pub fn all_ok(&self) -> bool {
        self.critiques.iter().all(|c| c.verdict.is_ok())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Critique> {
        self.critiques.iter()
    }

    fn set_iteration(&mut self, iteration: u32) {
        self.iteration = iteration;
        for c in &mut self.critiques {
            c.iteration = iteration;
        }
    }
}

impl Serialize for CritiqueSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.critiques.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CritiqueSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let critiques = Vec::<Critique>::deserialize(deserializer)?;
        Ok(CritiqueSet {
            iteration: 0,
            critiques,
        })
    }
}

/// Generator, critics and how many members are engaged per iteration.
#[derive(Clone)]
pub struct EnsembleSpec {
    pub generator: Arc<dyn Backend>,
    pub critics: Vec<Arc<dyn Backend>>,
    /// `None` engages every member.
    pub subset_size: Option<usize>,
    pub include_generator_as_critic: bool,
}

impl fmt::Debug for EnsembleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnsembleSpec")
            .field("generator", &self.generator.id())
            .field(
                "critics",
                &self.critics.iter().map(|c| c.id()).collect::<Vec<_>>(),
            )
            .field("subset_size", &self.subset_size)
            .field(
                "include_generator_as_critic",
                &self.include_generator_as_critic,
            )
            .finish()
    }
}

impl EnsembleSpec {
    pub fn new(generator: Arc<dyn Backend>, critics: Vec<Arc<dyn Backend>>) -> Self {
        Self {
            generator,
            critics,
            subset_size: None,
            include_generator_as_critic: true,
        }
    }

    pub fn with_subset_size(mut self, t: usize) -> Self {
        self.subset_size = Some(t);
        self
    }

    pub fn with_generator_as_critic(mut self, include: bool) -> Self {
        self.include_generator_as_critic = include;
        self
    }

    /// Critic members in ensemble order: the generator first when included.
    pub fn members(&self) -> Vec<Arc<dyn Backend>> {
        let mut out = Vec::with_capacity(self.critics.len() + 1);
        if self.include_generator_as_critic {
            out.push(Arc::clone(&self.generator));
        }
        out.extend(self.critics.iter().cloned());
        out
    }

    pub fn full_size(&self) -> usize {
        self.critics.len() + usize::from(self.include_generator_as_critic)
    }

    pub fn effective_subset_size(&self) -> usize {
        self.subset_size.unwrap_or_else(|| self.full_size())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let full = self.full_size();
        if full == 0 {
            return Err(ConfigError::invalid(
                "ensemble has no critics and the generator is excluded as critic",
            ));
        }
        if let Some(t) = self.subset_size {
            if t == 0 {
                return Err(ConfigError::invalid("subset_size must be >= 1"));
            }
            if t > full {
                return Err(ConfigError::invalid(format!(
                    "subset_size {t} exceeds ensemble size {full}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub prompt_digest: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critiques: Option<CritiqueSet>,
    /// Set when the generation for this record failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopVariant {
    Satisfied,
    MaxIterations,
    StableAnswer,
    BackendError,
}

impl StopVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            StopVariant::Satisfied => "satisfied",
            StopVariant::MaxIterations => "max_iterations",
            StopVariant::StableAnswer => "stable_answer",
            StopVariant::BackendError => "backend_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopReason {
    pub variant: StopVariant,
    pub detail: String,
}

impl StopReason {
    pub fn new(variant: StopVariant, detail: impl Into<String>) -> Self {
        Self {
            variant,
            detail: detail.into(),
        }
    }
}

/// Audit record of one refinement run. Field order is the JSONL line order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub example_id: String,
    #[serde(rename = "task")]
    pub task_name: String,
    pub input: String,
    /// Gold answers carried along for QA traces so reports need only the trace file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
    pub seed: u64,
    pub stop_reason: StopReason,
    pub final_output: String,
    pub records: Vec<IterationRecord>,
    pub wall_time_ms: u64,
}

impl RefinementTrace {
    /// Restores the per-critique iteration indices dropped by serialization.
    pub fn reindex(&mut self) {
        for record in &mut self.records {
            if let Some(set) = record.critiques.as_mut() {
                set.set_iteration(record.index);
            }
        }
    }

    pub fn from_json_line(line: &str) -> serde_json::Result<Self> {
        let mut trace: RefinementTrace = serde_json::from_str(line)?;
        trace.reindex();
        Ok(trace)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serialization cannot fail")
    }

    /// Record `k`, or the last record when the trace stopped earlier.
    pub fn record_at(&self, k: usize) -> Option<&IterationRecord> {
        self.records.get(k).or_else(|| self.records.last())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub max_iterations: u32,
    pub params: GenerationParams,
    pub critic_params: GenerationParams,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_iterations: 4,
            params: GenerationParams::default(),
            critic_params: GenerationParams::default(),
        }
    }
}

impl LoopConfig {
    pub fn with_max_iterations(mut self, max_iterations: u32) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_iterations == 0 {
            return Err(ConfigError::invalid("max_iterations must be >= 1"));
        }
        self.params.validate()?;
        self.critic_params.validate()
    }
}
