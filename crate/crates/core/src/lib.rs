//! Ensemble-of-critics self-refinement.
//!
//! A generator drafts an output, a set of critic models reviews it, and the
//! non-ok critiques are folded back into the prompt until a task-specific
//! stopping rule fires. Backends speak the chat-completions wire format;
//! task adapters supply prompts, answer extraction and stopping rules; the
//! harness runs datasets end to end and aggregates metrics.

pub mod backend;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod refine;
pub mod tasks;
pub mod text;
pub mod toxicity;

pub use backend::{Backend, BackendError, BackendErrorKind, ChatMessage, Role};
pub use error::ConfigError;
pub use refine::{
    collect_critiques, is_satisfactory, refine_prompt, run_refinement, run_vanilla, Critique,
    CritiqueSet, EnsembleSpec, GenerationParams, IterationRecord, LoopConfig, PromptContext,
    RefineError, RefinementTrace, StopReason, StopVariant, Verdict,
};
pub use tasks::{TaskAdapter, TaskKind};
