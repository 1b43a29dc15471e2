use std::path::Path;

use serde::Deserialize;

use super::{Satisfaction, TaskAdapter, TaskKind};
use crate::error::ConfigError;
use crate::refine::{CotMode, FewShotExample};

/// On-disk description of an adapter. Template and example paths are
/// resolved relative to the manifest file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterManifest {
    pub name: TaskKind,
    #[serde(default)]
    pub cot_mode: CotMode,
    pub max_iterations_default: Option<u32>,
    #[serde(default)]
    pub system_preamble: String,
    #[serde(default)]
    pub critic_preamble: String,
    pub initial_template: String,
    pub critique_template: String,
    pub refine_template: String,
    /// JSONL file of `{"input": ..., "output": ...}` exemplars.
    pub examples: Option<String>,
    pub note: Option<String>,
    pub satisfaction: Option<Satisfaction>,
}

impl AdapterManifest {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::invalid(format!("adapter manifest: {e}")))
    }

    /// Builds the adapter, reading referenced files through `read`.
    pub fn build(
        self,
        read: impl Fn(&str) -> Result<String, ConfigError>,
    ) -> Result<TaskAdapter, ConfigError> {
        let examples = match &self.examples {
            Some(path) => parse_examples(&read(path)?, path)?,
            None => Vec::new(),
        };
        let satisfaction = self.satisfaction.unwrap_or(match self.name {
            TaskKind::Toxicity => Satisfaction::ToxicityBelow {
                threshold: super::DEFAULT_TOXICITY_THRESHOLD,
            },
            TaskKind::FactualQa => Satisfaction::StableAnswer { consecutive: 2 },
            TaskKind::Generic => Satisfaction::UnanimousOk,
        });
        let max_iterations_default = self.max_iterations_default.unwrap_or(match self.name {
            TaskKind::FactualQa => 3,
            _ => 4,
        });
        TaskAdapter::from_parts(
            self.name,
            self.system_preamble,
            self.critic_preamble,
            read(&self.initial_template)?,
            read(&self.critique_template)?,
            read(&self.refine_template)?,
            examples,
            self.cot_mode,
            max_iterations_default,
            satisfaction,
            self.note,
        )
    }
}

fn parse_examples(text: &str, origin: &str) -> Result<Vec<FewShotExample>, ConfigError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str::<FewShotExample>(l)
                .map_err(|e| ConfigError::invalid(format!("{origin} line {}: {e}", n + 1)))
        })
        .collect()
}

pub(super) fn load_file(path: &Path) -> Result<TaskAdapter, ConfigError> {
    let read_path = |p: &Path| {
        std::fs::read_to_string(p)
            .map_err(|e| ConfigError::invalid(format!("reading {}: {e}", p.display())))
    };
    let manifest = AdapterManifest::parse(&read_path(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest.build(|rel| read_path(&base.join(rel)))
}

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        fn bundled_file(name: &str) -> Option<&'static str> {
            match name {
                $($name => Some(include_str!(concat!("../../assets/adapters/", $name))),)*
                _ => None,
            }
        }
    };
}

bundled!(
    "toxicity.toml",
    "toxicity_initial.txt",
    "toxicity_critique.txt",
    "toxicity_refine.txt",
    "toxicity_examples.jsonl",
    "factual_qa.toml",
    "qa_initial.txt",
    "qa_critique.txt",
    "qa_refine.txt",
    "qa_examples.jsonl",
    "generic.toml",
    "generic_initial.txt",
    "generic_critique.txt",
    "generic_refine.txt",
);

pub(super) fn builtin(kind: TaskKind) -> TaskAdapter {
    let manifest_name = format!("{}.toml", kind.as_str());
    let text = bundled_file(&manifest_name).expect("bundled manifest exists");
    AdapterManifest::parse(text)
        .and_then(|m| {
            m.build(|name| {
                bundled_file(name)
                    .map(str::to_owned)
                    .ok_or_else(|| ConfigError::invalid(format!("no bundled file {name}")))
            })
        })
        .expect("bundled adapters are valid")
}
