use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendProfile, HttpBackend, ScriptRule, ScriptedBackend};
use crate::error::ConfigError;
use crate::refine::{CotMode, GenerationParams};
use crate::tasks::{Satisfaction, TaskAdapter, TaskKind};
use crate::toxicity::{LexiconScorer, RemoteScorer, RemoteScorerConfig, ToxicLexicon, ToxicityScorer};

/// One experiment, as read from a TOML file.
///
/// Relative paths are resolved against the config file's directory by
/// [`ExperimentConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub dataset_path: PathBuf,
    /// Examples drawn from the dataset; the whole file when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub generator: BackendSpec,
    #[serde(default)]
    pub critics: Vec<BackendSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_size: Option<usize>,
    #[serde(default = "yes")]
    pub include_generator_as_critic: bool,
    /// Defaults to the task adapter's own bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u32>,
    #[serde(default)]
    pub params: GenerationParams,
    /// Parameters for critic calls; `params` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_params: Option<GenerationParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerSpec>,
    /// Defaults to `<output_dir>/cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Adapter manifest replacing the bundled one for `task`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot_mode: Option<CotMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub satisfaction: Option<Satisfaction>,
    /// Store real timings in traces. Off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn yes() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_parallelism() -> usize {
    4
}

/// A generator or critic: a live endpoint or a rule-driven stand-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Http(BackendProfile),
    Scripted(ScriptedSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedSpec {
    pub id: String,
    pub default_response: String,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
}

impl BackendSpec {
    pub fn id(&self) -> &str {
        match self {
            BackendSpec::Http(p) => &p.id,
            BackendSpec::Scripted(s) => &s.id,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>, ConfigError> {
        Ok(match self {
            BackendSpec::Http(profile) => Arc::new(HttpBackend::new(profile.clone())?),
            BackendSpec::Scripted(s) => Arc::new(ScriptedBackend::from_rules(
                s.id.clone(),
                &s.rules,
                s.default_response.clone(),
            )?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScorerSpec {
    Lexicon {
        /// Bundled lexicon when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lexicon_path: Option<PathBuf>,
    },
    Remote(RemoteScorerConfig),
}

impl ScorerSpec {
    pub fn build(&self) -> Result<Arc<dyn ToxicityScorer>, ConfigError> {
        Ok(match self {
            ScorerSpec::Lexicon { lexicon_path: None } => {
                Arc::new(LexiconScorer::new(ToxicLexicon::builtin()))
            }
            ScorerSpec::Lexicon { lexicon_path: Some(p) } => {
                Arc::new(LexiconScorer::new(ToxicLexicon::load(p)?))
            }
            ScorerSpec::Remote(cfg) => Arc::new(RemoteScorer::new(cfg.clone())?),
        })
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::invalid(format!("experiment config: {e}")))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::invalid(format!("reading {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        config.resolve_paths(path.parent().unwrap_or_else(|| Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset_path);
        fix(&mut self.output_dir);
        if let Some(p) = self.cache_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.adapter_manifest.as_mut() {
            fix(p);
        }
        if let Some(ScorerSpec::Lexicon { lexicon_path: Some(p) }) = self.scorer.as_mut() {
            fix(p);
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn critic_params(&self) -> GenerationParams {
        self.critic_params.clone().unwrap_or_else(|| self.params.clone())
    }

    /// Ensemble size before any critic-count truncation.
    pub fn ensemble_size(&self) -> usize {
        self.critics.len() + usize::from(self.include_generator_as_critic)
    }

    /// Checks everything that does not need the dataset or the network.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.parallelism == 0 {
            return Err(ConfigError::invalid("parallelism must be >= 1"));
        }
        if self.sample_size == Some(0) {
            return Err(ConfigError::invalid("sample_size must be >= 1"));
        }
        if self.max_iterations == Some(0) {
            return Err(ConfigError::invalid("max_iterations must be >= 1"));
        }
        if self.ensemble_size() == 0 {
            return Err(ConfigError::invalid(
                "no critics configured and the generator is excluded as critic",
            ));
        }
        if let Some(t) = self.subset_size {
            if t == 0 || t > self.ensemble_size() {
                return Err(ConfigError::invalid(format!(
                    "subset_size {t} must be in 1..={}",
                    self.ensemble_size()
                )));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for spec in std::iter::once(&self.generator).chain(&self.critics) {
            if let BackendSpec::Http(p) = spec {
                p.validate()?;
            }
            if !ids.insert(spec.id()) {
                return Err(ConfigError::invalid(format!("duplicate backend id `{}`", spec.id())));
            }
        }
        self.params.validate()?;
        self.critic_params().validate()
    }

    /// The task adapter with config overrides applied. `scorer` is attached
    /// when given.
    pub fn task_adapter(&self, scorer: Option<Arc<dyn ToxicityScorer>>) -> Result<TaskAdapter, ConfigError> {
        let mut task = match &self.adapter_manifest {
            Some(path) => {
                let task = TaskAdapter::from_manifest_file(path)?;
                if task.kind() != self.task {
                    return Err(ConfigError::invalid(format!(
                        "adapter manifest is for task `{}` but the config says `{}`",
                        task.kind(),
                        self.task
                    )));
                }
                task
            }
            None => TaskAdapter::builtin(self.task),
        };
        if let Some(mode) = self.cot_mode {
            task = task.with_cot_mode(mode)?;
        }
        if let Some(s) = &self.satisfaction {
            task = task.with_satisfaction(s.clone())?;
        }
        if let Some(scorer) = scorer {
            task = task.with_scorer(scorer);
        }
        Ok(task)
    }

    /// Configured scorer, or the bundled lexicon for the toxicity task.
    pub fn build_scorer(&self) -> Result<Option<Arc<dyn ToxicityScorer>>, ConfigError> {
        match (&self.scorer, self.task) {
            (Some(spec), _) => spec.build().map(Some),
            (None, TaskKind::Toxicity) => ScorerSpec::Lexicon { lexicon_path: None }.build().map(Some),
            (None, _) => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
task = "toxicity"
dataset_path = "data/prompts.jsonl"
sample_size = 10
seed = 3
max_iterations = 4
parallelism = 2
output_dir = "out"

[params]
temperature = 0.7
max_output_tokens = 64

[generator]
kind = "scripted"
id = "gen"
default_response = "hello"

[[critics]]
kind = "http"
id = "l1"
endpoint_url = "http://localhost:9/v1"
model_name = "m"
auth_env_var = "L1_TOKEN"

[[critics]]
kind = "scripted"
id = "l2"
default_response = "VERDICT: OK"
rules = [{ contains = "bad", response = "VERDICT: ISSUES\nrude" }]

[scorer]
kind = "lexicon"
"#;

    #[test]
    fn parses_and_resolves() {
        let mut c = ExperimentConfig::parse(SAMPLE).unwrap();
        c.resolve_paths(Path::new("/base"));
        assert_eq!(c.dataset_path, Path::new("/base/data/prompts.jsonl"));
        assert_eq!(c.cache_dir(), Path::new("/base/out/cache"));
        assert_eq!(c.critics.len(), 2);
        assert_eq!(c.ensemble_size(), 3);
        assert!(matches!(&c.critics[0], BackendSpec::Http(p) if p.auth_env_var.as_deref() == Some("L1_TOKEN")));
        c.validate().unwrap();
        assert_eq!(c.critic_params(), c.params);
        let echoed = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::parse(&echoed).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        let base = ExperimentConfig::parse(SAMPLE).unwrap();
        let mut c = base.clone();
        c.parallelism = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.subset_size = Some(4);
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.critics.clear();
        c.include_generator_as_critic = false;
        assert!(c.validate().is_err());
        let mut c = base;
        c.critics.push(c.critics[1].clone());
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::parse(&format!("unknown = 1\n{SAMPLE}")).is_err());
    }

    #[test]
    fn toxicity_gets_a_default_scorer() {
        let mut c = ExperimentConfig::parse(SAMPLE).unwrap();
        c.scorer = None;
        assert!(c.build_scorer().unwrap().is_some());
        c.task = TaskKind::FactualQa;
        assert!(c.build_scorer().unwrap().is_none());
    }
}
