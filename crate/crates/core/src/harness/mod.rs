//! Experiment runner: dataset loading and seeded sampling, parallel execution
//! through the response cache, ordered trace files with a manifest, critic
//! count sweeps, and reports.

mod config;
mod dataset;
mod report;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use futures::stream::{self, StreamExt};
use serde::Serialize;
use thiserror::Error;

use crate::backend::{Backend, CachedBackend};
use crate::error::ConfigError;
use crate::metrics::{aggregate_report, CurvePoint, MetricError, MetricReport};
use crate::refine::{run_refinement, run_vanilla, EnsembleSpec, LoopConfig, RefineError, RefinementTrace};
use crate::tasks::{TaskAdapter, TaskKind};
use crate::text::sha256_hex;
use crate::toxicity::ToxicityScorer;

pub use config::{BackendSpec, ExperimentConfig, ScorerSpec, ScriptedSpec};
pub use dataset::{load_dataset, parse_dataset, sample_dataset, DatasetRecord, MAX_MALFORMED_FRACTION};
pub use report::{
    critic_rows, iteration_rows, parse_traces, read_curve_csv, read_traces, render_table, report,
    write_curve_csv, CurveRow, ReportOutput, CURVE_HEADER,
};

pub const TRACE_FILE: &str = "traces.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_CURVE_FILE: &str = "sweep_curve.csv";
pub const SWEEP_REPORT_FILE: &str = "sweep_report.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("trace file: {0}")]
    Trace(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub trace_path: PathBuf,
    pub manifest_path: PathBuf,
    pub n_examples: usize,
    pub trace_sha256: String,
    pub stop_reasons: BTreeMap<String, usize>,
    /// Cache activity during this run only.
    pub cache: CacheStats,
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub critic_count: usize,
    pub summary: RunSummary,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub runs: Vec<SweepRun>,
    pub rows: Vec<CurveRow>,
    pub critic_curve: Vec<CurvePoint>,
    pub curve_path: PathBuf,
    pub report_path: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    task: &'a str,
    critic_count: Option<usize>,
    ensemble: Vec<&'a str>,
    n_examples: usize,
    trace_file: &'static str,
    trace_sha256: &'a str,
    stop_reasons: &'a BTreeMap<String, usize>,
    cache: CacheStats,
    elapsed_ms: u64,
    config: &'a ExperimentConfig,
}

/// A configured experiment with every backend wrapped in one shared cache.
pub struct Experiment {
    config: ExperimentConfig,
    task: TaskAdapter,
    scorer: Option<Arc<dyn ToxicityScorer>>,
    generator: Arc<CachedBackend>,
    critics: Vec<Arc<CachedBackend>>,
}

impl Experiment {
    /// Builds backends, scorer and task adapter from `config`.
    pub fn from_config(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let generator = config.generator.build()?;
        let critics = config
            .critics
            .iter()
            .map(BackendSpec::build)
            .collect::<Result<Vec<_>, _>>()?;
        let scorer = config.build_scorer()?;
        Self::with_backends(config, generator, critics, scorer)
    }

    /// Uses the given backends in place of the ones described in `config`.
    pub fn with_backends(
        config: ExperimentConfig,
        generator: Arc<dyn Backend>,
        critics: Vec<Arc<dyn Backend>>,
        scorer: Option<Arc<dyn ToxicityScorer>>,
    ) -> Result<Self, HarnessError> {
        if config.parallelism == 0 {
            return Err(ConfigError::invalid("parallelism must be >= 1").into());
        }
        if config.sample_size == Some(0) {
            return Err(ConfigError::invalid("sample_size must be >= 1").into());
        }
        let task = config.task_adapter(scorer.clone())?;
        task.check_runnable()?;
        let cache_dir = config.cache_dir();
        std::fs::create_dir_all(&cache_dir).map_err(|e| HarnessError::io(&cache_dir, e))?;
        let wrap = |b: Arc<dyn Backend>| Arc::new(CachedBackend::new(b, cache_dir.clone()));
        let experiment = Self {
            generator: wrap(generator),
            critics: critics.into_iter().map(wrap).collect(),
            config,
            task,
            scorer,
        };
        experiment.ensemble(None).validate()?;
        experiment.loop_config().validate()?;
        Ok(experiment)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn task(&self) -> &TaskAdapter {
        &self.task
    }

    pub fn scorer(&self) -> Option<&Arc<dyn ToxicityScorer>> {
        self.scorer.as_ref()
    }

    /// Cumulative cache activity across every backend.
    pub fn cache_stats(&self) -> CacheStats {
        std::iter::once(&self.generator)
            .chain(&self.critics)
            .fold(CacheStats::default(), |acc, b| CacheStats {
                hits: acc.hits + b.hits(),
                misses: acc.misses + b.misses(),
            })
    }

    /// Largest usable critic count.
    pub fn ensemble_size(&self) -> usize {
        self.critics.len() + usize::from(self.config.include_generator_as_critic)
    }

    fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            max_iterations: self
                .config
                .max_iterations
                .unwrap_or_else(|| self.task.max_iterations_default()),
            params: self.config.params.clone(),
            critic_params: self.config.critic_params(),
        }
    }

    /// Ensemble restricted to the first `k` members of
    /// `[generator (if included), critic 1, critic 2, ...]`.
    fn ensemble(&self, k: Option<usize>) -> EnsembleSpec {
        let with_gen = self.config.include_generator_as_critic;
        let k = k.unwrap_or_else(|| self.ensemble_size());
        let n_critics = if with_gen { k.saturating_sub(1) } else { k };
        let critics = self.critics[..n_critics.min(self.critics.len())]
            .iter()
            .map(|c| Arc::clone(c) as Arc<dyn Backend>)
            .collect();
        let mut spec = EnsembleSpec::new(Arc::clone(&self.generator) as Arc<dyn Backend>, critics)
            .with_generator_as_critic(with_gen && k > 0);
        if let Some(t) = self.config.subset_size {
            spec = spec.with_subset_size(t.min(k.max(1)));
        }
        spec
    }

    fn sample(&self) -> Result<Vec<DatasetRecord>, HarnessError> {
        let records = load_dataset(&self.config.dataset_path, self.config.task)?;
        let size = self.config.sample_size.unwrap_or(records.len());
        sample_dataset(&records, size, self.config.seed)
    }

    /// Runs the full ensemble into `output_dir`.
    pub async fn run(&self) -> Result<RunSummary, HarnessError> {
        self.run_into(&self.config.output_dir, None).await
    }

    /// Runs with the first `critic_count` ensemble members (0 = single
    /// generation, no refinement) into `out_dir`.
    pub async fn run_with_critics(&self, critic_count: usize, out_dir: &Path) -> Result<RunSummary, HarnessError> {
        self.check_critic_count(critic_count)?;
        self.run_into(out_dir, Some(critic_count)).await
    }

    fn check_critic_count(&self, k: usize) -> Result<(), HarnessError> {
        if k > self.ensemble_size() {
            return Err(ConfigError::invalid(format!(
                "critic count {k} exceeds the {} configured ensemble members",
                self.ensemble_size()
            ))
            .into());
        }
        Ok(())
    }

    async fn run_into(&self, out_dir: &Path, critic_count: Option<usize>) -> Result<RunSummary, HarnessError> {
        let started = Instant::now();
        let before = self.cache_stats();
        let sample = self.sample()?;
        let ensemble = self.ensemble(critic_count);
        let loop_config = self.loop_config();
        let vanilla = critic_count == Some(0);
        if !vanilla {
            ensemble.validate()?;
        }

        std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
        let final_path = out_dir.join(TRACE_FILE);
        let partial_path = out_dir.join(format!("{TRACE_FILE}.partial"));
        let file = std::fs::File::create(&partial_path).map_err(|e| HarnessError::io(&partial_path, e))?;
        let mut sink = std::io::BufWriter::new(file);

        let seed = self.config.seed;
        let keep_time = self.config.record_wall_time;
        let generator = Arc::clone(&self.generator) as Arc<dyn Backend>;
        let (task, ensemble, loop_config, generator) = (&self.task, &ensemble, &loop_config, &generator);
        let mut traces = stream::iter(sample)
            .map(|record| async move {
                let mut trace = if vanilla {
                    run_vanilla(record.id(), record.input(), seed, task, generator, &loop_config.params).await?
                } else {
                    run_refinement(record.id(), record.input(), seed, task, ensemble, loop_config).await?
                };
                trace.references = record.references().map(<[String]>::to_vec);
                if !keep_time {
                    trace.wall_time_ms = 0;
                }
                Ok::<RefinementTrace, HarnessError>(trace)
            })
            .buffered(self.config.parallelism);

        let mut stop_reasons = BTreeMap::new();
        let mut n = 0;
        while let Some(trace) = traces.next().await {
            let trace = trace?;
            *stop_reasons
                .entry(trace.stop_reason.variant.as_str().to_owned())
                .or_insert(0) += 1;
            writeln!(sink, "{}", trace.to_json_line()).map_err(|e| HarnessError::io(&partial_path, e))?;
            n += 1;
        }
        drop(traces);
        sink.flush().map_err(|e| HarnessError::io(&partial_path, e))?;
        drop(sink);
        std::fs::rename(&partial_path, &final_path).map_err(|e| HarnessError::io(&final_path, e))?;

        let bytes = std::fs::read(&final_path).map_err(|e| HarnessError::io(&final_path, e))?;
        let trace_sha256 = sha256_hex(&bytes);
        let after = self.cache_stats();
        let cache = CacheStats {
            hits: after.hits - before.hits,
            misses: after.misses - before.misses,
        };
        let members: Vec<Arc<dyn Backend>> = if vanilla { Vec::new() } else { ensemble.members() };
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            task: self.task.name(),
            critic_count,
            ensemble: members.iter().map(|m| m.id()).collect(),
            n_examples: n,
            trace_file: TRACE_FILE,
            trace_sha256: &trace_sha256,
            stop_reasons: &stop_reasons,
            cache,
            elapsed_ms: started.elapsed().as_millis() as u64,
            config: &self.config,
        };
        let manifest_path = out_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&manifest_path, json + "\n").map_err(|e| HarnessError::io(&manifest_path, e))?;
        tracing::info!(examples = n, hits = cache.hits, misses = cache.misses, path = %final_path.display(), "run complete");

        Ok(RunSummary {
            trace_path: final_path,
            manifest_path,
            n_examples: n,
            trace_sha256,
            stop_reasons,
            cache,
        })
    }

    /// One run per critic count under `<output_dir>/sweep/critics-<k>`, all
    /// sharing the cache. Writes the combined iteration curves to
    /// `<output_dir>/sweep_curve.csv` and the per-run reports to
    /// `<output_dir>/sweep_report.json`.
    pub async fn sweep(&self, critic_counts: &[usize]) -> Result<SweepSummary, HarnessError> {
        if critic_counts.is_empty() {
            return Err(ConfigError::invalid("sweep needs at least one critic count").into());
        }
        for &k in critic_counts {
            self.check_critic_count(k)?;
        }
        let root = &self.config.output_dir;
        let mut runs = Vec::new();
        let mut rows = Vec::new();
        let mut critic_curve = Vec::new();
        for &k in critic_counts {
            let dir = root.join("sweep").join(format!("critics-{k}"));
            let summary = self.run_into(&dir, Some(k)).await?;
            let traces = read_traces(&summary.trace_path)?;
            let mut report = aggregate_report(&traces, self.scorer.as_deref()).await?;
            rows.extend(iteration_rows(&report, Some(k as u32)));
            for (metric, value) in headline(&report) {
                critic_curve.push(CurvePoint {
                    x: k as u32,
                    metric: metric.into(),
                    value,
                });
            }
            report.critic_curve = critic_curve.clone();
            runs.push(SweepRun {
                critic_count: k,
                summary,
                report,
            });
        }
        critic_curve.sort_by(|a, b| a.x.cmp(&b.x).then_with(|| a.metric.cmp(&b.metric)));

        let curve_path = root.join(SWEEP_CURVE_FILE);
        write_curve_csv(&curve_path, &rows)?;
        let report_path = root.join(SWEEP_REPORT_FILE);
        let body = serde_json::json!({
            "task": self.task.name(),
            "critic_curve": critic_curve,
            "runs": runs.iter().map(|r| serde_json::json!({
                "critic_count": r.critic_count,
                "trace_sha256": r.summary.trace_sha256,
                "report": r.report,
            })).collect::<Vec<_>>(),
        });
        let text = serde_json::to_string_pretty(&body).expect("sweep report serializes");
        std::fs::write(&report_path, text + "\n").map_err(|e| HarnessError::io(&report_path, e))?;
        Ok(SweepSummary {
            runs,
            rows,
            critic_curve,
            curve_path,
            report_path,
        })
    }
}

/// The task's headline figures from a report.
pub fn headline(report: &MetricReport) -> Vec<(&'static str, f64)> {
    match TaskKind::parse(&report.task_name) {
        Some(TaskKind::FactualQa) => [("em", report.em), ("f1", report.f1)]
            .into_iter()
            .filter_map(|(m, v)| v.map(|v| (m, v)))
            .collect(),
        Some(TaskKind::Toxicity) => report
            .mean_toxicity
            .map(|v| vec![("mean_toxicity", v)])
            .unwrap_or_default(),
        _ => Vec::new(),
    }
}

/// Builds the experiment described by `config` and runs it.
pub async fn run_experiment(config: ExperimentConfig) -> Result<RunSummary, HarnessError> {
    Experiment::from_config(config)?.run().await
}

/// Builds the experiment described by `config` and sweeps it over `critic_counts`.
pub async fn sweep(config: ExperimentConfig, critic_counts: &[usize]) -> Result<SweepSummary, HarnessError> {
    Experiment::from_config(config)?.sweep(critic_counts).await
}
