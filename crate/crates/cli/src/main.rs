use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ncritics::harness::{self, ExperimentConfig, ScorerSpec};
use ncritics::toxicity::{RemoteScorerConfig, ToxicityScorer};

#[derive(Parser)]
#[command(name = "ncritics", version, about = "Ensemble-of-critics self-refinement runner")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Response cache directory (overrides the config).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Sampling seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Examples processed concurrently (overrides the config).
    #[arg(long, global = true)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the refinement loop over a sampled dataset.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// One run per critic count; writes combined curves.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated critic counts, e.g. 0,1,2,3,4.
        #[arg(long, value_delimiter = ',', required = true)]
        critics: Vec<usize>,
    },
    /// Aggregate a trace file into a metric table, report JSON and curve CSV.
    Report {
        #[arg(long)]
        traces: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Score one text for toxicity.
    Score {
        #[arg(long)]
        text: String,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerKind {
    Lexicon,
    Remote,
}

#[derive(Args)]
struct ScorerArgs {
    #[arg(long, value_enum)]
    scorer: Option<ScorerKind>,
    /// Lexicon file (token<TAB>weight); the bundled list when absent.
    #[arg(long)]
    lexicon_path: Option<PathBuf>,
    /// Endpoint of the remote scoring service.
    #[arg(long)]
    service_url: Option<String>,
    /// Environment variable holding the service key.
    #[arg(long, default_value = "PERSPECTIVE_API_KEY")]
    api_key_env: String,
}

impl ScorerArgs {
    fn build(&self) -> Result<Option<Arc<dyn ToxicityScorer>>> {
        let spec = match self.scorer {
            None => return Ok(None),
            Some(ScorerKind::Lexicon) => ScorerSpec::Lexicon {
                lexicon_path: self.lexicon_path.clone(),
            },
            Some(ScorerKind::Remote) => {
                let Some(url) = &self.service_url else {
                    bail!("--scorer remote needs --service-url");
                };
                let mut cfg = RemoteScorerConfig::new(url.clone());
                cfg.api_key_env = self.api_key_env.clone();
                ScorerSpec::Remote(cfg)
            }
        };
        Ok(Some(spec.build()?))
    }
}

fn load_config(path: &Path, global: &Global) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(dir) = &global.cache_dir {
        config.cache_dir = Some(dir.clone());
    }
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(dir) = &global.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(p) = global.parallelism {
        config.parallelism = p;
    }
    Ok(config)
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { config } => {
            let config = load_config(config, &cli.global)?;
            let summary = harness::run_experiment(config).await?;
            println!("traces      {}", summary.trace_path.display());
            println!("manifest    {}", summary.manifest_path.display());
            println!("examples    {}", summary.n_examples);
            println!("sha256      {}", summary.trace_sha256);
            for (reason, n) in &summary.stop_reasons {
                println!("stop        {reason}: {n}");
            }
            println!("cache       {} hits, {} misses", summary.cache.hits, summary.cache.misses);
        }
        Command::Sweep { config, critics } => {
            let config = load_config(config, &cli.global)?;
            let summary = harness::sweep(config, critics).await?;
            for run in &summary.runs {
                let figures: Vec<String> = harness::headline(&run.report)
                    .into_iter()
                    .map(|(m, v)| format!("{m}={v:.4}"))
                    .collect();
                println!("critics={}  {}", run.critic_count, figures.join("  "));
            }
            println!("curves      {}", summary.curve_path.display());
            println!("report      {}", summary.report_path.display());
        }
        Command::Report { traces, scorer } => {
            let scorer = scorer.build()?;
            let out_dir = match &cli.global.output_dir {
                Some(d) => d.clone(),
                None => traces
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            let out = harness::report(traces, scorer.as_deref(), &out_dir)
                .await
                .with_context(|| format!("reporting on {}", traces.display()))?;
            print!("{}", out.table);
            println!();
            println!("report      {}", out.json_path.display());
            println!("curves      {}", out.curve_path.display());
        }
        Command::Score { text, scorer } => {
            let Some(scorer) = scorer.build()? else {
                bail!("--scorer is required (lexicon or remote)");
            };
            let score = scorer.score(text).await?;
            println!("{:.6}\t{}", score.value, provider_name(score.provider));
        }
    }
    Ok(())
}

fn provider_name(p: ncritics::toxicity::ScoreProvider) -> &'static str {
    match p {
        ncritics::toxicity::ScoreProvider::Remote => "remote",
        ncritics::toxicity::ScoreProvider::Lexicon => "lexicon",
    }
}
