//! `had`: run heterogeneous agent discussions, evaluations, and ablations
//! from the command line.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use had_core::backend::{CachedBackend, ChatBackend, HttpBackend, ResponseCache, ScriptedBackend};
use had_core::datasets::{load_dataset, load_scored, validate_stats, Dataset, DatasetName, LabelSource};
use had_core::discussion::{run_had, run_naive, Aggregation};
use had_core::eval::{
    emit_case_report, case_report_json, evaluate, format_results_table, run_ablation, write_report_files, EvalConfig,
    PipelineMode,
};
use had_core::{LabelScheme, Message};
use serde_json::json;
use tracing_subscriber::EnvFilter;

use crate::config::{BackendKind, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "had", version, about = "Heterogeneous agent discussion for financial sentiment analysis")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Pipeline to run; defaults to `had`.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    aggregation: Option<AggregationArg>,
    /// Maximum discussion rounds.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    rounds: Option<u32>,
    /// Agent id to leave out; repeatable.
    #[arg(long = "disable-agent", global = true, value_name = "ID")]
    disable_agent: Vec<String>,
    /// Fixture file; switches to the scripted backend.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// Base directory for cache, transcripts, and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Bypass the response cache.
    #[arg(long, global = true)]
    no_cache: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Naive,
    Had,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AggregationArg {
    Summarizer,
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Ternary,
    Binary,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Discuss ad-hoc messages and print case reports.
    Analyze(AnalyzeArgs),
    /// Evaluate a pipeline on a dataset and write reports.
    Evaluate(DatasetArgs),
    /// Run the full discussion, the naive baseline, and every leave-one-out roster.
    Ablate(DatasetArgs),
    /// Check dataset label counts against the published statistics.
    ValidateData(ValidateArgs),
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Message text.
    #[arg(required_unless_present = "file", conflicts_with = "file")]
    text: Option<String>,
    /// File with one message per line.
    #[arg(long)]
    file: Option<PathBuf>,
    /// Message id, used for fixture lookup. Defaults to `adhoc`, or `m<line>` with --file.
    #[arg(long, conflicts_with = "file")]
    id: Option<String>,
    /// Entity the sentiment should be judged for.
    #[arg(long)]
    target: Option<String>,
    /// Single naive prompt instead of the discussion.
    #[arg(long)]
    naive: bool,
    #[arg(long, value_enum, default_value = "ternary")]
    scheme: SchemeArg,
    /// Print the transcript JSON instead of the text block.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// One of fpb, stocksen, cmc, fiqa, sentfin.
    #[arg(value_parser = parse_dataset)]
    dataset: DatasetName,
    path: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Also write the post-processed records as JSON lines.
    #[arg(long)]
    snapshot: Option<PathBuf>,
}

fn parse_dataset(s: &str) -> Result<DatasetName, String> {
    s.parse().map_err(|e: had_core::datasets::DatasetError| e.to_string())
}

struct Runtime {
    config: RunConfig,
    backend: Arc<dyn ChatBackend>,
    cache: Option<Arc<ResponseCache>>,
}

impl Runtime {
    fn new(config: RunConfig) -> Result<Self> {
        let (backend, cache): (Arc<dyn ChatBackend>, _) = match config.backend.kind {
            // fixtures answer instantly and may be edited between runs, so they bypass the cache
            BackendKind::Scripted => {
                let path = config.backend.fixtures.as_ref().context("scripted backend needs fixtures")?;
                (Arc::new(ScriptedBackend::from_file(path)?), None)
            }
            BackendKind::Http => {
                let http: Arc<dyn ChatBackend> = Arc::new(HttpBackend::new(config.backend.http_config())?);
                if config.paths.no_cache {
                    (http, None)
                } else {
                    let cache = Arc::new(ResponseCache::open(&config.paths.cache_dir)?);
                    (Arc::new(CachedBackend::new(http, cache.clone())) as Arc<dyn ChatBackend>, Some(cache))
                }
            }
        };
        Ok(Self { config, backend, cache })
    }

    fn eval_config(&self) -> Result<EvalConfig> {
        let hash = self.config.hash()?;
        Ok(EvalConfig {
            discussion: self.config.discussion(),
            parallelism: self.config.eval.parallelism,
            failure_budget: self.config.eval.failure_budget,
            transcript_dir: Some(self.config.paths.transcript_dir.join(&hash[..16])),
            config_hash: Some(hash),
        })
    }

    fn cache_json(&self) -> serde_json::Value {
        match &self.cache {
            Some(c) => {
                let s = c.stats();
                json!({"hits": s.hits, "misses": s.misses})
            }
            None => serde_json::Value::Null,
        }
    }
}

fn load(config: &RunConfig, name: DatasetName, path: &Path) -> Result<Dataset> {
    if !path.exists() {
        bail!("dataset file {} does not exist", path.display());
    }
    let dataset = load_dataset(name, path, &config.column_map(name))
        .with_context(|| format!("loading {name} from {}", path.display()))?;
    for r in &dataset.rejected {
        eprintln!("{name} row {}: {}", r.row, r.reason);
    }
    Ok(dataset)
}

async fn cmd_analyze(rt: &Runtime, args: &AnalyzeArgs, mode: PipelineMode) -> Result<()> {
    let messages: Vec<(String, String)> = match (&args.text, &args.file) {
        (Some(text), _) => vec![(args.id.clone().unwrap_or_else(|| "adhoc".into()), text.clone())],
        (None, Some(file)) => std::fs::read_to_string(file)
            .with_context(|| format!("reading {}", file.display()))?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (format!("m{}", i + 1), l.trim().to_owned()))
            .collect(),
        (None, None) => bail!("give a message or --file"),
    };
    let mut discussion = rt.config.discussion();
    discussion.scheme = match args.scheme {
        SchemeArg::Ternary => LabelScheme::Ternary,
        SchemeArg::Binary => LabelScheme::Binary,
    };
    let roster = rt.config.roster()?;
    for (id, text) in messages {
        let mut message = Message::new(id, text)?;
        if let Some(t) = &args.target {
            message = message.with_target(t.clone());
        }
        let transcript = match mode {
            PipelineMode::Naive => run_naive(&message, rt.backend.as_ref(), &discussion)
                .await?
                .into_transcript(&message),
            PipelineMode::Had => run_had(&message, &roster, rt.backend.as_ref(), &discussion).await?,
        };
        if args.json {
            println!("{}", case_report_json(&transcript));
        } else {
            println!("{}", emit_case_report(&transcript));
        }
    }
    Ok(())
}

async fn cmd_evaluate(rt: &Runtime, args: &DatasetArgs, mode: PipelineMode) -> Result<bool> {
    let dataset = load(&rt.config, args.dataset, &args.path)?;
    let roster = rt.config.roster()?;
    let eval_config = rt.eval_config()?;
    let outcome = evaluate(&dataset, mode, &roster, rt.backend.as_ref(), &eval_config).await?;
    let report = &outcome.report;
    let stem = format!("{}-{}", dataset.name.slug(), report.mode);
    let dir = &rt.config.paths.report_dir;
    let (json_path, _) = write_report_files(dir, &stem, &report.to_json(), &report.to_string())?;
    let stats = json!({"run": outcome.stats, "cache": rt.cache_json()});
    std::fs::write(dir.join(format!("{stem}.run_stats.json")), serde_json::to_string_pretty(&stats)?)?;

    println!("{} of {} records evaluated", report.records_evaluated, report.records_total);
    print!("{}", format_results_table(std::slice::from_ref(report)));
    println!("Report: {}", json_path.display());
    if !report.complete {
        eprintln!("evaluation incomplete: {} record(s) failed", report.failed.len());
    }
    Ok(report.complete)
}

async fn cmd_ablate(rt: &Runtime, args: &DatasetArgs) -> Result<bool> {
    let dataset = load(&rt.config, args.dataset, &args.path)?;
    let roster = rt.config.roster()?;
    let report = run_ablation(&dataset, &roster, rt.backend.as_ref(), &rt.eval_config()?).await?;
    let text = report.to_string();
    let stem = format!("{}-ablation", dataset.name.slug());
    let (json_path, _) = write_report_files(&rt.config.paths.report_dir, &stem, &report.to_json(), &text)?;
    print!("{text}");
    println!("Report: {}", json_path.display());
    Ok(report.complete())
}

fn cmd_validate(config: &RunConfig, args: &ValidateArgs) -> Result<bool> {
    let name = args.data.dataset;
    let map = config.column_map(name);
    if let LabelSource::Score(_) = map.label {
        if args.data.path.exists() {
            let raw = load_scored(&args.data.path, &map)?.len();
            println!("{name}: {raw} raw records, |score| > {} filter applied", map.score_threshold);
        }
    }
    let dataset = load(config, name, &args.data.path)?;
    let report = validate_stats(&dataset);
    println!("{report}");
    if let Some(path) = &args.snapshot {
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        dataset.write_snapshot(std::io::BufWriter::new(file))?;
    }
    Ok(report.passed())
}

async fn run(cli: Cli) -> Result<bool> {
    let overrides = Overrides {
        backend: cli.backend,
        aggregation: cli.aggregation.map(|a| match a {
            AggregationArg::Summarizer => Aggregation::LlmSummarizer,
            AggregationArg::Majority => Aggregation::MajorityVote,
        }),
        rounds: cli.rounds,
        disable_agents: cli.disable_agent.clone(),
        fixtures: cli.fixtures.clone(),
        out: cli.out.clone(),
        no_cache: cli.no_cache,
    };
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let mode = match cli.mode {
        Some(ModeArg::Naive) => PipelineMode::Naive,
        _ => PipelineMode::Had,
    };
    match &cli.command {
        Command::ValidateData(args) => cmd_validate(&config, args),
        Command::Analyze(args) => {
            let mode = if args.naive { PipelineMode::Naive } else { mode };
            cmd_analyze(&Runtime::new(config)?, args, mode).await.map(|_| true)
        }
        Command::Evaluate(args) => cmd_evaluate(&Runtime::new(config)?, args, mode).await,
        Command::Ablate(args) => cmd_ablate(&Runtime::new(config)?, args).await,
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli).await {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
