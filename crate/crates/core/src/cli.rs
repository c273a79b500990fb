//! Command-line front end. Exit codes: 0 success, 1 runtime failure, 2 bad
//! input or usage.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::corpus::{corpus_stats, filter_by_cwe, load_catalog, load_corpus, write_corpus, Corpus};
use crate::domain::CweCatalog;
use crate::gateway::{register_fixture, CompletionProvider, Gateway, LiveProvider, MockProvider, ProviderConfig};
use crate::pipeline::{
    classify_plan, group_by_strategy, load_records, plan_classification, records_to_jsonl, BatchOutcome, PipelineError,
    StrategySpec,
};
use crate::prompt::StrategyTag;
use crate::service::{http, TriageService};
use crate::simulator::{run_simulation, ExpertModel, Sampler, SimError, SimulationConfig, DEFAULT_PROPORTIONS};
use crate::synth::{generate_corpus, generate_fixture, FixtureConfig, SynthConfig};

#[derive(Debug, Parser)]
#[command(
    name = "eitl-triage",
    version,
    about = "Confidence-routed vulnerability triage with an analyst in the loop"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a JSONL corpus and optionally print statistics or write a
    /// canonical copy.
    Ingest(IngestArgs),
    /// Classify a corpus with one or more prompting strategies.
    Classify(ClassifyArgs),
    /// Sweep review budgets over classification results and report metrics.
    Simulate(SimulateArgs),
    /// Run the HTTP triage service.
    Serve(ServeArgs),
    /// Generate a synthetic labeled corpus and matching log-prob fixture.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub stats: bool,
    /// Keep only samples whose CWEs intersect the top-25 catalog.
    #[arg(long)]
    pub top25: bool,
    #[arg(long, requires = "top25")]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// zero-shot, fs-cross or fs-in; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',', required = true)]
    pub strategy: Vec<StrategyTag>,
    #[arg(long, default_value = "mock", value_parser = ["mock", "live"])]
    pub provider: String,
    #[arg(long, required_if_eq("provider", "mock"))]
    pub fixture: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Separate exemplar pool; without it exemplars come from the input and
    /// are not evaluated.
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub live: LiveArgs,
}

#[derive(Debug, Args)]
pub struct LiveArgs {
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub top_k: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub max_parallel: Option<usize>,
    #[arg(long)]
    pub api_key_env: Option<String>,
}

impl LiveArgs {
    fn config(&self) -> ProviderConfig {
        let mut cfg = ProviderConfig::default();
        if let Some(v) = &self.endpoint {
            cfg.endpoint = v.clone();
        }
        if let Some(v) = &self.model {
            cfg.model = v.clone();
        }
        if let Some(v) = self.top_k {
            cfg.top_k = v;
        }
        if let Some(v) = self.timeout_secs {
            cfg.timeout_secs = v;
        }
        if let Some(v) = self.max_retries {
            cfg.max_retries = v;
        }
        if let Some(v) = self.max_parallel {
            cfg.max_parallel = v;
        }
        if let Some(v) = &self.api_key_env {
            cfg.api_key_env = v.clone();
        }
        cfg
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Classification output files (JSONL).
    #[arg(long, required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// Labeled corpus providing ground truth.
    #[arg(long)]
    pub truths: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub proportions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "random,uq")]
    pub samplers: Vec<Sampler>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub expert_accuracy: f64,
    #[arg(long, default_value_t = 0)]
    pub expert_seed: u64,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the full report with metadata as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub store: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub fixture_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1096)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.10)]
    pub prevalence: f64,
    #[arg(long, default_value_t = 37)]
    pub cwes: usize,
    #[arg(long, default_value_t = 7)]
    pub top25_cwes: usize,
    #[arg(long, default_value_t = 0.8)]
    pub model_accuracy: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(message: impl std::fmt::Display) -> Self {
        CliError {
            code: 2,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl std::fmt::Display) -> Self {
        CliError {
            code: 1,
            message: message.to_string(),
        }
    }
}

type CliResult = Result<(), CliError>;

/// Parses arguments and runs a command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: Cli) -> CliResult {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Classify(a) => classify(a),
        Command::Simulate(a) => simulate(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    }
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::runtime(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(CliError::runtime),
    }
}

fn read_corpus(path: &Path) -> Result<Corpus, CliError> {
    load_corpus(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn read_catalog(path: Option<&PathBuf>) -> Result<Option<CweCatalog>, CliError> {
    path.map(|p| load_catalog(p).map_err(|e| CliError::input(format!("{}: {e}", p.display()))))
        .transpose()
}

fn ingest(a: IngestArgs) -> CliResult {
    let mut corpus = read_corpus(&a.input)?;
    if a.top25 {
        let catalog = read_catalog(a.catalog.as_ref())?.unwrap_or_else(CweCatalog::top25_2024);
        corpus = filter_by_cwe(&corpus, &catalog);
    }
    if let Some(out) = &a.output {
        write_corpus(&corpus, out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    }
    if a.stats {
        print!("{}", corpus_stats(&corpus));
    }
    println!("ok: {} samples, digest {}", corpus.len(), corpus.digest());
    Ok(())
}

/// Classifies a corpus under each distinct strategy, in strategy order.
pub fn classify_corpus(
    corpus: &Corpus,
    strategies: &[StrategyTag],
    seed: u64,
    catalog: Option<&CweCatalog>,
    pool: Option<&Corpus>,
    gateway: &Gateway,
) -> Result<BatchOutcome, PipelineError> {
    let mut tags = strategies.to_vec();
    tags.sort();
    tags.dedup();
    let mut all = BatchOutcome {
        results: Vec::new(),
        failures: Vec::new(),
    };
    for tag in tags {
        let spec = StrategySpec {
            tag,
            seed,
            catalog: catalog.cloned(),
        };
        let plan = plan_classification(corpus, &spec, pool)?;
        tracing::info!(strategy = %tag, evaluated = plan.items.len(), held_out = plan.held_out.len(), "classifying");
        let outcome = classify_plan(&plan, gateway);
        all.results.extend(outcome.results);
        all.failures.extend(outcome.failures);
    }
    Ok(all)
}

fn classify(a: ClassifyArgs) -> CliResult {
    let corpus = read_corpus(&a.input)?;
    let pool = a.exemplars.as_deref().map(read_corpus).transpose()?;
    let catalog = read_catalog(a.catalog.as_ref())?;
    let (provider, parallel): (Arc<dyn CompletionProvider>, usize) = match a.provider.as_str() {
        "mock" => {
            let path = a.fixture.as_ref().expect("clap requires --fixture for mock");
            let fixture = register_fixture(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            (Arc::new(MockProvider::new(fixture)), a.live.max_parallel.unwrap_or(4))
        }
        _ => {
            let cfg = a.live.config();
            let parallel = cfg.max_parallel;
            (Arc::new(LiveProvider::new(cfg).map_err(CliError::runtime)?), parallel)
        }
    };
    let gateway = Gateway::new(provider, parallel);
    let outcome = classify_corpus(&corpus, &a.strategy, a.seed, catalog.as_ref(), pool.as_ref(), &gateway)
        .map_err(CliError::runtime)?;
    let (results, failures) = (outcome.results, outcome.failures);
    write_output(a.out.as_deref(), &records_to_jsonl(&results))?;
    if failures.is_empty() {
        Ok(())
    } else {
        for f in &failures {
            eprintln!("failed: {f}");
        }
        Err(CliError::runtime(format!(
            "{} of {} classifications failed",
            failures.len(),
            failures.len() + results.len()
        )))
    }
}

fn simulate(a: SimulateArgs) -> CliResult {
    let mut records = Vec::new();
    for path in &a.results {
        records.extend(load_records(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?);
    }
    let corpus = read_corpus(&a.truths)?;
    let truths = corpus
        .truths()
        .ok_or_else(|| CliError::input(format!("{}: every sample needs a label", a.truths.display())))?;
    let cfg = SimulationConfig {
        proportions: a.proportions.clone().unwrap_or_else(|| DEFAULT_PROPORTIONS.to_vec()),
        samplers: a.samplers.clone(),
        seed: a.seed,
        expert: ExpertModel {
            accuracy: a.expert_accuracy,
            seed: a.expert_seed,
        },
        n_random_repeats: a.repeats,
    };
    let mut report = run_simulation(&group_by_strategy(records), &truths, &cfg).map_err(|e| match e {
        SimError::UnknownId(_) | SimError::DuplicateResult { .. } | SimError::Config(_) => CliError::input(e),
        other => CliError::runtime(other),
    })?;
    report.metadata.corpus_digest = Some(corpus.digest().to_string());
    write_output(a.out.as_deref(), &report.to_csv())?;
    if let Some(p) = &a.json {
        write_output(Some(p), &report.to_json())?;
    }
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

fn serve(a: ServeArgs) -> CliResult {
    let service =
        Arc::new(TriageService::open(&a.store).map_err(|e| CliError::runtime(format!("{}: {e}", a.store.display())))?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::input(format!("bad address: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::runtime(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(CliError::runtime)?;
        eprintln!("listening on http://{local}");
        http::serve(listener, service, shutdown_signal())
            .await
            .map_err(CliError::runtime)
    })
}

fn synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        n_samples: a.samples,
        prevalence: a.prevalence,
        n_cwes: a.cwes,
        n_top25: a.top25_cwes,
        seed: a.seed,
    };
    if !(0.0..=1.0).contains(&cfg.prevalence) || !(0.0..=1.0).contains(&a.model_accuracy) {
        return Err(CliError::input("prevalence and model accuracy must lie in [0, 1]"));
    }
    let corpus = generate_corpus(&cfg);
    write_corpus(&corpus, &a.out).map_err(|e| CliError::runtime(format!("{}: {e}", a.out.display())))?;
    if let Some(p) = &a.fixture_out {
        let fixture = generate_fixture(
            &corpus,
            &FixtureConfig {
                model_accuracy: a.model_accuracy,
                seed: a.seed,
                ..Default::default()
            },
        );
        write_output(Some(p), &fixture.to_jsonl())?;
    }
    println!("ok: {} samples, digest {}", corpus.len(), corpus.digest());
    Ok(())
}
