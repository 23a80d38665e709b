//! `effigen`: run the synthesis pipeline over a task corpus and score the
//! results.
//!
//! Exit codes:
//! * 0 - success (model-side task failures are recorded, not fatal)
//! * 1 - an infrastructure failure occurred (sandbox, transport, replay
//!   store miss, disk) or a solution file was missing in `eval`
//! * 2 - usage or configuration error (bad flags, unreadable corpus, missing
//!   credentials)
//! * 3 - `verify-store` found corrupt entries

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use effigen_core::bench::{evaluate_all, run_batch, write_report, BatchOptions, BatchResult};
use effigen_core::corpus::Corpus;
use effigen_core::domain::{PipelineConfig, Variant};
use effigen_core::gateway::{
    ChatModel, LiveClient, LiveConfig, RecordingModel, ReplayModel, ReplayStore, ENV_MODEL,
};
use effigen_core::harness::{load_solution, Evaluator, HarnessError};
use effigen_core::metrics::EfficiencyReport;
use effigen_core::mock::ScriptedModel;
use effigen_core::pipeline::Pipeline;
use effigen_core::prompt::TemplateSet;
use effigen_core::sandbox::{Sandbox, ShimSpec};

#[derive(Parser)]
#[command(name = "effigen", version, about = "Efficiency-first code synthesis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a corpus and evaluate the final solutions.
    Run(RunArgs),
    /// Run the pipeline against an upstream model, persisting every exchange
    /// into the replay store.
    Record(RecordArgs),
    /// Evaluate a directory of solutions (`<task_id>.py`) against a corpus.
    Eval(EvalArgs),
    /// Check that every replay-store entry matches its fingerprint.
    VerifyStore {
        #[arg(long)]
        store: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderMode {
    Live,
    Replay,
    Record,
    /// Scripted replies from `<corpus>/scripts`; no network.
    Mock,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Upstream {
    Live,
    Mock,
}

#[derive(Args, Clone)]
struct SandboxArgs {
    /// Interpreter used to run candidates.
    #[arg(long, default_value = "python3")]
    interpreter: PathBuf,
    /// Runner script; the bundled one is used when omitted.
    #[arg(long)]
    shim: Option<PathBuf>,
    /// Allow candidates to import installed third-party packages (slower
    /// interpreter start-up).
    #[arg(long)]
    site_packages: bool,
    /// Minimum-of-N repeats per timed test.
    #[arg(long, default_value_t = 3)]
    timing_repeats: u32,
    /// Seconds per functional test.
    #[arg(long, default_value_t = 5.0)]
    per_test_timeout: f64,
    /// Parallel tasks (pipeline) and parallel tests (functional runs).
    /// Defaults to the number of available cores.
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "full")]
    variant: Variant,
    /// Model name sent to the provider and hashed into replay fingerprints.
    #[arg(long, env = ENV_MODEL, default_value = "scripted")]
    model: String,
    #[arg(long, default_value_t = 5)]
    num_plans: u32,
    #[arg(long, default_value_t = 20)]
    num_tests: u32,
    #[arg(long, default_value_t = 1)]
    refine_iterations: u32,
    /// Replay store directory (default: `<corpus>/replay`).
    #[arg(long)]
    store: Option<PathBuf>,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long)]
    templates_dir: Option<PathBuf>,
    /// Only these task ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Defaults to `run-<unix seconds>-<variant>`.
    #[arg(long)]
    run_id: Option<String>,
    #[command(flatten)]
    sandbox: SandboxArgs,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, value_enum, default_value = "replay")]
    provider: ProviderMode,
    /// Model behind `--provider record`.
    #[arg(long, value_enum, default_value = "live")]
    upstream: Upstream,
    /// Repeat the whole batch and report the mean.
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    #[arg(long, default_value = "reports")]
    report_dir: PathBuf,
    /// Produce run records only.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Args)]
struct RecordArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, value_enum, default_value = "live")]
    upstream: Upstream,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Directory holding `<task_id>.py` per task.
    #[arg(long, required_unless_present = "expert", conflicts_with = "expert")]
    solutions: Option<PathBuf>,
    /// Evaluate each task's own expert solution.
    #[arg(long)]
    expert: bool,
    #[arg(long, default_value = "reports")]
    report_dir: PathBuf,
    #[command(flatten)]
    sandbox: SandboxArgs,
}

/// Failure with its exit code.
struct Exit(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        Exit(2, e.into())
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Record(args) => cmd_record(args),
        Command::Eval(args) => cmd_eval(args),
        Command::VerifyStore { store } => cmd_verify_store(&store),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn build_sandbox(args: &SandboxArgs) -> Sandbox {
    let mut shim = ShimSpec::python(&args.interpreter);
    if let Some(path) = &args.shim {
        shim = shim.with_script(path);
    }
    if args.site_packages {
        shim = shim.with_site_packages();
    }
    Sandbox::new(shim).with_workers(args.workers)
}

fn load_corpus(path: &Path, only: &[String]) -> Result<Corpus> {
    let mut corpus =
        Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))?;
    if !only.is_empty() {
        for id in only {
            if corpus.get(id).is_none() {
                bail!("task `{id}` is not in the corpus");
            }
        }
        corpus.retain(only);
    }
    Ok(corpus)
}

fn config_of(p: &PipelineArgs) -> Result<PipelineConfig> {
    let config = PipelineConfig {
        model_name: p.model.clone(),
        num_plans: p.num_plans,
        num_tests: p.num_tests,
        refine_iterations: p.refine_iterations,
        temperature: 0.0,
        timing_repeats: p.sandbox.timing_repeats,
        per_test_timeout: p.sandbox.per_test_timeout,
        variant: p.variant,
    };
    config.validate().map_err(anyhow::Error::msg)?;
    Ok(config)
}

fn templates_of(p: &PipelineArgs) -> Result<TemplateSet> {
    Ok(match &p.templates_dir {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    })
}

fn store_of(p: &PipelineArgs) -> Result<Arc<ReplayStore>> {
    let dir = p.store.clone().unwrap_or_else(|| p.corpus.join("replay"));
    Ok(Arc::new(ReplayStore::open(&dir)?))
}

fn upstream_of(kind: Upstream, corpus: &Corpus) -> Result<Box<dyn ChatModel>> {
    Ok(match kind {
        Upstream::Live => Box::new(LiveClient::new(LiveConfig::from_env()?)?),
        Upstream::Mock => Box::new(ScriptedModel::load(
            &corpus.root.join("scripts"),
            &corpus.manifest.tasks,
        )?),
    })
}

fn model_of(mode: ProviderMode, upstream: Upstream, p: &PipelineArgs, corpus: &Corpus) -> Result<Box<dyn ChatModel>> {
    Ok(match mode {
        ProviderMode::Live => upstream_of(Upstream::Live, corpus)?,
        ProviderMode::Mock => upstream_of(Upstream::Mock, corpus)?,
        ProviderMode::Replay => Box::new(ReplayModel::new(store_of(p)?)),
        ProviderMode::Record => Box::new(RecordingModel::new(upstream_of(upstream, corpus)?, store_of(p)?)),
    })
}

fn run_id_of(p: &PipelineArgs) -> String {
    p.run_id.clone().unwrap_or_else(|| {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        format!("run-{secs}-{}", p.variant)
    })
}

fn batch(
    p: &PipelineArgs,
    mode: ProviderMode,
    upstream: Upstream,
    repeats: u32,
    skip_eval: bool,
) -> Result<(Corpus, BatchResult)> {
    let corpus = load_corpus(&p.corpus, &p.tasks)?;
    let config = config_of(p)?;
    let templates = templates_of(p)?;
    let model = model_of(mode, upstream, p, &corpus)?;
    let sandbox = build_sandbox(&p.sandbox);
    let pipeline = Pipeline::new(model.as_ref(), &templates, &sandbox, config);
    let evaluator = Evaluator::new(
        &sandbox,
        p.sandbox.timing_repeats,
        Duration::from_secs_f64(p.sandbox.per_test_timeout),
    );
    let opts = BatchOptions {
        run_id: run_id_of(p),
        workers: p.sandbox.workers,
        repeats,
        runs_dir: Some(p.runs_dir.clone()),
        skip_eval,
    };
    let result = run_batch(&pipeline, &evaluator, &corpus, &opts);
    Ok((corpus, result))
}

fn summarize_records(result: &BatchResult) {
    for (rep, records) in result.records.iter().enumerate() {
        for r in records {
            let outcome = match (&r.final_candidate_id, &r.failure) {
                (_, Some(f)) => format!("failed: {f}"),
                (Some(id), None) => format!("candidate {id}"),
                (None, None) => "no selection".to_string(),
            };
            println!("[{}] {:<28} {outcome}", rep + 1, r.task_id);
        }
    }
}

fn emit_reports(dir: &Path, name: &str, result: &BatchResult) -> Result<()> {
    for (i, report) in result.reports.iter().enumerate() {
        if result.reports.len() > 1 {
            write_report(dir, &format!("{name}-r{}", i + 1), report)?;
        }
    }
    if let Some(mean) = &result.mean {
        write_report(dir, name, mean)?;
        println!("{}", mean.render_table());
    }
    Ok(())
}

fn finish(result: &BatchResult) -> Result<(), Exit> {
    if result.infrastructure_failures.is_empty() {
        return Ok(());
    }
    for f in &result.infrastructure_failures {
        eprintln!("infrastructure failure: {f}");
    }
    Err(Exit(
        1,
        anyhow::anyhow!("{} infrastructure failure(s)", result.infrastructure_failures.len()),
    ))
}

fn cmd_run(args: RunArgs) -> Result<(), Exit> {
    let p = &args.pipeline;
    let (_, result) = batch(p, args.provider, args.upstream, args.repeats, args.no_eval)?;
    summarize_records(&result);
    let name = result
        .records
        .first()
        .and_then(|r| r.first())
        .map(|r| r.run_id.trim_end_matches("-r1").to_string())
        .unwrap_or_else(|| run_id_of(p));
    emit_reports(&args.report_dir, &name, &result)?;
    finish(&result)
}

fn cmd_record(args: RecordArgs) -> Result<(), Exit> {
    let (_, result) = batch(&args.pipeline, ProviderMode::Record, args.upstream, 1, true)?;
    summarize_records(&result);
    finish(&result)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Exit> {
    let corpus = load_corpus(&args.corpus, &[])?;
    let sandbox = build_sandbox(&args.sandbox);
    let evaluator = Evaluator::new(
        &sandbox,
        args.sandbox.timing_repeats,
        Duration::from_secs_f64(args.sandbox.per_test_timeout),
    );
    let mut missing = Vec::new();
    let mut solutions = BTreeMap::new();
    for task in &corpus.tasks {
        let code = if args.expert {
            task.expert().map(|e| e.code.clone())
        } else {
            match load_solution(args.solutions.as_deref().unwrap(), &task.task_id) {
                Ok(code) => Some(code),
                Err(e @ HarnessError::MissingSolution(_)) => {
                    missing.push(e.to_string());
                    None
                }
                Err(e) => return Err(Exit(2, e.into())),
            }
        };
        solutions.insert(task.task_id.clone(), code);
    }
    let (report, errors): (EfficiencyReport, Vec<String>) =
        evaluate_all(&evaluator, &corpus.tasks, &solutions);
    write_report(&args.report_dir, "eval", &report)?;
    println!("{}", report.render_table());
    let problems: Vec<String> = missing.into_iter().chain(errors).collect();
    for p in &problems {
        eprintln!("{p}");
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Exit(1, anyhow::anyhow!("{} task(s) could not be evaluated", problems.len())))
    }
}

fn cmd_verify_store(dir: &Path) -> Result<(), Exit> {
    if !dir.join("index.json").exists() {
        return Err(Exit(2, anyhow::anyhow!("{} has no index.json", dir.display())));
    }
    let store = ReplayStore::open(dir)?;
    let bad = store.verify();
    if bad.is_empty() {
        println!("{} entries verified", store.len());
        return Ok(());
    }
    for b in &bad {
        eprintln!("{b}");
    }
    Err(Exit(3, anyhow::anyhow!("{} corrupt entries", bad.len())))
}
