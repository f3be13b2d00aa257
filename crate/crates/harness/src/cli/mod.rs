//! The `qask` command line.

mod dataset;
mod nav;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use qask_core::engine::{EngineConfig, DEFAULT_MAX_QUESTIONS_PER_OBSERVATION};
use qask_core::model::DescriptionLevel;
use serde::Deserialize;

use crate::agents::AgentConfig;
use crate::bridge::{router, BridgeServer, SessionStore};
use crate::cache::{CacheMode, CACHE_DIR_ENV};
use crate::run::{recompute_metrics, run_qask, Invalid, RunOptions, METRICS_JSON, RESULTS_FILE};

pub use dataset::DatasetCmd;
pub use nav::NavArgs;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "qask", version, about = "Question-asking evaluation harness for instance-navigation agents")]
pub struct Cli {
    /// Response cache directory; caching is off when unset.
    #[arg(long, global = true, env = CACHE_DIR_ENV)]
    pub cache_dir: Option<PathBuf>,
    /// rw, replay (misses are errors) or off.
    #[arg(long, global = true, env = "QASK_CACHE_MODE")]
    pub cache_mode: Option<CacheMode>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every episode of a manifest against every oracle.
    RunQask(RunArgs),
    /// Recompute metrics.json and metrics.csv of a run directory.
    Metrics { run_dir: PathBuf },
    /// Dataset tooling.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Run the navigation surrogate.
    NavSim(NavArgs),
    /// Serve the human-oracle console and run episodes against it.
    ServeConsole(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON run config; flags and env override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Questioner agent config.
    #[arg(long)]
    pub questioner: Option<PathBuf>,
    /// Oracle agent config; repeat for several oracles.
    #[arg(long = "oracle")]
    pub oracles: Vec<PathBuf>,
    #[arg(long)]
    pub level: Option<DescriptionLevel>,
    #[arg(long)]
    pub max_questions: Option<usize>,
    /// Keep going after a wrong decision.
    #[arg(long)]
    pub no_stop_on_wrong: bool,
    #[arg(long, env = "QASK_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "QASK_WORKERS")]
    pub workers: Option<usize>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base directory of relative image refs; defaults to the manifest's directory.
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    /// Print the planned request count and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Built console bundle to serve at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Require this bearer token on API calls.
    #[arg(long, env = "QASK_CONSOLE_TOKEN")]
    pub token: Option<String>,
    /// Stop serving once every episode has finished.
    #[arg(long)]
    pub exit_when_done: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

/// On-disk run config. Relative paths are relative to the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub manifest: Option<PathBuf>,
    pub questioner: Option<PathBuf>,
    #[serde(default)]
    pub oracles: Vec<PathBuf>,
    pub level: Option<DescriptionLevel>,
    pub max_questions: Option<usize>,
    pub stop_on_wrong: Option<bool>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub cache_mode: Option<CacheMode>,
}

impl RunConfigFile {
    fn load(path: &Path) -> anyhow::Result<RunConfigFile> {
        let mut c: RunConfigFile = crate::files::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut c.manifest);
        fix(&mut c.questioner);
        fix(&mut c.out);
        fix(&mut c.image_dir);
        fix(&mut c.cache_dir);
        for o in &mut c.oracles {
            if o.is_relative() {
                *o = base.join(&*o);
            }
        }
        Ok(c)
    }
}

fn load_agents(paths: &[PathBuf]) -> Result<Vec<AgentConfig>, Invalid> {
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for p in paths {
        match AgentConfig::load(p) {
            Ok(c) => out.push(c),
            Err(e) => problems.push(format!("{e:#}")),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Invalid(problems))
    }
}

/// Merges flags, env and the config file into run options.
pub fn resolve_run(cli_cache_dir: Option<PathBuf>, cli_cache_mode: Option<CacheMode>, a: &RunArgs) -> anyhow::Result<RunOptions> {
    let file = match &a.config {
        Some(p) => RunConfigFile::load(p).map_err(|e| Invalid(vec![format!("{e:#}")]))?,
        None => RunConfigFile::default(),
    };
    let mut missing = Vec::new();
    let manifest = a.manifest.clone().or(file.manifest);
    let questioner = a.questioner.clone().or(file.questioner);
    let oracles = if a.oracles.is_empty() { file.oracles } else { a.oracles.clone() };
    let out = a.out.clone().or(file.out);
    if manifest.is_none() {
        missing.push("--manifest is required".to_string());
    }
    if questioner.is_none() {
        missing.push("--questioner is required".to_string());
    }
    if oracles.is_empty() {
        missing.push("at least one --oracle is required".to_string());
    }
    if out.is_none() && !a.dry_run {
        missing.push("--out is required".to_string());
    }
    if !missing.is_empty() {
        return Err(Invalid(missing).into());
    }
    let questioner = load_agents(&[questioner.unwrap()])?.remove(0);
    let oracles = load_agents(&oracles)?;
    let engine = EngineConfig {
        max_questions_per_observation: a
            .max_questions
            .or(file.max_questions)
            .unwrap_or(DEFAULT_MAX_QUESTIONS_PER_OBSERVATION),
        description_level: a.level.or(file.level).unwrap_or(DescriptionLevel::ColCtxFeat),
        stop_on_wrong: !a.no_stop_on_wrong && file.stop_on_wrong.unwrap_or(true),
        seed: a.seed.or(file.seed).unwrap_or(0),
        ..EngineConfig::default()
    };
    Ok(RunOptions {
        manifest: manifest.unwrap(),
        questioner,
        oracles,
        engine,
        out_dir: out.unwrap_or_default(),
        workers: a.workers.or(file.workers).unwrap_or(4),
        cache_dir: cli_cache_dir.or(file.cache_dir),
        cache_mode: cli_cache_mode.or(file.cache_mode).unwrap_or_default(),
        image_dir: a.image_dir.clone().or(file.image_dir),
        dry_run: a.dry_run,
        bridge: None,
    })
}

fn print_metrics(dir: &Path) {
    println!("results: {}", dir.join(RESULTS_FILE).display());
    println!("metrics: {}", dir.join(METRICS_JSON).display());
}

fn cmd_run(cli: &Cli, a: &RunArgs) -> anyhow::Result<()> {
    let opts = resolve_run(cli.cache_dir.clone(), cli.cache_mode, a)?;
    let summary = run_qask(&opts)?;
    if opts.dry_run {
        return Ok(());
    }
    println!(
        "{} episode results; {} live requests, {} cache hits",
        summary.results.len(),
        summary.manifest.live_requests,
        summary.manifest.cache_hits
    );
    print_metrics(&opts.out_dir);
    Ok(())
}

fn cmd_serve(cli: &Cli, a: &ServeArgs) -> anyhow::Result<()> {
    let mut opts = resolve_run(cli.cache_dir.clone(), cli.cache_mode, &a.run)?;
    let store = SessionStore::new();
    opts.bridge = Some(store.clone());
    let app = router(store, a.token.clone(), a.static_dir.clone());
    let server = BridgeServer::start(&format!("{}:{}", a.host, a.port), app)
        .with_context(|| format!("binding {}:{}", a.host, a.port))?;
    println!("console: {}", server.base_url());
    let summary = run_qask(&opts)?;
    if !opts.dry_run {
        println!("{} episode results", summary.results.len());
        print_metrics(&opts.out_dir);
    }
    if a.exit_when_done {
        // let the console fetch the final transcripts
        std::thread::sleep(Duration::from_millis(200));
        drop(server);
    } else {
        server.wait();
    }
    Ok(())
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::RunQask(a) => cmd_run(&cli, a),
        Command::Metrics { run_dir } => {
            recompute_metrics(run_dir)?;
            print_metrics(run_dir);
            Ok(())
        }
        Command::Dataset(cmd) => dataset::execute(&cli, cmd),
        Command::NavSim(a) => nav::execute(&cli, a),
        Command::ServeConsole(a) => cmd_serve(&cli, a),
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Invalid>().is_some() {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID } else { EXIT_OK });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
