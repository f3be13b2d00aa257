//! The `run-qask` pipeline and the metrics files derived from its results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use qask_core::engine::{run_episode, EngineConfig};
use qask_core::metrics::{aggregate_across_oracles, reports_by_group, MetricsReport, MEAN_ORACLE_ID};
use qask_core::model::{EpisodeResult, EpisodeSpec, ImageRef};
use qask_core::validate::validate_manifest;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentConfig, AgentFactory, AgentKind, Role};
use crate::bridge::SessionStore;
use crate::cache::{Cache, CacheMode};
use crate::files::{read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use crate::images::ImageStore;
use crate::remote::RequestLog;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const REQUEST_LOG: &str = "requests.jsonl";

/// Bad inputs, reported before any agent is contacted. Maps to exit code 1.
#[derive(Debug, Error)]
#[error("invalid input:\n  {}", .0.join("\n  "))]
pub struct Invalid(pub Vec<String>);

#[derive(Clone)]
pub struct RunOptions {
    pub manifest: PathBuf,
    pub questioner: AgentConfig,
    pub oracles: Vec<AgentConfig>,
    pub engine: EngineConfig,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
    pub cache_mode: CacheMode,
    /// Base for relative image refs; defaults to the manifest's directory.
    pub image_dir: Option<PathBuf>,
    pub dry_run: bool,
    /// Session store for human oracles.
    pub bridge: Option<SessionStore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest: PathBuf,
    pub episodes: usize,
    pub engine: EngineConfig,
    pub questioner: AgentConfig,
    pub oracles: Vec<AgentConfig>,
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
    pub cache_mode: CacheMode,
    pub live_requests: usize,
    pub cache_hits: usize,
    /// Episodes whose every agent call came from recorded responses.
    pub replayed_episodes: usize,
    pub failed_episodes: usize,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub results: Vec<EpisodeResult>,
    pub metrics: MetricsFile,
    pub manifest: RunManifest,
}

/// level -> oracle id (plus `mean`) -> report.
pub type MetricsFile = BTreeMap<String, BTreeMap<String, MetricsEntry>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub questioner_id: String,
    pub sr: f64,
    pub fr: f64,
    pub nq: f64,
    pub time: f64,
    pub n_episodes: usize,
}

impl From<&MetricsReport> for MetricsEntry {
    fn from(r: &MetricsReport) -> Self {
        MetricsEntry {
            questioner_id: r.group_key.questioner_id.clone(),
            sr: r.sr,
            fr: r.fr,
            nq: r.nq,
            time: r.time,
            n_episodes: r.n_episodes,
        }
    }
}

pub fn load_manifest(path: &Path) -> anyhow::Result<Vec<EpisodeSpec>> {
    read_json(path)
}

fn image_dir(opts: &RunOptions) -> PathBuf {
    opts.image_dir.clone().unwrap_or_else(|| {
        opts.manifest
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

/// Config problems that do not need the manifest.
pub fn config_problems(questioner: &AgentConfig, oracles: &[AgentConfig], engine: &EngineConfig) -> Vec<String> {
    let mut out = questioner.problems(Role::Questioner);
    if oracles.is_empty() {
        out.push("at least one oracle config is required".into());
    }
    let mut seen = BTreeSet::new();
    for o in oracles {
        out.extend(o.problems(Role::Oracle));
        if !seen.insert(o.id.as_str()) {
            out.push(format!("duplicate oracle id `{}`", o.id));
        } else if o.id == MEAN_ORACLE_ID {
            out.push(format!("oracle id `{MEAN_ORACLE_ID}` is reserved"));
        }
    }
    if engine.max_questions_per_observation == 0 {
        out.push("max_questions_per_observation must be at least 1".into());
    }
    out
}

/// Upper bound on agent calls: per observation at most `cap` questions, `cap + 1`
/// questioner turns and one forced re-prompt.
pub fn planned_calls(specs: &[EpisodeSpec], oracles: usize, cap: usize) -> (usize, usize) {
    let obs: usize = specs.iter().map(EpisodeSpec::len).sum();
    (obs * (cap + 2) * oracles, obs * cap * oracles)
}

pub fn run_qask(opts: &RunOptions) -> anyhow::Result<RunSummary> {
    let mut problems = config_problems(&opts.questioner, &opts.oracles, &opts.engine);
    if opts.workers == 0 {
        problems.push("--workers must be at least 1".into());
    }
    if !problems.is_empty() {
        return Err(Invalid(problems).into());
    }
    let specs = load_manifest(&opts.manifest).map_err(|e| Invalid(vec![format!("{e:#}")]))?;
    let images = ImageStore::new(image_dir(opts));
    let violations = validate_manifest(&specs, &|r: &ImageRef| images.is_readable(r));
    if !violations.is_empty() {
        return Err(Invalid(violations.iter().map(ToString::to_string).collect()).into());
    }

    let (q_calls, o_calls) = planned_calls(&specs, opts.oracles.len(), opts.engine.max_questions_per_observation);
    if opts.dry_run {
        let remote_q = opts.questioner.kind == AgentKind::Remote;
        let remote_o = opts.oracles.iter().filter(|o| o.kind == AgentKind::Remote).count();
        let per_oracle = if opts.oracles.is_empty() { 0 } else { o_calls / opts.oracles.len() };
        let requests = if remote_q { q_calls } else { 0 } + per_oracle * remote_o;
        println!(
            "dry run: {} episodes x {} oracles; at most {q_calls} questioner turns and {o_calls} oracle answers; \
             planned requests (upper bound, before cache and retries): {requests}",
            specs.len(),
            opts.oracles.len()
        );
        return Ok(RunSummary {
            results: Vec::new(),
            metrics: MetricsFile::new(),
            manifest: manifest_record(opts, &specs, 0, 0, &[]),
        });
    }

    std::fs::create_dir_all(&opts.out_dir).with_context(|| format!("creating {}", opts.out_dir.display()))?;
    let cache = match &opts.cache_dir {
        Some(dir) => Cache::new(dir, opts.cache_mode),
        None => Cache::disabled(),
    };
    let mut factory = AgentFactory::new(images, Arc::new(cache));
    factory.log = Some(Arc::new(RequestLog::open(&opts.out_dir.join(REQUEST_LOG))?));
    factory.bridge = opts.bridge.clone();
    factory.specs = Arc::new(specs.clone());

    // Build once up front so that bad keys or scripts abort before any request.
    let mut build_problems = Vec::new();
    if let Err(e) = factory.questioner(&opts.questioner) {
        build_problems.push(format!("{e:#}"));
    }
    for o in &opts.oracles {
        if let Err(e) = factory.oracle(o) {
            build_problems.push(format!("{e:#}"));
        }
    }
    if !build_problems.is_empty() {
        return Err(Invalid(build_problems).into());
    }

    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.workers).build()?;
    let mut results: Vec<EpisodeResult> = pool.install(|| {
        opts.oracles
            .iter()
            .flat_map(|o| specs.iter().map(move |s| (o, s)))
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(ocfg, spec)| {
                let q = factory.questioner(&opts.questioner);
                let o = factory.oracle(ocfg);
                match (q, o) {
                    (Ok(mut q), Ok(mut o)) => run_episode(spec, &mut q, &mut o, &opts.engine),
                    (Err(e), _) | (_, Err(e)) => failed(spec, &opts.questioner.id, &ocfg.id, &opts.engine, e),
                }
            })
            .collect()
    });
    sort_results(&mut results);

    write_jsonl(&opts.out_dir.join(RESULTS_FILE), &results)?;
    let metrics = write_metrics(&opts.out_dir, &results)?;
    let record = manifest_record(opts, &specs, factory.requests_sent(), factory.cache.hits(), &results);
    write_json(&opts.out_dir.join(RUN_MANIFEST), &record)?;
    Ok(RunSummary {
        results,
        metrics,
        manifest: record,
    })
}

fn failed(spec: &EpisodeSpec, qid: &str, oid: &str, cfg: &EngineConfig, e: anyhow::Error) -> EpisodeResult {
    EpisodeResult {
        episode_id: spec.id.clone(),
        description_level: cfg.description_level,
        oracle_id: oid.to_string(),
        questioner_id: qid.to_string(),
        num_observations: spec.len(),
        steps: Vec::new(),
        finished: false,
        wall_time: 0.0,
        replayed: false,
        error: Some(format!("{e:#}")),
    }
}

fn manifest_record(
    opts: &RunOptions,
    specs: &[EpisodeSpec],
    live_requests: usize,
    cache_hits: usize,
    results: &[EpisodeResult],
) -> RunManifest {
    RunManifest {
        manifest: opts.manifest.clone(),
        episodes: specs.len(),
        engine: opts.engine.clone(),
        questioner: opts.questioner.clone(),
        oracles: opts.oracles.clone(),
        workers: opts.workers,
        cache_dir: opts.cache_dir.clone(),
        cache_mode: opts.cache_mode,
        live_requests,
        cache_hits,
        replayed_episodes: results.iter().filter(|r| r.replayed).count(),
        failed_episodes: results.iter().filter(|r| r.error.is_some()).count(),
    }
}

pub fn sort_results(results: &mut [EpisodeResult]) {
    results.sort_by(|a, b| {
        (a.description_level, &a.oracle_id, &a.questioner_id, &a.episode_id).cmp(&(
            b.description_level,
            &b.oracle_id,
            &b.questioner_id,
            &b.episode_id,
        ))
    });
}

/// Per-level, per-oracle reports plus the cross-oracle mean of each level.
pub fn compute_metrics(results: &[EpisodeResult]) -> anyhow::Result<MetricsFile> {
    let questioners: BTreeSet<&str> = results.iter().map(|r| r.questioner_id.as_str()).collect();
    if questioners.len() > 1 {
        bail!("results mix questioners: {questioners:?}");
    }
    let reports = reports_by_group(results)?;
    let mut by_level: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
    for r in reports {
        by_level.entry(r.group_key.description_level.to_string()).or_default().push(r);
    }
    let mut out = MetricsFile::new();
    for (level, reports) in by_level {
        let block = out.entry(level).or_default();
        for r in &reports {
            block.insert(r.group_key.oracle_id.clone(), r.into());
        }
        block.insert(MEAN_ORACLE_ID.to_string(), (&aggregate_across_oracles(&reports)?).into());
    }
    Ok(out)
}

pub fn metrics_csv(m: &MetricsFile) -> String {
    let mut s = String::from("level,questioner,oracle,sr,fr,nq,time,n_episodes\n");
    for (level, block) in m {
        for (oracle, e) in block {
            let _ = writeln!(
                s,
                "{level},{},{oracle},{},{},{},{},{}",
                e.questioner_id, e.sr, e.fr, e.nq, e.time, e.n_episodes
            );
        }
    }
    s
}

pub fn write_metrics(dir: &Path, results: &[EpisodeResult]) -> anyhow::Result<MetricsFile> {
    let m = compute_metrics(results)?;
    write_json(&dir.join(METRICS_JSON), &m)?;
    write_atomic(&dir.join(METRICS_CSV), metrics_csv(&m).as_bytes())?;
    Ok(m)
}

/// Recomputes the metrics files of an existing run directory.
pub fn recompute_metrics(dir: &Path) -> anyhow::Result<MetricsFile> {
    let results: Vec<EpisodeResult> = read_jsonl(&dir.join(RESULTS_FILE))?;
    write_metrics(dir, &results)
}
