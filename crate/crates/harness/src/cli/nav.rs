use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::bail;
use clap::Args;
use qask_core::metrics::nav_metrics;
use qask_core::model::{NavEpisodeSpec, NavResult, Point};
use qask_core::nav::{
    run_nav_episode, validate_world, ExplorationPolicy, GreedyFrontier, NavConfig, PolicyKind, RandomWalk,
    WaypointFollower, World,
};
use rayon::prelude::*;

use super::Cli;
use crate::agents::{AgentConfig, AgentFactory, Role};
use crate::cache::Cache;
use crate::files::{read_json, write_json, write_jsonl};
use crate::images::ImageStore;
use crate::run::Invalid;

pub const NAV_RESULTS: &str = "nav_results.jsonl";
pub const NAV_METRICS: &str = "nav_metrics.json";

#[derive(Debug, Clone, Args)]
pub struct NavArgs {
    /// World JSON.
    #[arg(long)]
    pub world: PathBuf,
    /// JSON array of navigation episodes.
    #[arg(long)]
    pub episodes: PathBuf,
    #[arg(long, value_enum, default_value = "frontier")]
    pub policy: PolicyArg,
    /// Waypoints for the waypoint policy: `x,y;x,y;...`.
    #[arg(long)]
    pub waypoints: Option<String>,
    #[arg(long, env = "QASK_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Questioner config for the interaction model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub oracle: PathBuf,
    #[arg(long, default_value_t = qask_core::engine::DEFAULT_MAX_QUESTIONS_PER_OBSERVATION)]
    pub max_questions: usize,
    #[arg(long, env = "QASK_WORKERS", default_value_t = 4)]
    pub workers: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyArg {
    Waypoint,
    Random,
    Frontier,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Waypoint => PolicyKind::Waypoint,
            PolicyArg::Random => PolicyKind::Random,
            PolicyArg::Frontier => PolicyKind::Frontier,
        }
    }
}

pub fn parse_waypoints(s: &str) -> Result<Vec<Point>, String> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (x, y) = p.split_once(',').ok_or_else(|| format!("bad waypoint `{p}`"))?;
            let x: f64 = x.trim().parse().map_err(|_| format!("bad waypoint `{p}`"))?;
            let y: f64 = y.trim().parse().map_err(|_| format!("bad waypoint `{p}`"))?;
            Ok(Point::new(x, y))
        })
        .collect()
}

/// Random walks get `seed + episode index` so episodes differ but reruns match.
pub fn make_policy(kind: PolicyKind, waypoints: &[Point], seed: u64, index: usize) -> Box<dyn ExplorationPolicy + Send> {
    match kind {
        PolicyKind::Waypoint => Box::new(WaypointFollower::new(waypoints.to_vec())),
        PolicyKind::Random => Box::new(RandomWalk::new(seed.wrapping_add(index as u64))),
        PolicyKind::Frontier => Box::new(GreedyFrontier::new()),
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn execute(cli: &Cli, a: &NavArgs) -> anyhow::Result<()> {
    let bad = |e: anyhow::Error| Invalid(vec![format!("{e:#}")]);
    let world: World = read_json(&a.world).map_err(bad)?;
    let episodes: Vec<NavEpisodeSpec> = read_json(&a.episodes).map_err(bad)?;
    let model = AgentConfig::load(&a.model).map_err(bad)?;
    let oracle = AgentConfig::load(&a.oracle).map_err(bad)?;

    let mut problems = validate_world(&world);
    problems.extend(model.problems(Role::Questioner));
    problems.extend(oracle.problems(Role::Oracle));
    let waypoints = match (&a.waypoints, a.policy) {
        (Some(w), _) => parse_waypoints(w).unwrap_or_else(|e| {
            problems.push(e);
            Vec::new()
        }),
        (None, PolicyArg::Waypoint) => {
            problems.push("--waypoints is required with --policy waypoint".into());
            Vec::new()
        }
        (None, _) => Vec::new(),
    };
    if a.workers == 0 {
        problems.push("--workers must be at least 1".into());
    }
    if !problems.is_empty() {
        return Err(Invalid(problems).into());
    }

    let cache = match &cli.cache_dir {
        Some(d) => Cache::new(d, cli.cache_mode.unwrap_or_default()),
        None => Cache::disabled(),
    };
    let factory = AgentFactory::new(ImageStore::new(parent_dir(&a.world)), Arc::new(cache));
    if let Err(e) = factory.questioner(&model).and(factory.oracle(&oracle).map(|_| ())) {
        return Err(bad(e).into());
    }
    let cfg = NavConfig {
        max_questions_per_detection: a.max_questions,
    };
    let kind = PolicyKind::from(a.policy);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.workers).build()?;
    let results: Vec<NavResult> = pool.install(|| {
        episodes
            .par_iter()
            .enumerate()
            .map(|(i, spec)| -> anyhow::Result<NavResult> {
                let mut q = factory.questioner(&model)?;
                let mut o = factory.oracle(&oracle)?;
                let mut policy = make_policy(kind, &waypoints, a.seed, i);
                Ok(run_nav_episode(&world, spec, &mut policy, &mut q, &mut o, &cfg))
            })
            .collect::<anyhow::Result<_>>()
    })?;
    if results.is_empty() {
        bail!("no navigation episodes");
    }
    std::fs::create_dir_all(&a.out)?;
    write_jsonl(&a.out.join(NAV_RESULTS), &results)?;
    let m = nav_metrics(&results)?;
    write_json(&a.out.join(NAV_METRICS), &m)?;
    println!(
        "{} episodes: SR {:.4}, SPL {:.4}, questions per episode {:.4}",
        m.n_episodes, m.sr, m.spl, m.nq
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waypoint_syntax() {
        assert_eq!(
            parse_waypoints("1,2; 3.5,-1").unwrap(),
            vec![Point::new(1.0, 2.0), Point::new(3.5, -1.0)]
        );
        assert!(parse_waypoints("1;2").is_err());
    }
}
