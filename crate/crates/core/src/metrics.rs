//! Interaction metrics (SR, FR, NQ, Time) and navigation metrics (SR, SPL, NQ).
//!
//! Floating-point means are summed over values sorted with `total_cmp`, so
//! every metric is exactly invariant under permutation of its input.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DescriptionLevel, EpisodeResult, NavResult};

pub const MEAN_ORACLE_ID: &str = "mean";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no results to aggregate")]
    Empty,
    #[error("episode `{0}` has zero observations")]
    ZeroLength(String),
    #[error("no observation was presented to the questioner")]
    NoPresentedObservations,
    #[error("reports mix questioners `{0}` and `{1}`")]
    MixedQuestioners(String, String),
    #[error("reports mix description levels `{0}` and `{1}`")]
    MixedLevels(DescriptionLevel, DescriptionLevel),
    #[error("shortest path length must be positive")]
    NonPositiveShortestPath,
    #[error("taken path length must be non-negative")]
    NegativePathLength,
}

/// Order-independent mean.
fn mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.into_iter().sum::<f64>() / n
}

/// Fraction of the episode's `n` observations that received a correct
/// decision. Observations never reached count as wrong.
pub fn episode_sr(r: &EpisodeResult, n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroLength(r.episode_id.clone()));
    }
    Ok(r.correct_decisions() as f64 / n as f64)
}

/// Mean per-episode SR.
pub fn success_rate(results: &[EpisodeResult]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let per_episode = results
        .iter()
        .map(|r| episode_sr(r, r.num_observations))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean(per_episode))
}

pub fn finish_rate(results: &[EpisodeResult]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let finished = results.iter().filter(|r| r.finished).count();
    Ok(finished as f64 / results.len() as f64)
}

/// Questions asked per presented observation.
pub fn nq(results: &[EpisodeResult]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let presented: usize = results.iter().map(EpisodeResult::presented_observations).sum();
    if presented == 0 {
        return Err(MetricsError::NoPresentedObservations);
    }
    let asked: usize = results.iter().map(EpisodeResult::questions_asked).sum();
    Ok(asked as f64 / presented as f64)
}

/// Mean episode time in seconds.
pub fn mean_time(results: &[EpisodeResult]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(mean(results.iter().map(|r| r.wall_time).collect()))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub description_level: DescriptionLevel,
    pub oracle_id: String,
    pub questioner_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub group_key: GroupKey,
    pub sr: f64,
    pub fr: f64,
    pub nq: f64,
    pub time: f64,
    pub n_episodes: usize,
}

/// Report over one homogeneous group of results.
pub fn report(key: GroupKey, results: &[EpisodeResult]) -> Result<MetricsReport, MetricsError> {
    // NQ is zero, not an error, when nothing was presented (every episode aborted)
    let nq = match nq(results) {
        Err(MetricsError::NoPresentedObservations) => 0.0,
        other => other?,
    };
    Ok(MetricsReport {
        sr: success_rate(results)?,
        fr: finish_rate(results)?,
        nq,
        time: mean_time(results)?,
        n_episodes: results.len(),
        group_key: key,
    })
}

/// One report per (level, oracle, questioner), in key order.
pub fn reports_by_group(results: &[EpisodeResult]) -> Result<Vec<MetricsReport>, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut groups: BTreeMap<GroupKey, Vec<EpisodeResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry(GroupKey {
                description_level: r.description_level,
                oracle_id: r.oracle_id.clone(),
                questioner_id: r.questioner_id.clone(),
            })
            .or_default()
            .push(r.clone());
    }
    groups.into_iter().map(|(k, rs)| report(k, &rs)).collect()
}

/// Unweighted mean of per-oracle reports for one questioner and level.
pub fn aggregate_across_oracles(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
    let first = reports.first().ok_or(MetricsError::Empty)?;
    for r in &reports[1..] {
        if r.group_key.questioner_id != first.group_key.questioner_id {
            return Err(MetricsError::MixedQuestioners(
                first.group_key.questioner_id.clone(),
                r.group_key.questioner_id.clone(),
            ));
        }
        if r.group_key.description_level != first.group_key.description_level {
            return Err(MetricsError::MixedLevels(
                first.group_key.description_level,
                r.group_key.description_level,
            ));
        }
    }
    if reports.len() == 1 {
        return Ok(first.clone());
    }
    let field = |f: fn(&MetricsReport) -> f64| mean(reports.iter().map(f).collect());
    Ok(MetricsReport {
        group_key: GroupKey {
            description_level: first.group_key.description_level,
            oracle_id: MEAN_ORACLE_ID.to_string(),
            questioner_id: first.group_key.questioner_id.clone(),
        },
        sr: field(|r| r.sr),
        fr: field(|r| r.fr),
        nq: field(|r| r.nq),
        time: field(|r| r.time),
        n_episodes: reports.iter().map(|r| r.n_episodes).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathOutcome {
    pub success: bool,
    pub shortest: f64,
    pub taken: f64,
}

/// Success weighted by path length: mean of `success · shortest / max(taken, shortest)`.
pub fn spl(episodes: &[PathOutcome]) -> Result<f64, MetricsError> {
    if episodes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut terms = Vec::with_capacity(episodes.len());
    for e in episodes {
        if !(e.shortest > 0.0) {
            return Err(MetricsError::NonPositiveShortestPath);
        }
        if !(e.taken >= 0.0) {
            return Err(MetricsError::NegativePathLength);
        }
        terms.push(if e.success {
            e.shortest / e.taken.max(e.shortest)
        } else {
            0.0
        });
    }
    Ok(mean(terms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavMetrics {
    pub sr: f64,
    pub spl: f64,
    /// Mean questions per episode.
    pub nq: f64,
    pub n_episodes: usize,
}

pub fn nav_metrics(results: &[NavResult]) -> Result<NavMetrics, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = results.len() as f64;
    let successes = results.iter().filter(|r| r.success).count();
    let outcomes: Vec<PathOutcome> = results
        .iter()
        .map(|r| PathOutcome {
            success: r.success,
            shortest: r.shortest_path_length,
            taken: r.path_length,
        })
        .collect();
    let asked: u64 = results.iter().map(|r| r.questions_asked as u64).sum();
    Ok(NavMetrics {
        sr: successes as f64 / n,
        spl: spl(&outcomes)?,
        nq: asked as f64 / n,
        n_episodes: results.len(),
    })
}
