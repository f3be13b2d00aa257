use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};

use crate::agent::{EpisodeStart, Oracle, Questioner};
use crate::controller::{resolve_detection, Detection, FinalRoute};
use crate::engine::DEFAULT_MAX_QUESTIONS_PER_OBSERVATION;
use crate::model::{InteractionContext, NavEpisodeSpec, NavResult, Point};

use super::policy::{steer_toward, ExplorationPolicy};
use super::world::{apply_action, detect, validate_world, Action, AgentState, World};

pub const FAIL_STEP_LIMIT: &str = "step limit reached";
pub const FAIL_POLICY_EXHAUSTED: &str = "exploration policy exhausted";
pub const FAIL_STOPPED_AWAY: &str = "stopped outside the success radius";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NavConfig {
    pub max_questions_per_detection: usize,
}

impl Default for NavConfig {
    fn default() -> Self {
        NavConfig {
            max_questions_per_detection: DEFAULT_MAX_QUESTIONS_PER_OBSERVATION,
        }
    }
}

enum Mode {
    Explore,
    Approach(Point),
}

/// Runs one navigation episode. Detections are routed through the
/// interaction controller and share a single context. A discarded instance is
/// never detected again; an accepted one is approached and the agent stops.
pub fn run_nav_episode<P, Q, O>(
    world: &World,
    spec: &NavEpisodeSpec,
    policy: &mut P,
    model: &mut Q,
    oracle: &mut O,
    cfg: &NavConfig,
) -> NavResult
where
    P: ExplorationPolicy + ?Sized,
    Q: Questioner + ?Sized,
    O: Oracle + ?Sized,
{
    let mut state = AgentState::new(spec.start_pose);
    let mut result = NavResult {
        episode_id: spec.id.clone(),
        success: false,
        path_length: 0.0,
        shortest_path_length: spec.shortest_path_length,
        steps_used: 0,
        questions_asked: 0,
        final_distance: state.pose.position().distance(spec.target_position),
        detections_resolved: 0,
        failure: None,
    };
    let problems = validate_world(world);
    let target = match world.target() {
        Some(t) if problems.is_empty() => t,
        _ => {
            result.failure = Some(format!("invalid world: {}", problems.join("; ")));
            return result;
        }
    };
    let category = target.category.as_str();
    if let Err(e) = oracle.begin_episode(&EpisodeStart {
        episode_id: &spec.id,
        category,
        target_image: &target.image,
        description: &spec.description,
        num_observations: world.objects.len(),
    }) {
        result.failure = Some(e.to_string());
        return result;
    }

    let mut ctx = InteractionContext::new();
    let mut suppressed = BTreeSet::new();
    let mut mode = Mode::Explore;
    let mut failure: Option<String> = None;
    let mut stopped = false;

    while state.steps < spec.max_steps {
        if let Mode::Explore = mode {
            if let Some(obj) = detect(&state, world, category, &suppressed) {
                let det = Detection {
                    episode_id: &spec.id,
                    index: result.detections_resolved as usize,
                    description: &spec.description,
                    observation: &obj.image,
                    category,
                    target_image: &target.image,
                };
                match resolve_detection(model, oracle, &det, ctx, cfg.max_questions_per_detection) {
                    Ok(res) => {
                        ctx = res.context;
                        result.detections_resolved += 1;
                        for _ in 0..res.asks {
                            state = apply_action(state, Action::Ask, world);
                        }
                        match res.outcome {
                            FinalRoute::Discard => {
                                suppressed.insert(obj.instance_id);
                            }
                            FinalRoute::Accept => mode = Mode::Approach(obj.position),
                        }
                        continue;
                    }
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                }
            }
        }
        let action = match mode {
            Mode::Approach(goal) => {
                if state.pose.position().distance(goal) <= spec.success_radius {
                    Action::Stop
                } else {
                    steer_toward(&state, goal)
                }
            }
            Mode::Explore => match policy.next_action(&state, world) {
                Some(a) => a,
                None => {
                    failure = Some(FAIL_POLICY_EXHAUSTED.to_string());
                    break;
                }
            },
        };
        state = apply_action(state, action, world);
        if action == Action::Stop {
            stopped = true;
            break;
        }
    }
    oracle.end_episode(&spec.id);

    result.steps_used = state.steps;
    result.path_length = state.path_length;
    result.questions_asked = state.asks;
    result.final_distance = state.pose.position().distance(spec.target_position);
    result.success = stopped
        && failure.is_none()
        && result.final_distance <= spec.success_radius
        && state.steps <= spec.max_steps;
    if !result.success {
        result.failure = Some(failure.unwrap_or_else(|| {
            if stopped {
                FAIL_STOPPED_AWAY.to_string()
            } else {
                FAIL_STEP_LIMIT.to_string()
            }
        }));
    }
    result
}
