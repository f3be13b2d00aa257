//! The question-asking episode state machine.
//!
//! Observations are shown in order, distractors first and the target last.
//! On each one the questioner may ask up to the configured number of
//! questions; every answer is appended to the episode's interaction context,
//! which carries over to later observations. A correct rejection of a
//! distractor moves on to the next observation; any wrong decision ends the
//! episode (unless `stop_on_wrong` is off), and so does the decision on the
//! target.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::agent::{
    truncate_answer, AgentError, EpisodeStart, Oracle, OracleRequest, Questioner, QuestionerRequest,
    DEFAULT_MAX_ANSWER_TOKENS,
};
use crate::model::{
    DescriptionLevel, EpisodeResult, EpisodeSpec, InteractionContext, QaExchange, QuestionerOutput,
    StepRecord,
};

pub const DEFAULT_MAX_QUESTIONS_PER_OBSERVATION: usize = 5;

fn default_cap() -> usize {
    DEFAULT_MAX_QUESTIONS_PER_OBSERVATION
}

fn default_true() -> bool {
    true
}

fn default_level() -> DescriptionLevel {
    DescriptionLevel::ColCtxFeat
}

fn default_answer_tokens() -> usize {
    DEFAULT_MAX_ANSWER_TOKENS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default = "default_cap")]
    pub max_questions_per_observation: usize,
    #[serde(default = "default_level")]
    pub description_level: DescriptionLevel,
    #[serde(default = "default_true")]
    pub stop_on_wrong: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_answer_tokens")]
    pub max_answer_tokens: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_questions_per_observation: DEFAULT_MAX_QUESTIONS_PER_OBSERVATION,
            description_level: DescriptionLevel::ColCtxFeat,
            stop_on_wrong: true,
            seed: 0,
            max_answer_tokens: DEFAULT_MAX_ANSWER_TOKENS,
        }
    }
}

/// Outcome of the forced re-prompt issued at the question cap.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedDecision {
    pub decision: Option<bool>,
    pub output: QuestionerOutput,
    pub latency: f64,
    pub replayed: bool,
}

/// Re-prompts once with the force-decision instruction. A second question
/// leaves the decision absent.
pub fn force_decision<Q: Questioner + ?Sized>(
    questioner: &mut Q,
    req: &QuestionerRequest<'_>,
) -> Result<ForcedDecision, AgentError> {
    let forced = QuestionerRequest {
        force_decision: true,
        ..*req
    };
    let out = questioner.turn(&forced)?;
    Ok(ForcedDecision {
        decision: out.value.as_decision(),
        output: out.value,
        latency: out.latency,
        replayed: out.replayed,
    })
}

struct Tally {
    wall_time: f64,
    calls: usize,
    replayed_calls: usize,
}

impl Tally {
    fn add(&mut self, latency: f64, replayed: bool) {
        self.wall_time += latency;
        self.calls += 1;
        if replayed {
            self.replayed_calls += 1;
        }
    }
}

enum StepEnd {
    Decided(bool),
    Undecided,
    Failed(AgentError),
}

pub fn run_episode<Q, O>(
    spec: &EpisodeSpec,
    questioner: &mut Q,
    oracle: &mut O,
    cfg: &EngineConfig,
) -> EpisodeResult
where
    Q: Questioner + ?Sized,
    O: Oracle + ?Sized,
{
    let description = spec.descriptions.get(cfg.description_level);
    let n = spec.observations.len();
    let mut result = EpisodeResult {
        episode_id: spec.id.clone(),
        description_level: cfg.description_level,
        oracle_id: oracle.id().to_string(),
        questioner_id: questioner.id().to_string(),
        num_observations: n,
        steps: Vec::new(),
        finished: false,
        wall_time: 0.0,
        replayed: false,
        error: None,
    };
    let mut tally = Tally {
        wall_time: 0.0,
        calls: 0,
        replayed_calls: 0,
    };

    let start = EpisodeStart {
        episode_id: &spec.id,
        category: &spec.category,
        target_image: &spec.target_image,
        description,
        num_observations: n,
    };
    if let Err(e) = oracle.begin_episode(&start) {
        result.error = Some(e.to_string());
        return result;
    }

    let mut ctx = InteractionContext::new();
    let mut all_correct = n > 0;
    for (obs_index, observation) in spec.observations.iter().enumerate() {
        let mut step = StepRecord::new(obs_index);
        let end = run_step(
            spec,
            description,
            obs_index,
            observation,
            &mut ctx,
            &mut step,
            questioner,
            oracle,
            cfg,
            &mut tally,
        );
        if !step.raw_outputs.is_empty() {
            result.steps.push(step);
        }
        match end {
            StepEnd::Decided(is_match) => {
                let correct = is_match == spec.is_target(obs_index);
                if let Some(last) = result.steps.last_mut() {
                    last.decision = Some(is_match);
                    last.correct = Some(correct);
                }
                if !correct {
                    all_correct = false;
                    if cfg.stop_on_wrong {
                        break;
                    }
                }
            }
            StepEnd::Undecided => {
                all_correct = false;
                result.error = Some("questioner did not decide after the forced re-prompt".to_string());
                break;
            }
            StepEnd::Failed(e) => {
                all_correct = false;
                result.error = Some(e.to_string());
                break;
            }
        }
    }
    oracle.end_episode(&spec.id);

    result.finished = all_correct && result.steps.len() == n;
    result.wall_time = tally.wall_time;
    result.replayed = tally.calls > 0 && tally.replayed_calls == tally.calls;
    result
}

#[allow(clippy::too_many_arguments)]
fn run_step<Q, O>(
    spec: &EpisodeSpec,
    description: &str,
    obs_index: usize,
    observation: &crate::model::ImageRef,
    ctx: &mut InteractionContext,
    step: &mut StepRecord,
    questioner: &mut Q,
    oracle: &mut O,
    cfg: &EngineConfig,
    tally: &mut Tally,
) -> StepEnd
where
    Q: Questioner + ?Sized,
    O: Oracle + ?Sized,
{
    let mut asked = 0usize;
    loop {
        let req = QuestionerRequest {
            episode_id: &spec.id,
            obs_index,
            turn_index: step.raw_outputs.len(),
            description,
            observation,
            context: &*ctx,
            force_decision: false,
        };
        let out = match questioner.turn(&req) {
            Ok(o) => o,
            Err(e) => return StepEnd::Failed(e),
        };
        tally.add(out.latency, out.replayed);
        step.raw_outputs.push(out.value.raw.clone());
        step.turn_latencies.push(out.latency);

        let question: String = match out.value.as_question() {
            None => {
                // as_decision is Some whenever as_question is None
                return StepEnd::Decided(out.value.as_decision().unwrap_or(false));
            }
            Some(q) => q.to_string(),
        };

        if asked >= cfg.max_questions_per_observation {
            let req = QuestionerRequest {
                turn_index: step.raw_outputs.len(),
                ..req
            };
            return match force_decision(questioner, &req) {
                Ok(forced) => {
                    tally.add(forced.latency, forced.replayed);
                    step.raw_outputs.push(forced.output.raw);
                    step.turn_latencies.push(forced.latency);
                    match forced.decision {
                        Some(d) => StepEnd::Decided(d),
                        None => StepEnd::Undecided,
                    }
                }
                Err(e) => StepEnd::Failed(e),
            };
        }

        let answer = match oracle.answer(&OracleRequest {
            episode_id: &spec.id,
            category: &spec.category,
            question: &question,
            target_image: &spec.target_image,
        }) {
            Ok(a) => a,
            Err(e) => return StepEnd::Failed(e),
        };
        tally.add(answer.latency, answer.replayed);
        let text = truncate_answer(&answer.value, cfg.max_answer_tokens);
        if ctx.push(question.clone(), text.clone()).is_err() {
            return StepEnd::Failed(AgentError::EmptyAnswer);
        }
        step.questions.push(QaExchange {
            question,
            answer: text,
            latency: answer.latency,
        });
        asked += 1;
    }
}
