//! Score-routed interaction controller for candidate detections.
//!
//! Score 0 discards the detection, score 1 asks the user and retries with the
//! answer in context, score 2 accepts it as the target.

use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    truncate_answer, AgentError, Oracle, OracleRequest, Questioner, QuestionerRequest,
    DEFAULT_MAX_ANSWER_TOKENS,
};
use crate::model::{ImageRef, InteractionContext, QuestionerOutput, UncertaintyScore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RouteKind {
    Discard,
    Ask { question: String },
    Accept,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub kind: RouteKind,
    pub reasoning: String,
    pub score: UncertaintyScore,
}

impl Route {
    /// Total mapping from a questioner turn to a route.
    pub fn from_output(out: &QuestionerOutput) -> Route {
        let score = out.score();
        let kind = match (score.value(), out.as_question()) {
            (1, Some(q)) => RouteKind::Ask {
                question: q.to_string(),
            },
            (2, _) => RouteKind::Accept,
            _ => RouteKind::Discard,
        };
        Route {
            kind,
            reasoning: out.reasoning().to_string(),
            score,
        }
    }
}

/// Where a detection ends up once questioning stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalRoute {
    Discard,
    Accept,
}

/// Everything the controller needs to know about one detection.
#[derive(Debug, Clone, Copy)]
pub struct Detection<'a> {
    pub episode_id: &'a str,
    /// Running detection counter within the episode.
    pub index: usize,
    pub description: &'a str,
    pub observation: &'a ImageRef,
    pub category: &'a str,
    /// Shown to the oracle, never to the questioner.
    pub target_image: &'a ImageRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub outcome: FinalRoute,
    /// Input context plus every pair asked here, in ask order.
    pub context: InteractionContext,
    pub asks: usize,
    pub cap_hit: bool,
    pub model_calls: usize,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct ControllerError {
    pub error: AgentError,
    /// Context accumulated before the failure.
    pub partial_context: InteractionContext,
}

/// One questioner call, mapped to a route.
pub fn decide<Q: Questioner + ?Sized>(
    model: &mut Q,
    det: &Detection<'_>,
    ctx: &InteractionContext,
    turn_index: usize,
) -> Result<(Route, f64), AgentError> {
    if det.description.trim().is_empty() {
        return Err(AgentError::Other("description is empty".to_string()));
    }
    let out = model.turn(&QuestionerRequest {
        episode_id: det.episode_id,
        obs_index: det.index,
        turn_index,
        description: det.description,
        observation: det.observation,
        context: ctx,
        force_decision: false,
    })?;
    Ok((Route::from_output(&out.value), out.latency))
}

/// Repeats `decide`, routing each question through the oracle, until the
/// score is no longer 1 or `cap` questions were asked. Hitting the cap with
/// the model still unsure resolves to discard.
pub fn resolve_detection<Q, O>(
    model: &mut Q,
    oracle: &mut O,
    det: &Detection<'_>,
    ctx: InteractionContext,
    cap: usize,
) -> Result<Resolution, ControllerError>
where
    Q: Questioner + ?Sized,
    O: Oracle + ?Sized,
{
    let mut res = Resolution {
        outcome: FinalRoute::Discard,
        context: ctx,
        asks: 0,
        cap_hit: false,
        model_calls: 0,
        latency: 0.0,
    };
    loop {
        let (route, latency) = match decide(model, det, &res.context, res.model_calls) {
            Ok(r) => r,
            Err(error) => {
                return Err(ControllerError {
                    error,
                    partial_context: res.context,
                })
            }
        };
        res.model_calls += 1;
        res.latency += latency;
        match route.kind {
            RouteKind::Discard => {
                res.outcome = FinalRoute::Discard;
                return Ok(res);
            }
            RouteKind::Accept => {
                res.outcome = FinalRoute::Accept;
                return Ok(res);
            }
            RouteKind::Ask { .. } if res.asks >= cap => {
                res.outcome = FinalRoute::Discard;
                res.cap_hit = true;
                return Ok(res);
            }
            RouteKind::Ask { question } => {
                let answer = oracle.answer(&OracleRequest {
                    episode_id: det.episode_id,
                    category: det.category,
                    question: &question,
                    target_image: det.target_image,
                });
                let answer = match answer {
                    Ok(a) => a,
                    Err(error) => {
                        return Err(ControllerError {
                            error,
                            partial_context: res.context,
                        })
                    }
                };
                res.latency += answer.latency;
                let text = truncate_answer(&answer.value, DEFAULT_MAX_ANSWER_TOKENS);
                if res.context.push(question, text).is_err() {
                    return Err(ControllerError {
                        error: AgentError::EmptyAnswer,
                        partial_context: res.context,
                    });
                }
                res.asks += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MaeError {
    #[error("prediction and truth lengths differ ({pred} vs {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("no scores to compare")]
    Empty,
}

/// Mean absolute error between predicted and reference scores.
pub fn score_mae(pred: &[UncertaintyScore], truth: &[UncertaintyScore]) -> Result<f64, MaeError> {
    if pred.len() != truth.len() {
        return Err(MaeError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MaeError::Empty);
    }
    // integer numerator keeps the result order-independent
    let total: u64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p.value() as i64 - t.value() as i64).unsigned_abs())
        .sum();
    Ok(total as f64 / pred.len() as f64)
}
