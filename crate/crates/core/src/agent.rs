//! Questioner and oracle roles.
//!
//! A questioner sees the description, the current observation and the
//! interaction context; it never receives the target image. An oracle sees
//! the target image, the category and the question.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageRef, InteractionContext, QuestionerOutput};
use crate::parse::{parse_output, ParseError};
use crate::prompt::OutputFormat;

pub const DEFAULT_ORACLE_FALLBACK: &str = "I cannot tell.";
pub const DEFAULT_MAX_ANSWER_TOKENS: usize = 64;

/// A value together with the time it took to obtain, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Timed<T> {
    pub value: T,
    pub latency: f64,
    /// Served from a recorded response instead of a live call.
    pub replayed: bool,
}

impl<T> Timed<T> {
    pub fn instant(value: T) -> Self {
        Timed {
            value,
            latency: 0.0,
            replayed: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuestionerRequest<'a> {
    pub episode_id: &'a str,
    /// Observation index in a question-asking episode, detection index in navigation.
    pub obs_index: usize,
    /// Number of questioner turns already taken on this observation.
    pub turn_index: usize,
    pub description: &'a str,
    pub observation: &'a ImageRef,
    pub context: &'a InteractionContext,
    /// Set on the re-prompt issued once the question cap is reached.
    pub force_decision: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleRequest<'a> {
    pub episode_id: &'a str,
    pub category: &'a str,
    pub question: &'a str,
    pub target_image: &'a ImageRef,
}

/// Episode metadata handed to an oracle before the first question.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeStart<'a> {
    pub episode_id: &'a str,
    pub category: &'a str,
    pub target_image: &'a ImageRef,
    /// The description at the configured level only.
    pub description: &'a str,
    pub num_observations: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("transport error: {message}")]
    Transport { message: String, retriable: bool },
    #[error("timeout: {0}")]
    Timeout(String),
    #[error("unparseable output after {attempts} attempt(s): {last}")]
    Unparseable { attempts: u32, last: ParseError },
    #[error("image unavailable: {0}")]
    ImageUnavailable(String),
    #[error("no recorded response for {0}")]
    ReplayMiss(String),
    #[error("empty answer from oracle")]
    EmptyAnswer,
    #[error("{0}")]
    Other(String),
}

impl AgentError {
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            AgentError::Transport { retriable: true, .. } | AgentError::Timeout(_)
        )
    }
}

pub trait Questioner {
    fn id(&self) -> &str;

    fn turn(&mut self, req: &QuestionerRequest<'_>) -> Result<Timed<QuestionerOutput>, AgentError>;
}

pub trait Oracle {
    fn id(&self) -> &str;

    fn begin_episode(&mut self, _start: &EpisodeStart<'_>) -> Result<(), AgentError> {
        Ok(())
    }

    fn answer(&mut self, req: &OracleRequest<'_>) -> Result<Timed<String>, AgentError>;

    fn end_episode(&mut self, _episode_id: &str) {}
}

impl<T: Questioner + ?Sized> Questioner for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn turn(&mut self, req: &QuestionerRequest<'_>) -> Result<Timed<QuestionerOutput>, AgentError> {
        (**self).turn(req)
    }
}

impl<T: Questioner + ?Sized> Questioner for &mut T {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn turn(&mut self, req: &QuestionerRequest<'_>) -> Result<Timed<QuestionerOutput>, AgentError> {
        (**self).turn(req)
    }
}

impl<T: Oracle + ?Sized> Oracle for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn begin_episode(&mut self, start: &EpisodeStart<'_>) -> Result<(), AgentError> {
        (**self).begin_episode(start)
    }

    fn answer(&mut self, req: &OracleRequest<'_>) -> Result<Timed<String>, AgentError> {
        (**self).answer(req)
    }

    fn end_episode(&mut self, episode_id: &str) {
        (**self).end_episode(episode_id)
    }
}

impl<T: Oracle + ?Sized> Oracle for &mut T {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn begin_episode(&mut self, start: &EpisodeStart<'_>) -> Result<(), AgentError> {
        (**self).begin_episode(start)
    }

    fn answer(&mut self, req: &OracleRequest<'_>) -> Result<Timed<String>, AgentError> {
        (**self).answer(req)
    }

    fn end_episode(&mut self, episode_id: &str) {
        (**self).end_episode(episode_id)
    }
}

/// Keeps at most `max_tokens` whitespace-separated tokens.
pub fn truncate_answer(answer: &str, max_tokens: usize) -> String {
    if answer.split_whitespace().nth(max_tokens).is_none() {
        return answer.to_string();
    }
    answer
        .split_whitespace()
        .take(max_tokens)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lookup key for scripted oracle answers: lowercase, single-spaced, trimmed.
pub fn normalize_question(q: &str) -> String {
    q.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Pre-programmed questioner completions.
///
/// Lookup order: `episodes[episode][obs][turn]`, then `by_image[obs][turn]`,
/// then `default`. Past the end of a turn list the last entry repeats.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionerScript {
    #[serde(default)]
    pub default: Option<String>,
    #[serde(default)]
    pub episodes: BTreeMap<String, Vec<Vec<String>>>,
    #[serde(default)]
    pub by_image: BTreeMap<String, Vec<String>>,
}

fn pick(turns: &[String], turn: usize, repeat_last: bool) -> Option<&String> {
    match turns.get(turn) {
        Some(t) => Some(t),
        None if repeat_last => turns.last(),
        None => None,
    }
}

impl QuestionerScript {
    fn lookup(&self, req: &QuestionerRequest<'_>, repeat_last: bool) -> Option<&String> {
        if let Some(per_obs) = self.episodes.get(req.episode_id) {
            if let Some(t) = per_obs.get(req.obs_index).and_then(|turns| pick(turns, req.turn_index, repeat_last)) {
                return Some(t);
            }
        }
        if let Some(turns) = self.by_image.get(req.observation.as_str()) {
            if let Some(t) = pick(turns, req.turn_index, repeat_last) {
                return Some(t);
            }
        }
        self.default.as_ref()
    }
}

fn miss(req: &QuestionerRequest<'_>) -> AgentError {
    AgentError::ReplayMiss(alloc::format!(
        "episode `{}` observation {} turn {}",
        req.episode_id,
        req.obs_index,
        req.turn_index
    ))
}

#[derive(Debug, Clone)]
pub struct ScriptedQuestioner {
    id: String,
    format: OutputFormat,
    script: QuestionerScript,
}

/// Raw completion of the always-reject shortcut baseline.
pub const ALWAYS_NEGATIVE_COMPLETION: &str =
    "<motivation>Rejecting every candidate.</motivation>\n<score>0</score>\n<question>None</question>";

impl ScriptedQuestioner {
    pub fn new(id: impl Into<String>, format: OutputFormat, script: QuestionerScript) -> Self {
        ScriptedQuestioner {
            id: id.into(),
            format,
            script,
        }
    }

    /// The shortcut baseline that rejects every observation.
    pub fn always_negative(id: impl Into<String>) -> Self {
        Self::new(
            id,
            OutputFormat::Scored,
            QuestionerScript {
                default: Some(ALWAYS_NEGATIVE_COMPLETION.to_string()),
                ..Default::default()
            },
        )
    }
}

impl Questioner for ScriptedQuestioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn turn(&mut self, req: &QuestionerRequest<'_>) -> Result<Timed<QuestionerOutput>, AgentError> {
        let raw = self.script.lookup(req, true).ok_or_else(|| miss(req))?;
        let out = parse_output(self.format, raw).map_err(|e| AgentError::Unparseable { attempts: 1, last: e })?;
        Ok(Timed::instant(out))
    }
}

/// Replays recorded completions verbatim; any gap is an error.
#[derive(Debug, Clone)]
pub struct ReplayQuestioner {
    id: String,
    format: OutputFormat,
    transcript: BTreeMap<String, Vec<Vec<String>>>,
}

impl ReplayQuestioner {
    pub fn new(
        id: impl Into<String>,
        format: OutputFormat,
        transcript: BTreeMap<String, Vec<Vec<String>>>,
    ) -> Self {
        ReplayQuestioner {
            id: id.into(),
            format,
            transcript,
        }
    }

    /// Builds the transcript from the raw outputs recorded in episode results.
    pub fn from_results<'a>(
        id: impl Into<String>,
        format: OutputFormat,
        results: impl IntoIterator<Item = &'a crate::model::EpisodeResult>,
    ) -> Self {
        let mut transcript: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        for r in results {
            let per_obs = transcript.entry(r.episode_id.clone()).or_default();
            for s in &r.steps {
                if per_obs.len() <= s.obs_index {
                    per_obs.resize(s.obs_index + 1, Vec::new());
                }
                per_obs[s.obs_index] = s.raw_outputs.clone();
            }
        }
        Self::new(id, format, transcript)
    }
}

/// Raw completions of a questioner that rejects every distractor and accepts
/// the target, one turn per observation.
pub const PERFECT_REJECT_COMPLETION: &str =
    "<motivation>This is not the described object.</motivation>\n<score>0</score>\n<question>None</question>";
pub const PERFECT_ACCEPT_COMPLETION: &str =
    "<motivation>This matches the description.</motivation>\n<score>2</score>\n<question>None</question>";

impl ReplayQuestioner {
    /// Transcript of a questioner that decides every observation correctly without asking.
    pub fn perfect<'a>(id: impl Into<String>, specs: impl IntoIterator<Item = &'a crate::model::EpisodeSpec>) -> Self {
        let transcript = specs
            .into_iter()
            .map(|s| {
                let turns = (0..s.len())
                    .map(|i| {
                        let raw = if s.is_target(i) {
                            PERFECT_ACCEPT_COMPLETION
                        } else {
                            PERFECT_REJECT_COMPLETION
                        };
                        alloc::vec![raw.to_string()]
                    })
                    .collect();
                (s.id.clone(), turns)
            })
            .collect();
        Self::new(id, OutputFormat::Scored, transcript)
    }
}

impl Questioner for ReplayQuestioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn turn(&mut self, req: &QuestionerRequest<'_>) -> Result<Timed<QuestionerOutput>, AgentError> {
        let raw = self
            .transcript
            .get(req.episode_id)
            .and_then(|obs| obs.get(req.obs_index))
            .and_then(|turns| turns.get(req.turn_index))
            .ok_or_else(|| miss(req))?;
        let out = parse_output(self.format, raw).map_err(|e| AgentError::Unparseable { attempts: 1, last: e })?;
        Ok(Timed {
            value: out,
            latency: 0.0,
            replayed: true,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleScript {
    /// Question -> answer; keys are normalized on load.
    #[serde(default)]
    pub answers: BTreeMap<String, String>,
    /// Answer for unknown questions; `I cannot tell.` when unset.
    #[serde(default)]
    pub default_answer: Option<String>,
}

/// Answers from a lookup table keyed by normalized question.
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    id: String,
    answers: BTreeMap<String, String>,
    fallback: String,
    misses: Vec<String>,
}

impl ScriptedOracle {
    pub fn new(id: impl Into<String>, script: OracleScript) -> Self {
        ScriptedOracle {
            id: id.into(),
            answers: script
                .answers
                .into_iter()
                .map(|(q, a)| (normalize_question(&q), a))
                .collect(),
            fallback: script
                .default_answer
                .unwrap_or_else(|| DEFAULT_ORACLE_FALLBACK.to_string()),
            misses: Vec::new(),
        }
    }

    /// Questions that fell through to the default answer, in ask order.
    pub fn misses(&self) -> &[String] {
        &self.misses
    }
}

impl Oracle for ScriptedOracle {
    fn id(&self) -> &str {
        &self.id
    }

    fn answer(&mut self, req: &OracleRequest<'_>) -> Result<Timed<String>, AgentError> {
        match self.answers.get(&normalize_question(req.question)) {
            Some(a) => Ok(Timed::instant(a.clone())),
            None => {
                self.misses.push(req.question.to_string());
                Ok(Timed::instant(self.fallback.clone()))
            }
        }
    }
}
