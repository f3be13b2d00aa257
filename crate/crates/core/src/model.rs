//! Domain types shared by every part of the harness.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The six description tiers, from bare category to color + context + feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionLevel {
    Category,
    CatCol,
    ColFeat,
    Ctx,
    ColCtx,
    ColCtxFeat,
}

impl DescriptionLevel {
    pub const ALL: [DescriptionLevel; 6] = [
        DescriptionLevel::Category,
        DescriptionLevel::CatCol,
        DescriptionLevel::ColFeat,
        DescriptionLevel::Ctx,
        DescriptionLevel::ColCtx,
        DescriptionLevel::ColCtxFeat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DescriptionLevel::Category => "category",
            DescriptionLevel::CatCol => "cat_col",
            DescriptionLevel::ColFeat => "col_feat",
            DescriptionLevel::Ctx => "ctx",
            DescriptionLevel::ColCtx => "col_ctx",
            DescriptionLevel::ColCtxFeat => "col_ctx_feat",
        }
    }
}

impl fmt::Display for DescriptionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown description level `{0}`")]
pub struct UnknownLevel(pub String);

impl FromStr for DescriptionLevel {
    type Err = UnknownLevel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DescriptionLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLevel(s.to_string()))
    }
}

/// One target described at all six levels of specificity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionSet {
    pub category: String,
    pub cat_col: String,
    pub col_feat: String,
    pub ctx: String,
    pub col_ctx: String,
    pub col_ctx_feat: String,
}

impl DescriptionSet {
    pub fn get(&self, level: DescriptionLevel) -> &str {
        match level {
            DescriptionLevel::Category => &self.category,
            DescriptionLevel::CatCol => &self.cat_col,
            DescriptionLevel::ColFeat => &self.col_feat,
            DescriptionLevel::Ctx => &self.ctx,
            DescriptionLevel::ColCtx => &self.col_ctx,
            DescriptionLevel::ColCtxFeat => &self.col_ctx_feat,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (DescriptionLevel, &str)> {
        DescriptionLevel::ALL.into_iter().map(move |l| (l, self.get(l)))
    }
}

/// A file path or URL naming an image. Resolution happens outside this crate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        ImageRef(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeSplit {
    Train,
    Test,
}

/// One question-asking episode: distractors first, the target observation last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub id: String,
    pub category: String,
    pub target_image: ImageRef,
    pub descriptions: DescriptionSet,
    pub observations: Vec<ImageRef>,
    pub split: EpisodeSplit,
}

impl EpisodeSpec {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Index of the target observation (always the last one).
    pub fn target_index(&self) -> Option<usize> {
        self.observations.len().checked_sub(1)
    }

    pub fn is_target(&self, obs_index: usize) -> bool {
        self.target_index() == Some(obs_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTurn {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("empty question")]
    EmptyQuestion,
    #[error("empty answer")]
    EmptyAnswer,
}

/// Ordered question/answer history of one episode.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InteractionContext {
    turns: Vec<QaTurn>,
}

impl InteractionContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_turns(turns: Vec<QaTurn>) -> Result<Self, ContextError> {
        let mut ctx = Self::new();
        for t in turns {
            ctx.push(t.question, t.answer)?;
        }
        Ok(ctx)
    }

    pub fn push(
        &mut self,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Result<(), ContextError> {
        let question = question.into();
        let answer = answer.into();
        if question.trim().is_empty() {
            return Err(ContextError::EmptyQuestion);
        }
        if answer.trim().is_empty() {
            return Err(ContextError::EmptyAnswer);
        }
        self.turns.push(QaTurn { question, answer });
        Ok(())
    }

    pub fn turns(&self) -> &[QaTurn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Checks the non-empty invariant; deserialized contexts bypass `push`.
    pub fn check(&self) -> Result<(), ContextError> {
        for t in &self.turns {
            if t.question.trim().is_empty() {
                return Err(ContextError::EmptyQuestion);
            }
            if t.answer.trim().is_empty() {
                return Err(ContextError::EmptyAnswer);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("uncertainty score {0} is not one of 0, 1, 2")]
pub struct ScoreOutOfRange(pub i64);

/// 0 = certainly not the target, 1 = unsure, 2 = certainly the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct UncertaintyScore(u8);

impl UncertaintyScore {
    pub const NOT_TARGET: UncertaintyScore = UncertaintyScore(0);
    pub const UNSURE: UncertaintyScore = UncertaintyScore(1);
    pub const TARGET: UncertaintyScore = UncertaintyScore(2);

    pub fn new(value: i64) -> Result<Self, ScoreOutOfRange> {
        match value {
            0..=2 => Ok(UncertaintyScore(value as u8)),
            v => Err(ScoreOutOfRange(v)),
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_unsure(self) -> bool {
        self.0 == 1
    }

    /// The binary decision a sure score stands for; `None` when unsure.
    pub fn decision(self) -> Option<bool> {
        match self.0 {
            0 => Some(false),
            2 => Some(true),
            _ => None,
        }
    }

    pub fn from_decision(is_match: bool) -> Self {
        if is_match {
            Self::TARGET
        } else {
            Self::NOT_TARGET
        }
    }
}

impl TryFrom<u8> for UncertaintyScore {
    type Error = ScoreOutOfRange;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        UncertaintyScore::new(v as i64)
    }
}

impl From<UncertaintyScore> for u8 {
    fn from(s: UncertaintyScore) -> u8 {
        s.0
    }
}

impl fmt::Display for UncertaintyScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Parsed (reasoning, score, question) triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredOutput {
    pub reasoning: String,
    pub score: UncertaintyScore,
    pub question: Option<String>,
}

impl ScoredOutput {
    pub fn is_consistent(&self) -> bool {
        self.score.is_unsure() == self.question.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutputKind {
    Decision { is_match: bool },
    Question { text: String },
}

/// One questioner turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionerOutput {
    pub raw: String,
    pub kind: OutputKind,
    pub parsed: Option<ScoredOutput>,
}

impl QuestionerOutput {
    /// Builds the output from a scored triple; the kind follows from the score.
    pub fn from_scored(raw: impl Into<String>, parsed: ScoredOutput) -> Self {
        let kind = match (parsed.score.decision(), &parsed.question) {
            (Some(is_match), _) => OutputKind::Decision { is_match },
            (None, Some(q)) => OutputKind::Question { text: q.clone() },
            // score 1 without a question cannot come out of the parser
            (None, None) => OutputKind::Question {
                text: String::new(),
            },
        };
        QuestionerOutput {
            raw: raw.into(),
            kind,
            parsed: Some(parsed),
        }
    }

    pub fn decision(raw: impl Into<String>, is_match: bool) -> Self {
        QuestionerOutput {
            raw: raw.into(),
            kind: OutputKind::Decision { is_match },
            parsed: None,
        }
    }

    pub fn question(raw: impl Into<String>, text: impl Into<String>) -> Self {
        QuestionerOutput {
            raw: raw.into(),
            kind: OutputKind::Question { text: text.into() },
            parsed: None,
        }
    }

    /// `(score = 1) ⇔ (question present) ⇔ (kind = question)` when parsed.
    pub fn is_consistent(&self) -> bool {
        let Some(p) = &self.parsed else {
            return true;
        };
        let kind_ok = match &self.kind {
            OutputKind::Decision { is_match } => p.score.decision() == Some(*is_match),
            OutputKind::Question { text } => {
                p.score.is_unsure() && p.question.as_deref() == Some(text.as_str())
            }
        };
        kind_ok && p.is_consistent()
    }

    pub fn as_decision(&self) -> Option<bool> {
        match self.kind {
            OutputKind::Decision { is_match } => Some(is_match),
            OutputKind::Question { .. } => None,
        }
    }

    pub fn as_question(&self) -> Option<&str> {
        match &self.kind {
            OutputKind::Question { text } => Some(text),
            OutputKind::Decision { .. } => None,
        }
    }

    /// Score implied by the turn: the parsed score, or 0/1/2 from the kind.
    pub fn score(&self) -> UncertaintyScore {
        match (&self.parsed, &self.kind) {
            (Some(p), _) => p.score,
            (None, OutputKind::Decision { is_match }) => UncertaintyScore::from_decision(*is_match),
            (None, OutputKind::Question { .. }) => UncertaintyScore::UNSURE,
        }
    }

    /// Parsed reasoning, or the raw text for unscored outputs.
    pub fn reasoning(&self) -> &str {
        match &self.parsed {
            Some(p) => &p.reasoning,
            None => &self.raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSplit {
    Train,
    ValSeen,
    ValUnseen,
}

impl TraceSplit {
    pub const ALL: [TraceSplit; 3] = [TraceSplit::Train, TraceSplit::ValSeen, TraceSplit::ValUnseen];

    pub fn as_str(self) -> &'static str {
        match self {
            TraceSplit::Train => "train",
            TraceSplit::ValSeen => "val_seen",
            TraceSplit::ValUnseen => "val_unseen",
        }
    }
}

impl fmt::Display for TraceSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown split `{0}`")]
pub struct UnknownSplit(pub String);

impl FromStr for TraceSplit {
    type Err = UnknownSplit;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TraceSplit::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownSplit(s.to_string()))
    }
}

/// One dataset record: description, observation, reasoning, score, question, context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSample {
    pub description: String,
    pub observation: ImageRef,
    pub reasoning: String,
    pub score: UncertaintyScore,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub context: InteractionContext,
    pub category: String,
    pub split: TraceSplit,
}

impl TraceSample {
    pub fn scored(&self) -> ScoredOutput {
        ScoredOutput {
            reasoning: self.reasoning.clone(),
            score: self.score,
            question: self.question.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExchange {
    pub question: String,
    pub answer: String,
    /// Oracle latency in seconds.
    pub latency: f64,
}

/// What happened on one presented observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub obs_index: usize,
    pub questions: Vec<QaExchange>,
    pub decision: Option<bool>,
    pub correct: Option<bool>,
    /// Accepted raw output of every questioner turn on this observation.
    pub raw_outputs: Vec<String>,
    /// Latency of each questioner turn, parallel to `raw_outputs`.
    #[serde(default)]
    pub turn_latencies: Vec<f64>,
}

impl StepRecord {
    pub fn new(obs_index: usize) -> Self {
        StepRecord {
            obs_index,
            questions: Vec::new(),
            decision: None,
            correct: None,
            raw_outputs: Vec::new(),
            turn_latencies: Vec::new(),
        }
    }

    pub fn latency(&self) -> f64 {
        self.turn_latencies.iter().sum::<f64>() + self.questions.iter().map(|q| q.latency).sum::<f64>()
    }
}

/// Full transcript of one episode against one oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: String,
    pub description_level: DescriptionLevel,
    pub oracle_id: String,
    pub questioner_id: String,
    /// Episode length n; metrics divide by it.
    pub num_observations: usize,
    pub steps: Vec<StepRecord>,
    pub finished: bool,
    /// Seconds, summed over all recorded agent latencies.
    pub wall_time: f64,
    /// Every agent call was served from recorded responses. Not serialized:
    /// replay provenance belongs to the run manifest so that transcripts of a
    /// live run and its cached rerun stay byte-identical.
    #[serde(skip_serializing, default)]
    pub replayed: bool,
    #[serde(default)]
    pub error: Option<String>,
}

impl EpisodeResult {
    pub fn correct_decisions(&self) -> usize {
        self.steps.iter().filter(|s| s.correct == Some(true)).count()
    }

    pub fn questions_asked(&self) -> usize {
        self.steps.iter().map(|s| s.questions.len()).sum()
    }

    /// Observations on which the questioner took at least one turn.
    pub fn presented_observations(&self) -> usize {
        self.steps.iter().filter(|s| !s.raw_outputs.is_empty()).count()
    }

    /// Every observation received a decision (correct or not).
    pub fn decision_complete(&self) -> bool {
        self.steps.len() == self.num_observations && self.steps.iter().all(|s| s.decision.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        libm::hypot(self.x - other.x, self.y - other.y)
    }
}

/// Position in metres and heading in degrees, counter-clockwise from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading }
    }

    pub fn position(self) -> Point {
        Point::new(self.x, self.y)
    }
}

pub const DEFAULT_MAX_STEPS: u32 = 500;
pub const DEFAULT_SUCCESS_RADIUS: f64 = 0.25;

fn default_max_steps() -> u32 {
    DEFAULT_MAX_STEPS
}

fn default_success_radius() -> f64 {
    DEFAULT_SUCCESS_RADIUS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavEpisodeSpec {
    pub id: String,
    pub start_pose: Pose,
    pub target_position: Point,
    pub shortest_path_length: f64,
    pub description: String,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    #[serde(default = "default_success_radius")]
    pub success_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavResult {
    pub episode_id: String,
    pub success: bool,
    pub path_length: f64,
    pub shortest_path_length: f64,
    pub steps_used: u32,
    pub questions_asked: u32,
    pub final_distance: f64,
    pub detections_resolved: u32,
    #[serde(default)]
    pub failure: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_names_round_trip() {
        for l in DescriptionLevel::ALL {
            assert_eq!(l.as_str().parse::<DescriptionLevel>().unwrap(), l);
        }
        assert!("colour".parse::<DescriptionLevel>().is_err());
    }

    #[test]
    fn score_range() {
        assert!(UncertaintyScore::new(3).is_err());
        assert!(UncertaintyScore::new(-1).is_err());
        assert_eq!(UncertaintyScore::new(1).unwrap(), UncertaintyScore::UNSURE);
        let s: Result<UncertaintyScore, _> = serde_json::from_str("7");
        assert!(s.is_err());
    }

    #[test]
    fn context_rejects_empty_entries() {
        let mut c = InteractionContext::new();
        assert_eq!(c.push(" ", "yes"), Err(ContextError::EmptyQuestion));
        assert_eq!(c.push("Is it red?", ""), Err(ContextError::EmptyAnswer));
        c.push("Is it red?", "No").unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn scored_output_maps_to_kind() {
        let o = QuestionerOutput::from_scored(
            "x",
            ScoredOutput {
                reasoning: "r".into(),
                score: UncertaintyScore::TARGET,
                question: None,
            },
        );
        assert_eq!(o.as_decision(), Some(true));
        assert!(o.is_consistent());
    }
}
