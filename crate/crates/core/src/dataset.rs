//! Reasoning-trace dataset tooling: sample checks, split statistics,
//! harvesting from episode runs, judge generation and the SFT mix.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, Questioner, QuestionerRequest};
use crate::model::{
    EpisodeResult, EpisodeSpec, ImageRef, InteractionContext, OutputKind, TraceSample, TraceSplit,
    UncertaintyScore,
};
use crate::parse::parse_output;
use crate::prompt::{render_questioner_text, render_scored_completion, OutputFormat, PromptError, PromptText, TemplateSet};

pub const RULE_QUESTION_WITH_NON_UNSURE: &str = "question with non-1 score";
pub const RULE_UNSURE_WITHOUT_QUESTION: &str = "score 1 without question";

/// Invariant violations of one sample, empty when valid.
pub fn validate_sample(s: &TraceSample) -> Vec<String> {
    let mut out = Vec::new();
    match (s.score.is_unsure(), s.question.as_deref()) {
        (false, Some(_)) => out.push(RULE_QUESTION_WITH_NON_UNSURE.to_string()),
        (true, None) => out.push(RULE_UNSURE_WITHOUT_QUESTION.to_string()),
        (true, Some(q)) if q.trim().is_empty() => out.push(RULE_UNSURE_WITHOUT_QUESTION.to_string()),
        _ => {}
    }
    if s.description.trim().is_empty() {
        out.push("description is empty".to_string());
    }
    if s.observation.as_str().trim().is_empty() {
        out.push("observation is empty".to_string());
    }
    if s.category.trim().is_empty() {
        out.push("category is empty".to_string());
    }
    if let Err(e) = s.context.check() {
        out.push(e.to_string());
    }
    out
}

/// A sample with no question and no context, usable for stage-1 training.
pub fn is_plain(s: &TraceSample) -> bool {
    s.question.is_none() && s.context.is_empty()
}

pub fn stage1_pool(samples: &[TraceSample]) -> Vec<TraceSample> {
    samples.iter().filter(|s| is_plain(s)).cloned().collect()
}

/// Splits samples into (question-bearing, plain) pools for the SFT mix.
pub fn partition_pools(samples: &[TraceSample]) -> (Vec<TraceSample>, Vec<TraceSample>) {
    samples.iter().cloned().partition(|s| !is_plain(s))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Harvest {
    pub samples: Vec<TraceSample>,
    /// Turns whose raw output could not be parsed.
    pub skipped: usize,
    /// Results whose episode id matched no spec.
    pub unknown_episodes: Vec<String>,
}

fn parse_any(raw: &str) -> Option<crate::model::QuestionerOutput> {
    parse_output(OutputFormat::Scored, raw)
        .or_else(|_| parse_output(OutputFormat::Binary, raw))
        .ok()
}

/// Turns every recorded questioner turn into a sample. The context of each
/// sample is the interaction history before that turn.
pub fn harvest(results: &[EpisodeResult], specs: &[EpisodeSpec], split: TraceSplit) -> Harvest {
    let by_id: BTreeMap<&str, &EpisodeSpec> = specs.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = Harvest::default();
    for r in results {
        let Some(spec) = by_id.get(r.episode_id.as_str()) else {
            out.unknown_episodes.push(r.episode_id.clone());
            continue;
        };
        let description = spec.descriptions.get(r.description_level);
        let mut ctx = InteractionContext::new();
        for step in &r.steps {
            let Some(observation) = spec.observations.get(step.obs_index) else {
                out.skipped += step.raw_outputs.len();
                continue;
            };
            let mut answered = 0usize;
            for raw in &step.raw_outputs {
                let Some(parsed) = parse_any(raw) else {
                    out.skipped += 1;
                    continue;
                };
                let (score, question) = match &parsed.kind {
                    OutputKind::Decision { is_match } => (UncertaintyScore::from_decision(*is_match), None),
                    OutputKind::Question { text } => (UncertaintyScore::UNSURE, Some(text.clone())),
                };
                let reasoning = match parsed.reasoning() {
                    r if r.trim().is_empty() => raw.clone(),
                    r => r.to_string(),
                };
                out.samples.push(TraceSample {
                    description: description.to_string(),
                    observation: observation.clone(),
                    reasoning,
                    score,
                    question: question.clone(),
                    context: ctx.clone(),
                    category: spec.category.clone(),
                    split,
                });
                if question.is_some() {
                    if let Some(qa) = step.questions.get(answered) {
                        let _ = ctx.push(qa.question.clone(), qa.answer.clone());
                        answered += 1;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: TraceSplit,
    pub count: u64,
    /// Counts for scores 0, 1 and 2.
    pub score_histogram: [u64; 3],
    pub category_histogram: BTreeMap<String, u64>,
}

impl SplitStats {
    pub fn empty(split: TraceSplit) -> Self {
        SplitStats {
            split,
            count: 0,
            score_histogram: [0; 3],
            category_histogram: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, s: &TraceSample) {
        self.count += 1;
        self.score_histogram[s.score.value() as usize] += 1;
        *self.category_histogram.entry(s.category.clone()).or_default() += 1;
    }
}

/// One entry per split, in train / val_seen / val_unseen order.
pub fn split_stats<'a>(samples: impl IntoIterator<Item = &'a TraceSample>) -> Vec<SplitStats> {
    let mut stats: Vec<SplitStats> = TraceSplit::ALL.iter().map(|s| SplitStats::empty(*s)).collect();
    for s in samples {
        if let Some(st) = stats.iter_mut().find(|st| st.split == s.split) {
            st.add(s);
        }
    }
    stats
}

/// Published sample counts per split.
pub const PUBLISHED_SPLIT_COUNTS: [(TraceSplit, u64); 3] = [
    (TraceSplit::Train, 15_980),
    (TraceSplit::ValSeen, 6_380),
    (TraceSplit::ValUnseen, 5_030),
];

pub const PUBLISHED_COUNT_TOLERANCE: f64 = 0.01;

/// Splits whose count is off the published figure by more than `tolerance` (relative).
pub fn check_published_counts(stats: &[SplitStats], tolerance: f64) -> Vec<String> {
    let mut out = Vec::new();
    for (split, expected) in PUBLISHED_SPLIT_COUNTS {
        let got = stats.iter().find(|s| s.split == split).map_or(0, |s| s.count);
        let rel = libm::fabs(got as f64 - expected as f64) / expected as f64;
        if rel > tolerance {
            out.push(format!("{split}: {got} samples, expected {expected}"));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixRatio {
    pub question: u32,
    pub plain: u32,
}

impl Default for MixRatio {
    fn default() -> Self {
        MixRatio { question: 10, plain: 1 }
    }
}

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.question, self.plain)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid ratio `{0}`, expected question:plain with positive integers")]
pub struct BadRatio(pub String);

impl FromStr for MixRatio {
    type Err = BadRatio;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BadRatio(s.to_string());
        let (q, p) = s.split_once(':').ok_or_else(bad)?;
        let question: u32 = q.trim().parse().map_err(|_| bad())?;
        let plain: u32 = p.trim().parse().map_err(|_| bad())?;
        if question == 0 || plain == 0 {
            return Err(bad());
        }
        Ok(MixRatio { question, plain })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MixError {
    #[error("question pool is empty")]
    EmptyQuestionPool,
    #[error("plain pool is empty")]
    EmptyPlainPool,
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Seeded interleave of the two pools. A plain sample is emitted whenever
/// doing so keeps plain/question at or below the ratio; once either pool is
/// exhausted the rest of the other follows.
pub fn build_sft_mix(
    mut question_samples: Vec<TraceSample>,
    mut plain_samples: Vec<TraceSample>,
    ratio: MixRatio,
    seed: u64,
) -> Result<Vec<TraceSample>, MixError> {
    if question_samples.is_empty() {
        return Err(MixError::EmptyQuestionPool);
    }
    if plain_samples.is_empty() {
        return Err(MixError::EmptyPlainPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut question_samples, &mut rng);
    shuffle(&mut plain_samples, &mut rng);

    let total = question_samples.len() + plain_samples.len();
    let mut out = Vec::with_capacity(total);
    let mut qs = question_samples.into_iter();
    let mut ps = plain_samples.into_iter();
    let (mut q_emitted, mut p_emitted) = (0u64, 0u64);
    let (rq, rp) = (ratio.question as u64, ratio.plain as u64);
    while out.len() < total {
        let want_plain = (p_emitted + 1) * rq <= q_emitted * rp;
        let next = if want_plain {
            ps.next().map(|s| (s, true)).or_else(|| qs.next().map(|s| (s, false)))
        } else {
            qs.next().map(|s| (s, false)).or_else(|| ps.next().map(|s| (s, true)))
        };
        let Some((s, plain)) = next else { break };
        if plain {
            p_emitted += 1;
        } else {
            q_emitted += 1;
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: PromptText,
    pub image: ImageRef,
    pub completion: String,
}

pub fn sft_record(templates: &TemplateSet, s: &TraceSample) -> Result<SftRecord, PromptError> {
    Ok(SftRecord {
        prompt: render_questioner_text(templates, OutputFormat::Scored, &s.description, &s.context)?,
        image: s.observation.clone(),
        completion: render_scored_completion(&s.scored()),
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("judge did not produce a scored output")]
    Unscored,
    #[error("judge sample rejected: {0}")]
    Rejected(String),
}

/// One judge call on an empty context, turned into a validated sample.
pub fn judge_generate<Q: Questioner + ?Sized>(
    judge: &mut Q,
    description: &str,
    observation: &ImageRef,
    category: &str,
    split: TraceSplit,
) -> Result<TraceSample, JudgeError> {
    let ctx = InteractionContext::new();
    let out = judge.turn(&QuestionerRequest {
        episode_id: "judge",
        obs_index: 0,
        turn_index: 0,
        description,
        observation,
        context: &ctx,
        force_decision: false,
    })?;
    let scored = out.value.parsed.ok_or(JudgeError::Unscored)?;
    let sample = TraceSample {
        description: description.to_string(),
        observation: observation.clone(),
        reasoning: scored.reasoning,
        score: scored.score,
        question: scored.question,
        context: ctx,
        category: category.to_string(),
        split,
    };
    let problems = validate_sample(&sample);
    if problems.is_empty() {
        Ok(sample)
    } else {
        Err(JudgeError::Rejected(problems.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{OracleScript, QuestionerScript, ScriptedOracle, ScriptedQuestioner};
    use crate::engine::{run_episode, EngineConfig};
    use crate::model::{DescriptionSet, EpisodeSplit, QaTurn};
    use crate::parse::parse_rsq;
    use alloc::vec;

    fn sample(score: u8, q: Option<&str>, ctx_len: usize) -> TraceSample {
        TraceSample {
            description: "red mug".into(),
            observation: ImageRef::new("o.png"),
            reasoning: "r".into(),
            score: UncertaintyScore::new(score as i64).unwrap(),
            question: q.map(Into::into),
            context: InteractionContext::from_turns(
                (0..ctx_len)
                    .map(|i| QaTurn {
                        question: format!("q{i}"),
                        answer: format!("a{i}"),
                    })
                    .collect(),
            )
            .unwrap(),
            category: "mug".into(),
            split: TraceSplit::Train,
        }
    }

    #[test]
    fn sample_rules() {
        assert!(validate_sample(&sample(1, Some("Is it red?"), 0)).is_empty());
        assert_eq!(validate_sample(&sample(2, Some("Is it red?"), 0)), vec![RULE_QUESTION_WITH_NON_UNSURE]);
        assert_eq!(validate_sample(&sample(1, None, 0)), vec![RULE_UNSURE_WITHOUT_QUESTION]);
        assert!(validate_sample(&sample(0, None, 2)).is_empty());
    }

    #[test]
    fn stats_histograms() {
        let samples = [sample(0, None, 0), sample(0, None, 0), sample(1, Some("q"), 0), sample(2, None, 0)];
        let st = split_stats(&samples);
        assert_eq!(st.len(), 3);
        assert_eq!(st[0].score_histogram, [2, 1, 1]);
        assert_eq!(st[0].count, 4);
        assert_eq!(st[1].count, 0);
        assert_eq!(st[0].category_histogram["mug"], 4);
    }

    #[test]
    fn published_count_check() {
        let mk = |split, count| SplitStats {
            count,
            ..SplitStats::empty(split)
        };
        let ok = [mk(TraceSplit::Train, 16_050), mk(TraceSplit::ValSeen, 6_380), mk(TraceSplit::ValUnseen, 5_000)];
        assert!(check_published_counts(&ok, PUBLISHED_COUNT_TOLERANCE).is_empty());
        let bad = [mk(TraceSplit::Train, 16_200), mk(TraceSplit::ValSeen, 6_380)];
        assert_eq!(check_published_counts(&bad, PUBLISHED_COUNT_TOLERANCE).len(), 2);
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("10:1".parse::<MixRatio>().unwrap(), MixRatio::default());
        assert_eq!(" 3 : 2 ".parse::<MixRatio>().unwrap(), MixRatio { question: 3, plain: 2 });
        for bad in ["10", "0:1", "1:0", "a:b", ""] {
            assert!(bad.parse::<MixRatio>().is_err(), "{bad}");
        }
    }

    #[test]
    fn mix_ten_to_one() {
        let q: Vec<_> = (0..100).map(|i| sample(1, Some(&format!("q{i}")), 0)).collect();
        let p: Vec<_> = (0..10).map(|_| sample(0, None, 0)).collect();
        let mix = build_sft_mix(q.clone(), p.clone(), MixRatio::default(), 5).unwrap();
        assert_eq!(mix.len(), 110);
        for w in mix.chunks(11) {
            assert_eq!(w.iter().filter(|s| is_plain(s)).count(), 1);
        }
        assert_eq!(mix, build_sft_mix(q, p, MixRatio::default(), 5).unwrap());
    }

    #[test]
    fn mix_one_to_one_alternates() {
        let q: Vec<_> = (0..5).map(|_| sample(1, Some("q"), 0)).collect();
        let p: Vec<_> = (0..5).map(|_| sample(2, None, 0)).collect();
        let mix = build_sft_mix(q, p, "1:1".parse().unwrap(), 0).unwrap();
        for (i, s) in mix.iter().enumerate() {
            assert_eq!(is_plain(s), i % 2 == 1);
        }
        assert_eq!(
            build_sft_mix(vec![], vec![sample(0, None, 0)], MixRatio::default(), 0),
            Err(MixError::EmptyQuestionPool)
        );
    }

    #[test]
    fn sft_completion_round_trips() {
        let t = TemplateSet::builtin("v1").unwrap();
        for s in [sample(0, None, 0), sample(1, Some("Is the handle blue?"), 1), sample(2, None, 3)] {
            let rec = sft_record(&t, &s).unwrap();
            assert_eq!(parse_rsq(&rec.completion).unwrap(), s.scored());
            assert!(rec.prompt.user.contains("red mug"));
        }
    }

    fn episode() -> EpisodeSpec {
        EpisodeSpec {
            id: "ep".into(),
            category: "mug".into(),
            target_image: ImageRef::new("t.png"),
            descriptions: DescriptionSet {
                category: "mug".into(),
                cat_col: "red mug".into(),
                col_feat: "red mug with a chip".into(),
                ctx: "mug on a shelf".into(),
                col_ctx: "red mug on a shelf".into(),
                col_ctx_feat: "red chipped mug on a shelf".into(),
            },
            observations: vec![ImageRef::new("o0.png"), ImageRef::new("o1.png")],
            split: EpisodeSplit::Train,
        }
    }

    #[test]
    fn harvest_reproduces_script() {
        let ask = "<motivation>unsure</motivation><score>1</score><question>Is it red?</question>";
        let no = "<motivation>no</motivation><score>0</score><question>None</question>";
        let yes = "<motivation>yes</motivation><score>2</score><question>None</question>";
        let mut script = QuestionerScript::default();
        script.episodes.insert("ep".into(), vec![vec![ask.into(), no.into()], vec![yes.into()]]);
        let mut q = ScriptedQuestioner::new("s", OutputFormat::Scored, script);
        let mut oracle_script = OracleScript::default();
        oracle_script.answers.insert("Is it red?".into(), "No, it is white.".into());
        let mut o = ScriptedOracle::new("o", oracle_script);
        let spec = episode();
        let result = run_episode(&spec, &mut q, &mut o, &EngineConfig::default());
        assert!(result.finished);

        let h = harvest(&[result], &[spec], TraceSplit::Train);
        assert_eq!(h.skipped, 0);
        let seq: Vec<_> = h.samples.iter().map(|s| (s.score.value(), s.question.clone(), s.context.len())).collect();
        assert_eq!(
            seq,
            vec![(1, Some("Is it red?".into()), 0), (0, None, 1), (2, None, 1)]
        );
        assert_eq!(h.samples[1].context.turns()[0].answer, "No, it is white.");
        assert_eq!(h.samples[0].description, "red chipped mug on a shelf");
        assert!(h.samples.iter().all(|s| validate_sample(s).is_empty()));
    }

    #[test]
    fn judge_passes_valid_and_rejects_invalid() {
        let mk = |raw: &str| {
            ScriptedQuestioner::new(
                "judge",
                OutputFormat::Scored,
                QuestionerScript {
                    default: Some(raw.into()),
                    ..Default::default()
                },
            )
        };
        let obs = ImageRef::new("o.png");
        let mut ok = mk("<motivation>Wrong colour.</motivation><score>0</score><question>None</question>");
        let s = judge_generate(&mut ok, "red mug", &obs, "mug", TraceSplit::Train).unwrap();
        assert!(s.context.is_empty());
        assert_eq!(s.score.value(), 0);
        // the parser itself rejects S=1 without a question
        let mut bad = mk("<motivation>Unsure.</motivation><score>1</score><question>None</question>");
        assert!(judge_generate(&mut bad, "red mug", &obs, "mug", TraceSplit::Train).is_err());
    }
}
