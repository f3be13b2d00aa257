//! Parsers for questioner completions.
//!
//! The scored grammar is three tags, `<motivation>`, `<score>` and
//! `<question>`, matched case-insensitively and tolerant of whitespace inside
//! the angle brackets. Text outside the tags is ignored; text inside them is
//! kept verbatim. The binary grammar is a final line `DECISION: MATCH`,
//! `DECISION: NO_MATCH` or `QUESTION: <text>`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::model::{QuestionerOutput, ScoredOutput, UncertaintyScore};
use crate::prompt::OutputFormat;

pub const TAG_MOTIVATION: &str = "motivation";
pub const TAG_SCORE: &str = "score";
pub const TAG_QUESTION: &str = "question";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("missing tag")]
    MissingTag,
    #[error("duplicated tag")]
    DuplicateTag,
    #[error("unclosed tag")]
    UnclosedTag,
    #[error("score out of range")]
    ScoreOutOfRange,
    #[error("score is not an integer")]
    ScoreNotInteger,
    #[error("question with non-1 score")]
    UnexpectedQuestion,
    #[error("score 1 without question")]
    MissingQuestion,
    #[error("no decision line")]
    NoDecisionLine,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    /// First offending tag, when the failure is tied to one.
    pub tag: Option<&'static str>,
    pub raw: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tag {
            Some(tag) => write!(f, "{} (<{}>)", self.kind, tag),
            None => write!(f, "{}", self.kind),
        }
    }
}

impl core::error::Error for ParseError {}

impl ParseError {
    fn new(kind: ParseErrorKind, tag: Option<&'static str>, raw: &str) -> Self {
        ParseError {
            kind,
            tag,
            raw: raw.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TagToken {
    start: usize,
    end: usize,
    closing: bool,
}

/// Scans `<`, optional `/`, a name, `>` with optional ASCII whitespace between
/// the parts. Returns the token if its name matches `name`.
fn tag_at(bytes: &[u8], start: usize, name: &str) -> Option<TagToken> {
    let mut i = start + 1;
    let skip_ws = |i: &mut usize| {
        while *i < bytes.len() && bytes[*i].is_ascii_whitespace() {
            *i += 1;
        }
    };
    skip_ws(&mut i);
    let closing = i < bytes.len() && bytes[i] == b'/';
    if closing {
        i += 1;
        skip_ws(&mut i);
    }
    let name_start = i;
    while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
        i += 1;
    }
    if !bytes[name_start..i].eq_ignore_ascii_case(name.as_bytes()) {
        return None;
    }
    skip_ws(&mut i);
    if i < bytes.len() && bytes[i] == b'>' {
        Some(TagToken {
            start,
            end: i + 1,
            closing,
        })
    } else {
        None
    }
}

fn tokens(raw: &str, name: &str) -> Vec<TagToken> {
    let bytes = raw.as_bytes();
    bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'<')
        .filter_map(|(i, _)| tag_at(bytes, i, name))
        .collect()
}

fn extract<'a>(raw: &'a str, name: &'static str) -> Result<&'a str, ParseError> {
    let toks = tokens(raw, name);
    let opens: Vec<&TagToken> = toks.iter().filter(|t| !t.closing).collect();
    let closes: Vec<&TagToken> = toks.iter().filter(|t| t.closing).collect();
    match (opens.len(), closes.len()) {
        (0, 0) => Err(ParseError::new(ParseErrorKind::MissingTag, Some(name), raw)),
        (1, 1) if opens[0].end <= closes[0].start => Ok(&raw[opens[0].end..closes[0].start]),
        (o, c) if o > 1 || c > 1 => Err(ParseError::new(ParseErrorKind::DuplicateTag, Some(name), raw)),
        _ => Err(ParseError::new(ParseErrorKind::UnclosedTag, Some(name), raw)),
    }
}

fn parse_score(inner: &str, raw: &str) -> Result<UncertaintyScore, ParseError> {
    let t = inner.trim();
    let digits = t.strip_prefix(['-', '+']).unwrap_or(t);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ParseError::new(ParseErrorKind::ScoreNotInteger, Some(TAG_SCORE), raw));
    }
    // anything that is an integer but not 0/1/2 is out of range, however long
    match t.parse::<i64>().ok().and_then(|v| UncertaintyScore::new(v).ok()) {
        Some(s) => Ok(s),
        None => Err(ParseError::new(ParseErrorKind::ScoreOutOfRange, Some(TAG_SCORE), raw)),
    }
}

fn question_value(inner: &str) -> Option<String> {
    let t = inner.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("none") {
        None
    } else {
        Some(inner.to_string())
    }
}

/// Parses the scored grammar into `(reasoning, score, question)`.
///
/// Total: every input yields a triple or a [`ParseError`].
pub fn parse_rsq(raw: &str) -> Result<ScoredOutput, ParseError> {
    let score = parse_score(extract(raw, TAG_SCORE)?, raw)?;
    let reasoning = extract(raw, TAG_MOTIVATION)?.to_string();
    let question = question_value(extract(raw, TAG_QUESTION)?);
    match (score.is_unsure(), question.is_some()) {
        (true, false) => Err(ParseError::new(ParseErrorKind::MissingQuestion, Some(TAG_QUESTION), raw)),
        (false, true) => Err(ParseError::new(ParseErrorKind::UnexpectedQuestion, Some(TAG_QUESTION), raw)),
        _ => Ok(ScoredOutput {
            reasoning,
            score,
            question,
        }),
    }
}

/// Parses the binary grammar from the last non-empty line.
pub fn parse_binary(raw: &str) -> Result<QuestionerOutput, ParseError> {
    let trimmed = raw.trim_end();
    let last = match trimmed.rfind('\n') {
        Some(i) => trimmed[i + 1..].trim(),
        None => trimmed.trim(),
    };
    let no_line = || ParseError::new(ParseErrorKind::NoDecisionLine, None, raw);
    let (key, value) = last.split_once(':').ok_or_else(no_line)?;
    let key = key.trim();
    let value = value.trim();
    if key.eq_ignore_ascii_case("decision") {
        let is_match = if value.eq_ignore_ascii_case("match") {
            true
        } else if value.eq_ignore_ascii_case("no_match") || value.eq_ignore_ascii_case("no match") {
            false
        } else {
            return Err(no_line());
        };
        Ok(QuestionerOutput::decision(raw, is_match))
    } else if key.eq_ignore_ascii_case("question") && !value.is_empty() {
        Ok(QuestionerOutput::question(raw, value))
    } else {
        Err(no_line())
    }
}

/// Parses a completion in the given grammar into a questioner turn.
pub fn parse_output(format: OutputFormat, raw: &str) -> Result<QuestionerOutput, ParseError> {
    match format {
        OutputFormat::Scored => parse_rsq(raw).map(|p| QuestionerOutput::from_scored(raw, p)),
        OutputFormat::Binary => parse_binary(raw),
    }
}
