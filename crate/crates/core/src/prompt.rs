//! Prompt rendering: questioner prompt, context serialization, oracle prompt,
//! and the tagged completion format.

use alloc::format;
use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InteractionContext, QaTurn, ScoredOutput};

pub const NO_HISTORY: &str = "There are no previous questions or answers.";
pub const ANSWER_TAG: &str = "<|answer|>";
pub const OUTPUT_FORMAT_BLOCK: &str = "Strictly follow this output format:\n\
<motivation>Your reasoning here</motivation>\n\
<score>0, 1, or 2</score>\n\
<question>Your question or None (if score is not 1)</question>";

/// Slot in the main template replaced by the target description.
pub const DESCRIPTION_SLOT: &str = "USER_TASK";
pub const CATEGORY_SLOT: &str = "CATEGORY";
pub const QUESTION_SLOT: &str = "QUESTION";

pub const FORCE_DECISION_SUFFIX: &str = "You must now decide.";
pub const FORMAT_REMINDER_SUFFIX: &str = "Follow the output format exactly.";

pub const DEFAULT_TEMPLATE_VERSION: &str = "v1";

/// Which completion grammar a questioner is prompted for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    /// `<motivation>`/`<score>`/`<question>` tags.
    #[default]
    Scored,
    /// Final `DECISION: MATCH|NO_MATCH` or `QUESTION: ...` line.
    Binary,
}

/// A complete, versioned set of prompt texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: String,
    pub questioner_system: String,
    pub questioner_main: String,
    pub questioner_binary_main: String,
    pub binary_format: String,
    pub oracle_system: String,
    pub oracle_user: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("description is empty")]
    EmptyDescription,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("unknown template version `{0}`")]
    UnknownVersion(String),
    #[error("template `{name}` lacks the `{slot}` slot")]
    MissingSlot { name: &'static str, slot: &'static str },
}

impl TemplateSet {
    /// Templates compiled into the crate.
    pub fn builtin(version: &str) -> Result<TemplateSet, PromptError> {
        match version {
            "v1" => Ok(TemplateSet {
                version: "v1".to_string(),
                questioner_system: include_str!("../templates/v1/questioner_system.txt").to_string(),
                questioner_main: include_str!("../templates/v1/questioner_main.txt").to_string(),
                questioner_binary_main: include_str!("../templates/v1/questioner_binary_main.txt")
                    .to_string(),
                binary_format: include_str!("../templates/v1/binary_format.txt").to_string(),
                oracle_system: include_str!("../templates/v1/oracle_system.txt").to_string(),
                oracle_user: include_str!("../templates/v1/oracle_user.txt").to_string(),
            }),
            other => Err(PromptError::UnknownVersion(other.to_string())),
        }
    }

    pub fn check(&self) -> Result<(), PromptError> {
        let slots: [(&'static str, &str, &'static str); 3] = [
            ("questioner_main", &self.questioner_main, DESCRIPTION_SLOT),
            ("questioner_binary_main", &self.questioner_binary_main, DESCRIPTION_SLOT),
            ("oracle_user", &self.oracle_user, QUESTION_SLOT),
        ];
        for (name, text, slot) in slots {
            if !text.contains(slot) {
                return Err(PromptError::MissingSlot { name, slot });
            }
        }
        Ok(())
    }
}

/// System and user text of one request; images travel separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub system: String,
    pub user: String,
}

impl PromptText {
    /// Appends a trailing instruction paragraph to the user text.
    pub fn with_suffix(mut self, suffix: &str) -> PromptText {
        self.user.push_str("\n\n");
        self.user.push_str(suffix);
        self
    }
}

fn render_turn(out: &mut String, number: usize, turn: &QaTurn) {
    out.push_str(&format!(
        "{number}. {} {ANSWER_TAG}{}{ANSWER_TAG}",
        turn.question, turn.answer
    ));
}

/// Numbered Q/A lines starting at `first_number`, separated by blank lines.
pub fn render_turns(turns: &[QaTurn], first_number: usize) -> String {
    let mut out = String::new();
    for (i, t) in turns.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        render_turn(&mut out, first_number + i, t);
    }
    out
}

pub fn render_context(ctx: &InteractionContext) -> String {
    if ctx.is_empty() {
        NO_HISTORY.to_string()
    } else {
        render_turns(ctx.turns(), 1)
    }
}

pub fn render_questioner_text(
    templates: &TemplateSet,
    format: OutputFormat,
    description: &str,
    ctx: &InteractionContext,
) -> Result<PromptText, PromptError> {
    if description.trim().is_empty() {
        return Err(PromptError::EmptyDescription);
    }
    let (main, format_block) = match format {
        OutputFormat::Scored => (&templates.questioner_main, OUTPUT_FORMAT_BLOCK),
        OutputFormat::Binary => (&templates.questioner_binary_main, templates.binary_format.trim_end()),
    };
    let body = main.trim_end().replace(DESCRIPTION_SLOT, description);
    let user = format!("{body}\n\n{}\n\n{format_block}", render_context(ctx));
    Ok(PromptText {
        system: templates.questioner_system.trim_end().to_string(),
        user,
    })
}

pub fn render_oracle_text(
    templates: &TemplateSet,
    category: &str,
    question: &str,
) -> Result<PromptText, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    Ok(PromptText {
        system: templates
            .oracle_system
            .trim_end()
            .replace(CATEGORY_SLOT, category),
        user: templates.oracle_user.trim_end().replace(QUESTION_SLOT, question),
    })
}

/// Renders a triple in the tagged completion grammar.
pub fn render_scored_completion(out: &ScoredOutput) -> String {
    format!(
        "<motivation>{}</motivation>\n<score>{}</score>\n<question>{}</question>",
        out.reasoning,
        out.score,
        out.question.as_deref().unwrap_or("None")
    )
}

/// Renders a binary-grammar completion: reasoning, then the final line.
pub fn render_binary_completion(reasoning: &str, decision: Option<bool>, question: Option<&str>) -> String {
    let last = match (decision, question) {
        (Some(true), _) => "DECISION: MATCH".to_string(),
        (Some(false), _) => "DECISION: NO_MATCH".to_string(),
        (None, Some(q)) => format!("QUESTION: {q}"),
        (None, None) => "DECISION: NO_MATCH".to_string(),
    };
    let mut s = String::new();
    if !reasoning.trim().is_empty() {
        s.push_str(reasoning.trim_end());
        s.push('\n');
    }
    s.push_str(&last);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UncertaintyScore;

    fn ctx(pairs: &[(&str, &str)]) -> InteractionContext {
        let mut c = InteractionContext::new();
        for (q, a) in pairs {
            c.push(*q, *a).unwrap();
        }
        c
    }

    #[test]
    fn empty_context_sentence() {
        assert_eq!(
            render_context(&InteractionContext::new()),
            "There are no previous questions or answers."
        );
    }

    #[test]
    fn single_turn_line() {
        assert_eq!(
            render_context(&ctx(&[("Is it red?", "Yes")])),
            "1. Is it red? <|answer|>Yes<|answer|>"
        );
    }

    #[test]
    fn two_turns_in_order() {
        let r = render_context(&ctx(&[("Is it red?", "No"), ("Is it patchwork?", "Yes")]));
        assert_eq!(
            r,
            "1. Is it red? <|answer|>No<|answer|>\n\n2. Is it patchwork? <|answer|>Yes<|answer|>"
        );
    }

    #[test]
    fn questioner_prompt_substitutes_description() {
        let t = TemplateSet::builtin("v1").unwrap();
        let p = render_questioner_text(&t, OutputFormat::Scored, "blue bed", &InteractionContext::new())
            .unwrap();
        assert!(p.user.contains("blue bed"));
        assert!(!p.user.contains(DESCRIPTION_SLOT));
        assert_eq!(p.user.matches(NO_HISTORY).count(), 1);
        assert!(!p.user.contains(ANSWER_TAG));
        assert!(p.user.ends_with(OUTPUT_FORMAT_BLOCK));
        for tag in ["<motivation>", "<score>", "<question>"] {
            assert!(p.user.contains(tag));
        }
    }

    #[test]
    fn questioner_prompt_with_history() {
        let t = TemplateSet::builtin("v1").unwrap();
        let p = render_questioner_text(&t, OutputFormat::Scored, "blue bed", &ctx(&[("Is it red?", "No")]))
            .unwrap();
        assert!(p.user.contains("<|answer|>"));
        assert!(!p.user.contains(NO_HISTORY));
    }

    #[test]
    fn empty_description_rejected() {
        let t = TemplateSet::builtin("v1").unwrap();
        assert_eq!(
            render_questioner_text(&t, OutputFormat::Scored, "  ", &InteractionContext::new()),
            Err(PromptError::EmptyDescription)
        );
    }

    #[test]
    fn builtin_templates_have_slots() {
        TemplateSet::builtin("v1").unwrap().check().unwrap();
        assert!(TemplateSet::builtin("v9").is_err());
    }

    #[test]
    fn oracle_prompt() {
        let t = TemplateSet::builtin("v1").unwrap();
        let p = render_oracle_text(&t, "bed", "Is it blue?").unwrap();
        assert!(p.system.contains("bed"));
        assert_eq!(p.user, "Is it blue?");
    }

    #[test]
    fn scored_completion_shape() {
        let s = render_scored_completion(&ScoredOutput {
            reasoning: "It is red".into(),
            score: UncertaintyScore::NOT_TARGET,
            question: None,
        });
        assert_eq!(
            s,
            "<motivation>It is red</motivation>\n<score>0</score>\n<question>None</question>"
        );
    }
}
