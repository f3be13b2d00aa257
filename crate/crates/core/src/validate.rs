//! Structural checks on episode specs and manifests.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{EpisodeSpec, ImageRef};

pub const MIN_OBSERVATIONS: usize = 2;
pub const MAX_OBSERVATIONS: usize = 32;
/// Manifest mean episode length must exceed this.
pub const MIN_MEAN_OBSERVATIONS: f64 = 4.0;
pub const MAX_DESCRIPTION_WORDS: usize = 64;

pub const MANIFEST_SCOPE: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Episode id, or `manifest` for manifest-level rules.
    pub scope: String,
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(scope: &str, field: impl Into<String>, rule: impl Into<String>) -> Self {
        Violation {
            scope: scope.to_string(),
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.scope, self.field, self.rule)
    }
}

/// Answers whether an image reference resolves to readable content.
pub trait ImageProbe {
    fn is_readable(&self, image: &ImageRef) -> bool;
}

impl<F: Fn(&ImageRef) -> bool> ImageProbe for F {
    fn is_readable(&self, image: &ImageRef) -> bool {
        self(image)
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

pub fn validate_episode(spec: &EpisodeSpec, probe: &dyn ImageProbe) -> Vec<Violation> {
    let scope = if spec.id.is_empty() { "<unnamed>" } else { spec.id.as_str() };
    let mut out = Vec::new();

    if spec.id.trim().is_empty() {
        out.push(Violation::new(scope, "id", "id is empty"));
    }
    if spec.category.trim().is_empty() {
        out.push(Violation::new(scope, "category", "category is empty"));
    }

    for (level, text) in spec.descriptions.iter() {
        let field = format!("descriptions.{}", level.as_str());
        if text.trim().is_empty() {
            out.push(Violation::new(scope, field, "description is empty"));
            continue;
        }
        let words = word_count(text);
        if words > MAX_DESCRIPTION_WORDS {
            out.push(Violation::new(
                scope,
                field,
                format!("description has {words} words > {MAX_DESCRIPTION_WORDS}"),
            ));
        }
    }
    let cat = &spec.descriptions.category;
    if cat.contains('\n') || cat.contains(['.', ',', ';']) {
        out.push(Violation::new(
            scope,
            "descriptions.category",
            "category description must be a single noun phrase",
        ));
    }

    let n = spec.observations.len();
    if n < MIN_OBSERVATIONS {
        out.push(Violation::new(scope, "observations", "observations length < 2"));
    }
    if n > MAX_OBSERVATIONS {
        out.push(Violation::new(
            scope,
            "observations",
            format!("observations length {n} > {MAX_OBSERVATIONS}"),
        ));
    }

    let mut seen = BTreeSet::new();
    for (i, obs) in spec.observations.iter().enumerate() {
        if !seen.insert(obs) {
            out.push(Violation::new(
                scope,
                format!("observations[{i}]"),
                format!("duplicate observation `{obs}`"),
            ));
        }
        if i + 1 < n && *obs == spec.target_image {
            out.push(Violation::new(
                scope,
                format!("observations[{i}]"),
                "distractor position holds the target image; the target must come last",
            ));
        }
    }

    if !probe.is_readable(&spec.target_image) {
        out.push(Violation::new(
            scope,
            "target_image",
            format!("image `{}` is not readable", spec.target_image),
        ));
    }
    for (i, obs) in spec.observations.iter().enumerate() {
        if !probe.is_readable(obs) {
            out.push(Violation::new(
                scope,
                format!("observations[{i}]"),
                format!("image `{obs}` is not readable"),
            ));
        }
    }
    out
}

/// Per-episode checks plus duplicate ids and the mean-length rule.
pub fn validate_manifest(specs: &[EpisodeSpec], probe: &dyn ImageProbe) -> Vec<Violation> {
    let mut out = Vec::new();
    if specs.is_empty() {
        out.push(Violation::new(MANIFEST_SCOPE, "episodes", "manifest is empty"));
        return out;
    }
    let mut ids = BTreeSet::new();
    for spec in specs {
        out.extend(validate_episode(spec, probe));
        if !ids.insert(spec.id.as_str()) {
            out.push(Violation::new(
                MANIFEST_SCOPE,
                "id",
                format!("duplicate episode id `{}`", spec.id),
            ));
        }
    }
    let total: usize = specs.iter().map(|s| s.observations.len()).sum();
    let mean = total as f64 / specs.len() as f64;
    if mean <= MIN_MEAN_OBSERVATIONS {
        out.push(Violation::new(
            MANIFEST_SCOPE,
            "observations",
            format!("mean observations {mean:.2} ≤ 4"),
        ));
    }
    out
}
