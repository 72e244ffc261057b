//! Knowledge-based post-processing: regex extraction of attribute values,
//! correction against a per-product knowledge base, and aspect-based
//! filtering through the substitute-set classifier.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::{classify_text, SubstituteSet};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    Identity,
    StripWhitespace,
    /// Keeps digits and dots, drops leading zeros.
    Numeric,
}

impl Normalizer {
    pub fn apply(&self, value: &str) -> String {
        match self {
            Normalizer::Identity => value.to_string(),
            Normalizer::StripWhitespace => value.chars().filter(|c| !c.is_whitespace()).collect(),
            Normalizer::Numeric => {
                let mut s: String =
                    value.chars().filter(|c| c.is_ascii_digit() || *c == '.').collect();
                while s.len() > 1 && s.starts_with('0') && !s.starts_with("0.") {
                    s.remove(0);
                }
                s
            }
        }
    }
}

/// A regular expression with exactly one capture group; the group is the
/// attribute value.
#[derive(Debug, Clone)]
pub struct AttributePattern {
    pub attribute: String,
    pub regex: Regex,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatternSpec {
    attribute: String,
    regex: String,
    #[serde(default = "default_normalizer")]
    normalizer: Normalizer,
}

fn default_normalizer() -> Normalizer {
    Normalizer::Identity
}

impl AttributePattern {
    pub fn new(attribute: &str, pattern: &str, normalizer: Normalizer) -> Result<AttributePattern> {
        let regex = Regex::new(pattern)
            .map_err(|e| Error::Config(format!("pattern for {attribute}: {e}")))?;
        if regex.captures_len() != 2 {
            return Err(Error::Config(format!(
                "pattern for {attribute} must have exactly one capture group, has {}",
                regex.captures_len() - 1
            )));
        }
        Ok(AttributePattern { attribute: attribute.to_string(), regex, normalizer })
    }
}

/// patterns.json: `[{"attribute":…, "regex":…, "normalizer":…}]`.
pub fn load_patterns(path: &Path) -> Result<Vec<AttributePattern>> {
    let specs: Vec<PatternSpec> = serde_json::from_str(&fs::read_to_string(path)?)?;
    specs
        .iter()
        .map(|s| AttributePattern::new(&s.attribute, &s.regex, s.normalizer))
        .collect()
}

/// sku -> attribute -> canonical value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KnowledgeBase {
    pub entries: BTreeMap<String, BTreeMap<String, String>>,
}

impl KnowledgeBase {
    pub fn load(path: &Path) -> Result<KnowledgeBase> {
        let kb: KnowledgeBase = serde_json::from_str(&fs::read_to_string(path)?)?;
        for (sku, attrs) in &kb.entries {
            if attrs.values().any(String::is_empty) {
                return Err(Error::Data(format!("empty canonical value for sku {sku}")));
            }
        }
        Ok(kb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    pub attribute: String,
    /// Normalized capture value.
    pub value: String,
    /// Byte span of the capture group in the input text.
    pub span: Range<usize>,
}

/// Leftmost non-overlapping matches per pattern, applied in pattern order; a
/// later pattern cannot claim text already matched by an earlier one.
pub fn extract_attributes(text: &str, patterns: &[AttributePattern]) -> Vec<Extraction> {
    let mut taken: Vec<Range<usize>> = Vec::new();
    let mut out = Vec::new();
    for pattern in patterns {
        for caps in pattern.regex.captures_iter(text) {
            let full = caps.get(0).expect("group 0 always present");
            if taken.iter().any(|t| full.start() < t.end && t.start < full.end()) {
                continue;
            }
            let group = match caps.get(1) {
                Some(g) => g,
                None => continue, // the group can fail to participate in a match
            };
            taken.push(full.range());
            out.push(Extraction {
                attribute: pattern.attribute.clone(),
                value: pattern.normalizer.apply(group.as_str()),
                span: group.range(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionAction {
    Replaced,
    Kept,
    NotInKb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionEntry {
    pub attribute: String,
    pub found: String,
    pub canonical: Option<String>,
    pub action: CorrectionAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionReport {
    /// False when the sku has no knowledge-base entry at all; the text is
    /// then left untouched and `entries` is empty.
    pub sku_in_kb: bool,
    pub entries: Vec<CorrectionEntry>,
}

/// Replaces every extracted value whose normalized form disagrees with the
/// knowledge base by the canonical value, splicing right to left so earlier
/// spans stay valid.
pub fn correct(
    text: &str,
    sku_id: &str,
    kb: &KnowledgeBase,
    patterns: &[AttributePattern],
) -> (String, CorrectionReport) {
    let Some(facts) = kb.entries.get(sku_id) else {
        return (text.to_string(), CorrectionReport { sku_in_kb: false, entries: Vec::new() });
    };
    let extractions = extract_attributes(text, patterns);
    let normalizer_of = |attribute: &str| {
        patterns
            .iter()
            .find(|p| p.attribute == attribute)
            .map(|p| p.normalizer)
            .unwrap_or(Normalizer::Identity)
    };

    let mut entries = Vec::new();
    let mut replacements: Vec<(Range<usize>, String)> = Vec::new();
    for ex in &extractions {
        match facts.get(&ex.attribute) {
            None => entries.push(CorrectionEntry {
                attribute: ex.attribute.clone(),
                found: ex.value.clone(),
                canonical: None,
                action: CorrectionAction::NotInKb,
            }),
            Some(canonical) => {
                let canon_norm = normalizer_of(&ex.attribute).apply(canonical);
                if canon_norm == ex.value {
                    entries.push(CorrectionEntry {
                        attribute: ex.attribute.clone(),
                        found: ex.value.clone(),
                        canonical: Some(canonical.clone()),
                        action: CorrectionAction::Kept,
                    });
                } else {
                    entries.push(CorrectionEntry {
                        attribute: ex.attribute.clone(),
                        found: ex.value.clone(),
                        canonical: Some(canonical.clone()),
                        action: CorrectionAction::Replaced,
                    });
                    replacements.push((ex.span.clone(), canonical.clone()));
                }
            }
        }
    }

    let mut corrected = text.to_string();
    replacements.sort_by(|a, b| b.0.start.cmp(&a.0.start));
    for (span, value) in replacements {
        corrected.replace_range(span, &value);
    }
    (corrected, CorrectionReport { sku_in_kb: true, entries })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub predicted_aspect: Option<String>,
    pub coverage: Vec<u64>,
}

/// Keep exactly when the classifier's prediction equals the desired aspect;
/// an unknown prediction filters the text out. Never modifies the text.
pub fn filter_by_aspect(
    text: &str,
    desired_aspect: &str,
    sets: &[SubstituteSet],
    vocab: &Vocab,
) -> FilterDecision {
    let (predicted, coverage) = classify_text(text, sets, vocab);
    FilterDecision { keep: predicted.as_deref() == Some(desired_aspect), predicted_aspect: predicted, coverage }
}
