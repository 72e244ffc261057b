//! Shared text primitives: NFC normalization and grapheme segmentation.
//!
//! The whole pipeline is script-agnostic; the atomic fallback unit everywhere
//! is the Unicode extended grapheme cluster.

use unicode_normalization::UnicodeNormalization;
use unicode_segmentation::UnicodeSegmentation;

pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

pub fn graphemes(text: &str) -> Vec<&str> {
    text.graphemes(true).collect()
}

pub fn is_whitespace(g: &str) -> bool {
    g.chars().all(char::is_whitespace) && !g.is_empty()
}

/// Sentence-ending punctuation; phrase candidates never cross these.
pub fn is_sentence_punct(g: &str) -> bool {
    matches!(g, "." | "!" | "?" | ";" | "。" | "！" | "？" | "；" | "…")
}

/// Hard boundary for phrase candidates: sentence and clause punctuation and
/// any whitespace other than a plain space (tabs and newlines would also
/// break the TSV vocab format).
pub fn is_hard_boundary(g: &str) -> bool {
    is_sentence_punct(g)
        || matches!(g, "," | "，" | ":" | "：" | "、")
        || (is_whitespace(g) && g != " ")
}
