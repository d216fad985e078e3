//! Canonical text form shared by every matcher and score.
//!
//! The canonical form is Unicode NFC, lowercased, with punctuation stripped
//! from token edges and whitespace collapsed to single spaces. Name matching,
//! keyword matching, grounding checks and the vector-space scores all go
//! through [`tokens`] / [`normalize`] so they agree on what "the same string"
//! means.

use unicode_normalization::UnicodeNormalization;

/// Splits `text` into canonical tokens.
pub fn tokens(text: &str) -> Vec<String> {
    let folded: String = text.nfc().collect::<String>().to_lowercase();
    folded
        .split_whitespace()
        .map(|raw| raw.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Canonical form of `text`: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokens(text).join(" ")
}

/// True when the canonical form of `needle` is non-empty and occurs inside
/// the canonical form of `haystack`.
pub fn contains_normalized(haystack: &str, needle: &str) -> bool {
    let needle = normalize(needle);
    !needle.is_empty() && normalize(haystack).contains(&needle)
}

/// Converts a char index into a byte offset. Indices past the end clamp to
/// `text.len()`.
pub(crate) fn char_to_byte(text: &str, char_idx: usize) -> usize {
    text.char_indices()
        .nth(char_idx)
        .map(|(b, _)| b)
        .unwrap_or(text.len())
}
