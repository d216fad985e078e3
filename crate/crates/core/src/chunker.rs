//! Splitting documents into extraction pieces along natural text units.
//!
//! Offsets are UTF-8 byte offsets into the source. Concatenating the piece
//! texts in index order always reproduces the source exactly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CharRatioEstimator, TokenEstimator};

pub const DEFAULT_MAX_PIECE_TOKENS: usize = 3000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("document is empty")]
    EmptyDocument,
    #[error("max_piece_tokens must be positive")]
    ZeroBudget,
    #[error("document has {boundaries} interior boundaries, cannot split into {requested} pieces")]
    SplitInfeasible { requested: usize, boundaries: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub index: usize,
    pub text: String,
    pub token_estimate: usize,
    /// Byte span `[start, end)` in the source document.
    pub span: (usize, usize),
    /// Set when a single sentence alone exceeds the piece budget.
    pub oversized: bool,
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '”' | '’')
}

/// Offsets where a paragraph starts: 0, the end of every whitespace run
/// holding at least two line breaks, and `text.len()`.
pub fn paragraph_boundaries(text: &str) -> Vec<usize> {
    let mut out = BTreeSet::from([0, text.len()]);
    let mut run_start: Option<usize> = None;
    let mut newlines = 0;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            run_start.get_or_insert(i);
            if c == '\n' {
                newlines += 1;
            }
        } else {
            if run_start.is_some() && newlines >= 2 {
                out.insert(i);
            }
            run_start = None;
            newlines = 0;
        }
    }
    if newlines >= 2 {
        out.insert(text.len());
    }
    out.into_iter().collect()
}

/// Offsets where a sentence starts: after `.`, `!` or `?` (plus any closing
/// quotes or brackets) followed by whitespace, the boundary sitting after the
/// whitespace run. Paragraph starts are included, as are 0 and `text.len()`.
pub fn sentence_boundaries(text: &str) -> Vec<usize> {
    let mut out: BTreeSet<usize> = paragraph_boundaries(text).into_iter().collect();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        if is_terminal(chars[i].1) {
            let mut j = i + 1;
            while j < chars.len() && (is_terminal(chars[j].1) || is_closer(chars[j].1)) {
                j += 1;
            }
            if j < chars.len() && chars[j].1.is_whitespace() {
                while j < chars.len() && chars[j].1.is_whitespace() {
                    j += 1;
                }
                out.insert(chars.get(j).map_or(text.len(), |c| c.0));
            }
            i = j.max(i + 1);
        } else {
            i += 1;
        }
    }
    out.into_iter().collect()
}

/// Splits under the default `ceil(chars/4)` token estimate.
pub fn split_document(text: &str, max_piece_tokens: usize) -> Result<Vec<Piece>, ChunkError> {
    split_document_with(text, max_piece_tokens, &CharRatioEstimator::default())
}

/// Greedy split: each piece extends to the furthest boundary that keeps it
/// within budget, preferring a paragraph break when that keeps at least half
/// of the reachable length. A sentence longer than the budget becomes its own
/// oversized piece.
pub fn split_document_with(
    text: &str,
    max_piece_tokens: usize,
    estimator: &dyn TokenEstimator,
) -> Result<Vec<Piece>, ChunkError> {
    if max_piece_tokens == 0 {
        return Err(ChunkError::ZeroBudget);
    }
    if text.trim().is_empty() {
        return Err(ChunkError::EmptyDocument);
    }
    let bounds = sentence_boundaries(text);
    let paragraphs: BTreeSet<usize> = paragraph_boundaries(text).into_iter().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut cursor = 1; // index into bounds of the first candidate end
    while start < text.len() {
        let mut best_sentence = None;
        let mut best_paragraph = None;
        let mut k = cursor;
        while k < bounds.len() {
            let b = bounds[k];
            if estimator.estimate(&text[start..b]) > max_piece_tokens {
                break;
            }
            best_sentence = Some(k);
            if paragraphs.contains(&b) {
                best_paragraph = Some(k);
            }
            k += 1;
        }
        let (end_idx, oversized) = match (best_paragraph, best_sentence) {
            (Some(p), Some(s)) if (bounds[p] - start) * 2 >= bounds[s] - start => (p, false),
            (_, Some(s)) => (s, false),
            (_, None) => (cursor, true),
        };
        let end = bounds[end_idx];
        let piece_text = &text[start..end];
        pieces.push(Piece {
            index: pieces.len(),
            text: piece_text.to_owned(),
            token_estimate: estimator.estimate(piece_text),
            span: (start, end),
            oversized,
        });
        start = end;
        cursor = end_idx + 1;
    }
    Ok(pieces)
}

/// Splits into exactly `n` pieces, cutting at the sentence or paragraph
/// boundaries nearest to the evenly spaced offsets `k * len / n`.
pub fn split_into(text: &str, n: usize) -> Result<Vec<Piece>, ChunkError> {
    if text.trim().is_empty() {
        return Err(ChunkError::EmptyDocument);
    }
    let bounds = sentence_boundaries(text);
    let interior: Vec<usize> = bounds[1..bounds.len() - 1].to_vec();
    if n == 0 || interior.len() + 1 < n {
        return Err(ChunkError::SplitInfeasible {
            requested: n,
            boundaries: interior.len(),
        });
    }
    let mut cuts = Vec::with_capacity(n + 1);
    cuts.push(0);
    let mut lo = 0; // first usable interior index
    for k in 1..n {
        let target = k * text.len() / n;
        // leave room for the cuts still to come
        let hi = interior.len() - (n - 1 - k);
        let best = (lo..hi)
            .min_by_key(|&i| interior[i].abs_diff(target))
            .expect("non-empty candidate range");
        cuts.push(interior[best]);
        lo = best + 1;
    }
    cuts.push(text.len());
    let est = CharRatioEstimator::default();
    Ok(cuts
        .windows(2)
        .enumerate()
        .map(|(index, w)| Piece {
            index,
            text: text[w[0]..w[1]].to_owned(),
            token_estimate: est.estimate(&text[w[0]..w[1]]),
            span: (w[0], w[1]),
            oversized: false,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent boundary oracle: scan for ". " style terminators by hand.
    fn naive_sentence_starts(text: &str) -> Vec<usize> {
        let b = text.as_bytes();
        let mut out = vec![0];
        for i in 0..b.len().saturating_sub(1) {
            if matches!(b[i], b'.' | b'!' | b'?') && b[i + 1] == b' ' {
                out.push(i + 2);
            }
        }
        if *out.last().unwrap() != b.len() {
            out.push(b.len());
        }
        out
    }

    #[test]
    fn boundaries_after_each_period_and_space() {
        assert_eq!(sentence_boundaries("A. B. C."), vec![0, 3, 6, 8]);
        assert_eq!(sentence_boundaries("A. B. C."), naive_sentence_starts("A. B. C."));
        assert_eq!(sentence_boundaries(""), vec![0]);
        assert_eq!(sentence_boundaries("no terminal punctuation"), vec![0, 23]);
        assert_eq!(sentence_boundaries("Hi!  \"Yes?\" No."), vec![0, 5, 12, 15]);
    }

    #[test]
    fn paragraph_breaks() {
        let t = "One.\n\nTwo.\n  \nThree.";
        assert_eq!(paragraph_boundaries(t), vec![0, 6, 14, t.len()]);
    }

    fn sample_document(sentences: usize) -> String {
        (0..sentences)
            .map(|i| format!("Sentence number {i:04} talks about topic {} in some detail here.", i % 7))
            .collect::<Vec<_>>()
            .chunks(5)
            .map(|p| p.join(" "))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    #[test]
    fn twelve_thousand_chars_into_three_or_four_pieces() {
        let mut doc = sample_document(200);
        doc.truncate(doc[..12_000].rfind(". ").unwrap() + 1);
        assert!(doc.len() > 11_900);
        let pieces = split_document(&doc, 1000).unwrap();
        assert!((3..=4).contains(&pieces.len()), "{} pieces", pieces.len());
        assert_eq!(pieces.iter().map(|p| p.text.as_str()).collect::<String>(), doc);
        assert!(pieces.iter().all(|p| p.token_estimate <= 1000 && !p.oversized));
        assert!(pieces[..pieces.len() - 1].iter().all(|p| p.text.ends_with("\n\n")));
    }

    #[test]
    fn short_document_is_one_piece() {
        let pieces = split_document("Just a note. Nothing more.", 3000).unwrap();
        assert_eq!(pieces.len(), 1);
        assert_eq!(pieces[0].text, "Just a note. Nothing more.");
        assert_eq!(pieces[0].span, (0, 26));
    }

    #[test]
    fn oversized_sentence_is_flagged() {
        let doc = "word ".repeat(8000) + "end";
        let pieces = split_document(&doc, 1000).unwrap();
        assert_eq!(pieces.len(), 1);
        assert!(pieces[0].oversized);
        assert!(pieces[0].token_estimate > 1000);
    }

    #[test]
    fn errors() {
        assert_eq!(split_document(" \n\t", 10), Err(ChunkError::EmptyDocument));
        assert_eq!(split_document("x", 0), Err(ChunkError::ZeroBudget));
        assert!(matches!(split_into("One. Two.", 3), Err(ChunkError::SplitInfeasible { .. })));
    }

    #[test]
    fn split_into_exact_count() {
        let doc = sample_document(60);
        for n in [1, 2, 7, 15] {
            let pieces = split_into(&doc, n).unwrap();
            assert_eq!(pieces.len(), n);
            assert_eq!(pieces.iter().map(|p| p.text.as_str()).collect::<String>(), doc);
            assert!(pieces.iter().all(|p| !p.text.is_empty()));
        }
    }

    proptest! {
        #[test]
        fn split_is_lossless(text in "\\PC{1,400}([.!?] \\PC{0,80}|\n\n\\PC{0,80}){0,12}", budget in 1usize..60) {
            prop_assume!(!text.trim().is_empty());
            let pieces = split_document(&text, budget).unwrap();
            let joined: String = pieces.iter().map(|p| p.text.as_str()).collect();
            prop_assert_eq!(&joined, &text);
            let mut prev = 0;
            for (i, p) in pieces.iter().enumerate() {
                prop_assert_eq!(p.index, i);
                prop_assert_eq!(p.span.0, prev);
                prop_assert!(p.span.1 > p.span.0);
                prop_assert!(p.oversized || p.token_estimate <= budget);
                prev = p.span.1;
            }
            prop_assert_eq!(split_document(&text, budget).unwrap(), pieces);
        }

        #[test]
        fn boundaries_strictly_increasing(text in "\\PC{0,300}") {
            let b = sentence_boundaries(&text);
            prop_assert_eq!(b[0], 0);
            prop_assert_eq!(*b.last().unwrap(), text.len());
            prop_assert!(b.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(b.iter().all(|&o| text.is_char_boundary(o)));
        }
    }
}
