use std::collections::HashMap;

use crate::text;

/// Unigram METEOR F-mean without the fragmentation penalty:
/// `10·P·R / (R + 9·P)` over exact matches of canonical tokens.
///
/// Each token matches at most once (multiset intersection). An empty
/// candidate or reference, or no overlap at all, scores 0.
pub fn relevance(reference: &str, candidate: &str) -> f64 {
    let reference = text::tokens(reference);
    let candidate = text::tokens(candidate);
    if reference.is_empty() || candidate.is_empty() {
        return 0.0;
    }
    let mut available: HashMap<&str, usize> = HashMap::new();
    for t in &reference {
        *available.entry(t).or_default() += 1;
    }
    let mut matches = 0usize;
    for t in &candidate {
        if let Some(n) = available.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                matches += 1;
            }
        }
    }
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / candidate.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    10.0 * p * r / (r + 9.0 * p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        // P = 2/3, R = 1
        let want = 10.0 * (2.0 / 3.0) / (1.0 + 6.0);
        assert!((relevance("the cat", "the cat sat") - want).abs() < 1e-15);
        assert!((want - 0.952_380_952_380_952_4).abs() < 1e-15);
    }

    #[test]
    fn identity_disjoint_and_empty() {
        assert_eq!(relevance("a b c", "a b c"), 1.0);
        assert_eq!(relevance("a b c", "x y"), 0.0);
        assert_eq!(relevance("a b c", ""), 0.0);
        assert_eq!(relevance("", ""), 0.0);
    }

    #[test]
    fn repeated_tokens_match_once() {
        // candidate "the the", reference "the": m = 1, P = 1/2, R = 1
        let want = 10.0 * 0.5 / (1.0 + 4.5);
        assert!((relevance("the", "the the") - want).abs() < 1e-15);
    }
}
