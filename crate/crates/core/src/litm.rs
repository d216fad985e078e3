//! Positional recall probe.
//!
//! A document is split into N pieces and extracted in one thread. Then one
//! piece is fed again, unannounced, as piece N+1. If the model still "sees"
//! what it extracted from that piece, the re-extraction repeats the same
//! names and the name-keyed redundancy is high; a model that lost track of
//! the middle of its context shows a bump there.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::{self, ChunkError};
use crate::extraction::{ExtractError, ExtractionConfig, ExtractionSession};
use crate::gateway::LlmGateway;
use crate::metrics;
use crate::schema::Schema;

#[derive(Debug, Error)]
pub enum LitmError {
    #[error(transparent)]
    Split(#[from] ChunkError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error("position {position} is outside 1..={n}")]
    InvalidPosition { position: usize, n: usize },
    #[error("no probe results to aggregate")]
    NoResults,
    #[error("probe results have different piece counts ({0} vs {1})")]
    MismatchedPieces(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LitmResult {
    pub document: String,
    pub pieces: usize,
    /// Redundancy per position 1..=N; `None` where the position was not
    /// probed.
    pub values: Vec<Option<f64>>,
}

/// Probes `positions` (1-based; all when `None`) of `document` split into
/// exactly `n_pieces` pieces.
///
/// The base extraction of all pieces runs once and is forked per position,
/// which is equivalent to re-running it under deterministic decoding and
/// costs N times fewer calls. A duplicate that yields no entities scores 0.
pub fn probe(
    gateway: &LlmGateway,
    label: &str,
    document: &str,
    n_pieces: usize,
    positions: Option<&[usize]>,
    schema: &Schema,
    cfg: &ExtractionConfig,
) -> Result<LitmResult, LitmError> {
    let pieces = chunker::split_into(document, n_pieces)?;
    let positions: Vec<usize> = match positions {
        Some(p) => p.to_vec(),
        None => (1..=n_pieces).collect(),
    };
    if let Some(&position) = positions.iter().find(|&&p| p == 0 || p > n_pieces) {
        return Err(LitmError::InvalidPosition { position, n: n_pieces });
    }

    let mut base = ExtractionSession::new(gateway, schema, cfg);
    for p in &pieces {
        base.extract_piece(p.index, &p.text)?;
    }
    let mut values = vec![None; n_pieces];
    for position in positions {
        let piece = &pieces[position - 1];
        let mut fork = base.clone();
        let again = fork.extract_piece(n_pieces, &piece.text)?;
        let prior = fork.run().from_piece(piece.index);
        let value = if again.is_empty() {
            0.0
        } else {
            metrics::redundancy(&prior, &again, "name").expect("duplicate extraction is non-empty")
        };
        log::debug!("{label}: position {position} redundancy {value:.4}");
        values[position - 1] = Some(value);
    }
    Ok(LitmResult {
        document: label.to_owned(),
        pieces: n_pieces,
        values,
    })
}

/// Mean per position over the results that probed it.
pub fn aggregate_probes(results: &[LitmResult]) -> Result<Vec<Option<f64>>, LitmError> {
    let first = results.first().ok_or(LitmError::NoResults)?;
    if let Some(r) = results.iter().find(|r| r.pieces != first.pieces) {
        return Err(LitmError::MismatchedPieces(first.pieces, r.pieces));
    }
    Ok((0..first.pieces)
        .map(|i| {
            let vals: Vec<f64> = results.iter().filter_map(|r| r.values[i]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect())
}

/// One row per document plus a final mean row; columns are positions.
pub fn litm_csv(results: &[LitmResult]) -> Result<String, LitmError> {
    let mean = aggregate_probes(results)?;
    let cell = |v: &Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut out = String::from("document");
    for p in 1..=mean.len() {
        out.push_str(&format!(",{p}"));
    }
    out.push('\n');
    for r in results {
        let label = if r.document.contains([',', '"', '\n']) {
            format!("\"{}\"", r.document.replace('"', "\"\""))
        } else {
            r.document.clone()
        };
        out.push_str(&label);
        for v in &r.values {
            out.push(',');
            out.push_str(&cell(v));
        }
        out.push('\n');
    }
    out.push_str("mean");
    for v in &mean {
        out.push(',');
        out.push_str(&cell(v));
    }
    out.push('\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::{ChatMessage, GatewayConfig, MockBackend};
    use crate::prompts;
    use crate::schema::PropertySpec;

    fn schema() -> Schema {
        Schema::new("s", [("Thing".to_owned(), vec![PropertySpec::required("name")])]).unwrap()
    }

    fn document(n: usize) -> String {
        (1..=n).map(|i| format!("Section {i} introduces topic T{i}.")).collect::<Vec<_>>().join("\n\n")
    }

    fn section(msgs: &[ChatMessage]) -> Option<usize> {
        let piece = prompts::embedded_piece(&msgs.last()?.content)?;
        piece.split_whitespace().nth(1)?.parse().ok()
    }

    /// Replies with one entity named after the section; on the duplicate
    /// (a section already seen earlier in the thread) `rename` decides
    /// whether the model repeats the name.
    fn mock(rename: impl Fn(usize, usize) -> bool + Send + Sync + 'static) -> Arc<MockBackend> {
        Arc::new(MockBackend::from_fn(move |msgs| {
            let Some(s) = section(msgs) else { return "[]".into() };
            let seen = msgs[..msgs.len() - 1]
                .iter()
                .filter(|m| prompts::embedded_piece(&m.content).is_some())
                .count();
            let dup = msgs[..msgs.len() - 1].iter().any(|m| m.content == msgs[msgs.len() - 1].content);
            let name = if dup && rename(s, seen) { format!("Fresh T{s}") } else { format!("T{s}") };
            format!(r#"[{{"type":"Thing","name":"{name}"}}]"#)
        }))
    }

    fn cfg() -> ExtractionConfig {
        ExtractionConfig {
            iterations_per_piece: 1,
            ..ExtractionConfig::default()
        }
    }

    #[test]
    fn uniform_mock_gives_flat_profile() {
        let m = mock(|_, _| false);
        let g = LlmGateway::new(m.clone(), GatewayConfig::default());
        let r = probe(&g, "doc", &document(5), 5, None, &schema(), &cfg()).unwrap();
        assert_eq!(r.values, vec![Some(1.0); 5]);
        // base 5 pieces, then one duplicate per position, two calls each
        assert_eq!(m.call_count(), 2 * 5 + 2 * 5);
    }

    #[test]
    fn middle_forgetting_shows() {
        let m = mock(|s, n| s == 1 || s == n);
        let g = LlmGateway::new(m, GatewayConfig::default());
        let r = probe(&g, "doc", &document(3), 3, None, &schema(), &cfg()).unwrap();
        assert_eq!(r.values, vec![Some(0.0), Some(1.0), Some(0.0)]);
    }

    #[test]
    fn single_piece_and_subset() {
        let g = LlmGateway::new(mock(|_, _| false), GatewayConfig::default());
        let r = probe(&g, "d", &document(1), 1, None, &schema(), &cfg()).unwrap();
        assert_eq!(r.values.len(), 1);
        let r = probe(&g, "d", &document(4), 4, Some(&[2]), &schema(), &cfg()).unwrap();
        assert_eq!(r.values, vec![None, Some(1.0), None, None]);
        assert!(matches!(
            probe(&g, "d", &document(4), 4, Some(&[5]), &schema(), &cfg()),
            Err(LitmError::InvalidPosition { .. })
        ));
        assert!(matches!(
            probe(&g, "d", &document(2), 3, None, &schema(), &cfg()),
            Err(LitmError::Split(_))
        ));
    }

    fn res(values: &[f64]) -> LitmResult {
        LitmResult {
            document: "d".into(),
            pieces: values.len(),
            values: values.iter().copied().map(Some).collect(),
        }
    }

    #[test]
    fn aggregation() {
        assert_eq!(aggregate_probes(&[res(&[0.0, 1.0]), res(&[1.0, 0.0])]).unwrap(), vec![Some(0.5), Some(0.5)]);
        assert_eq!(aggregate_probes(&[res(&[0.2, 0.4])]).unwrap(), vec![Some(0.2), Some(0.4)]);
        assert!(matches!(aggregate_probes(&[res(&[0.0]), res(&[0.0, 1.0])]), Err(LitmError::MismatchedPieces(1, 2))));
        assert!(matches!(aggregate_probes(&[]), Err(LitmError::NoResults)));
        // hand-computed means of four documents
        let four = [res(&[0.0, 0.5, 0.0]), res(&[0.0, 1.0, 0.25]), res(&[0.5, 0.75, 0.0]), res(&[0.0, 0.25, 0.25])];
        assert_eq!(aggregate_probes(&four).unwrap(), vec![Some(0.125), Some(0.625), Some(0.125)]);
        let csv = litm_csv(&four[..2]).unwrap();
        assert_eq!(csv, "document,1,2,3\nd,0.0000,0.5000,0.0000\nd,0.0000,1.0000,0.2500\nmean,0.0000,0.7500,0.1250\n");
    }
}
