//! Summary-quality scores comparing a document with the entities extracted
//! from it: semantic similarity, relevance, relevance spread, redundancy
//! avoidance (whole entity and keyed), bias avoidance and incompleteness.
//!
//! All scores are pure functions of their inputs. Text always goes through
//! the canonical form of [`crate::text`].

mod meteor;
mod vector;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::chunker::{self, Piece};
use crate::extraction::ExtractionRun;
use crate::schema::{render_entities, Entity, PropertyValue, Schema};
use crate::text;

pub use meteor::relevance;
pub use vector::{dense_cosine, LatentSpace, TextVector, TfIdf};

/// Upper bound on the latent rank used by [`semantic_similarity`].
pub const MAX_LATENT_RANK: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty input text")]
    EmptyInput,
    #[error("empty entity list")]
    EmptyList,
    #[error("relevance list is empty")]
    EmptyRelevances,
    #[error("mean relevance is zero")]
    ZeroMean,
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
}

/// Canonical sentence/line units of `text`.
fn segments(text: &str) -> Vec<Vec<String>> {
    let bounds = chunker::sentence_boundaries(text);
    bounds
        .windows(2)
        .flat_map(|w| text[w[0]..w[1]].lines())
        .map(text::tokens)
        .filter(|t| !t.is_empty())
        .collect()
}

/// Mean of the TF-IDF cosine and the cosine in a truncated latent space
/// between `document` and `extraction`.
///
/// The run-local corpus is the set of sentence/line units of both texts,
/// sorted so the result does not depend on argument order. TF-IDF weights
/// are fitted on that corpus; the latent space is spanned by the leading
/// `k = min(50, units - 1)` left singular vectors of its term × unit matrix,
/// and each whole text is projected into it.
pub fn semantic_similarity(document: &str, extraction: &str) -> Result<f64, MetricError> {
    let doc_tokens = text::tokens(document);
    let ext_tokens = text::tokens(extraction);
    if doc_tokens.is_empty() || ext_tokens.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut corpus = segments(document);
    corpus.extend(segments(extraction));
    corpus.sort();
    let model = TfIdf::fit(&corpus);
    let a = model.vectorize(&doc_tokens);
    let b = model.vectorize(&ext_tokens);
    let tfidf = a.cosine(&b);

    let unit_vectors: Vec<TextVector> = corpus.iter().map(|u| model.vectorize(u)).collect();
    let space = LatentSpace::fit(&unit_vectors, MAX_LATENT_RANK);
    let latent = dense_cosine(&space.project(&a), &space.project(&b));
    Ok((tfidf + latent) / 2.0)
}

/// Population standard deviation of per-piece relevance divided by its mean.
pub fn relevance_spread(per_piece: &[f64]) -> Result<f64, MetricError> {
    if per_piece.is_empty() {
        return Err(MetricError::EmptyRelevances);
    }
    if per_piece.iter().all(|&x| x == per_piece[0]) {
        return if per_piece[0] == 0.0 { Err(MetricError::ZeroMean) } else { Ok(0.0) };
    }
    let n = per_piece.len() as f64;
    let mean = per_piece.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(MetricError::ZeroMean);
    }
    let var = per_piece.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

fn key_text(e: &Entity, key: Option<&str>) -> String {
    match key {
        Some(k) => e
            .get(k)
            .filter(|v| !v.is_unfilled())
            .map(PropertyValue::display)
            .unwrap_or_default(),
        None => e.render(),
    }
}

/// `1 - redundant / total`, where entity `i` is redundant when some earlier
/// entity `j < i` has cosine similarity ≥ `threshold` with it. Vectors are
/// TF-IDF over the entity list itself, built from the whole rendered entity
/// or only from property `key` when given.
pub fn redundancy_avoidance(entities: &[Entity], threshold: f64, key: Option<&str>) -> Result<f64, MetricError> {
    if entities.is_empty() {
        return Err(MetricError::EmptyList);
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(MetricError::InvalidThreshold(threshold));
    }
    let corpus: Vec<Vec<String>> = entities.iter().map(|e| text::tokens(&key_text(e, key))).collect();
    let model = TfIdf::fit(&corpus);
    let vecs: Vec<TextVector> = corpus.iter().map(|t| model.vectorize(t)).collect();
    // identical vectors can land a rounding step below 1.0
    const SLACK: f64 = 1e-12;
    let redundant = (0..vecs.len())
        .filter(|&i| (0..i).any(|j| vecs[i].cosine(&vecs[j]) >= threshold - SLACK))
        .count();
    Ok(1.0 - redundant as f64 / entities.len() as f64)
}

/// Fraction of `later` whose `key` value (canonical form) equals the key
/// value of some entity in `earlier`.
pub fn redundancy(earlier: &[Entity], later: &[Entity], key: &str) -> Result<f64, MetricError> {
    if later.is_empty() {
        return Err(MetricError::EmptyList);
    }
    let known: std::collections::HashSet<String> = earlier
        .iter()
        .map(|e| text::normalize(&key_text(e, Some(key))))
        .filter(|k| !k.is_empty())
        .collect();
    let hits = later
        .iter()
        .filter(|e| known.contains(&text::normalize(&key_text(e, Some(key)))))
        .count();
    Ok(hits as f64 / later.len() as f64)
}

/// `|A ∩ B| / |B|`: the share of extracted entities whose name occurs in the
/// document. Entities without a name count as ungrounded.
pub fn bias_avoidance(document: &str, entities: &[Entity]) -> Result<f64, MetricError> {
    if entities.is_empty() {
        return Err(MetricError::EmptyList);
    }
    let doc = text::normalize(document);
    let grounded = entities
        .iter()
        .filter(|e| {
            let name = e.name().map(text::normalize).unwrap_or_default();
            !name.is_empty() && doc.contains(&name)
        })
        .count();
    Ok(grounded as f64 / entities.len() as f64)
}

/// True when a required schema property is absent or unfilled, or any
/// property present on the entity is unfilled. For types the schema does not
/// declare only the second rule applies.
pub fn is_incomplete(entity: &Entity, schema: &Schema) -> bool {
    let missing_required = schema.properties(&entity.entity_type).is_some_and(|props| {
        props
            .iter()
            .filter(|p| p.required)
            .any(|p| entity.get(&p.name).is_none_or(PropertyValue::is_unfilled))
    });
    missing_required || entity.properties.values().any(PropertyValue::is_unfilled)
}

/// Share of entities with at least one missing or unfilled value.
pub fn incompleteness(entities: &[Entity], schema: &Schema) -> Result<f64, MetricError> {
    if entities.is_empty() {
        return Err(MetricError::EmptyList);
    }
    let n = entities.iter().filter(|e| is_incomplete(e, schema)).count();
    Ok(n as f64 / entities.len() as f64)
}

/// One redundancy-avoidance setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancySetting {
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl RedundancySetting {
    pub fn label(&self) -> String {
        match &self.key {
            None => format!("redundancy_avoidance({})", self.threshold),
            Some(k) => format!("redundancy_avoidance_{k}({})", self.threshold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreThresholds {
    pub redundancy: Vec<RedundancySetting>,
}

impl Default for ScoreThresholds {
    fn default() -> Self {
        Self {
            redundancy: vec![
                RedundancySetting { threshold: 0.2, key: None },
                RedundancySetting { threshold: 0.1, key: None },
                RedundancySetting {
                    threshold: 0.5,
                    key: Some("name".into()),
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub semantic_similarity: f64,
    pub relevance: f64,
    pub relevance_spread: f64,
    /// Plain and keyed redundancy avoidance, in configured order.
    pub redundancy_avoidance: Vec<(RedundancySetting, f64)>,
    pub bias_avoidance: f64,
    pub incompleteness: f64,
}

impl ScoreVector {
    /// Relevance spread is a normalized deviation and may exceed 1.
    pub fn spread_exceeds_one(&self) -> bool {
        self.relevance_spread > 1.0
    }

    /// Score label → value, in report order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("semantic_similarity".to_owned(), self.semantic_similarity),
            ("relevance".to_owned(), self.relevance),
            ("relevance_spread".to_owned(), self.relevance_spread),
        ];
        rows.extend(self.redundancy_avoidance.iter().map(|(s, v)| (s.label(), *v)));
        rows.push(("bias_avoidance".to_owned(), self.bias_avoidance));
        rows.push(("incompleteness".to_owned(), self.incompleteness));
        rows
    }

    /// Convex combination of the listed components. Weights are normalized
    /// to sum to 1; components missing from `weights` get weight 0.
    pub fn combined(&self, weights: &IndexMap<String, f64>) -> Option<f64> {
        let total: f64 = weights.values().sum();
        if total <= 0.0 || weights.values().any(|w| *w < 0.0) {
            return None;
        }
        let rows: IndexMap<String, f64> = self.rows().into_iter().collect();
        Some(
            weights
                .iter()
                .map(|(k, w)| rows.get(k).copied().unwrap_or(0.0) * w / total)
                .sum(),
        )
    }
}

impl Serialize for ScoreVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut flat: IndexMap<String, serde_json::Value> = self
            .rows()
            .into_iter()
            .map(|(k, v)| (k, serde_json::json!(v)))
            .collect();
        flat.insert("relevance_spread_exceeds_one".into(), self.spread_exceeds_one().into());
        flat.serialize(s)
    }
}

/// Assembles the full score vector for one run over `document`.
///
/// Per-piece relevance compares each piece with the entities whose
/// provenance points at it.
pub fn score_vector(
    document: &str,
    pieces: &[Piece],
    run: &ExtractionRun,
    schema: &Schema,
    thresholds: &ScoreThresholds,
) -> Result<ScoreVector, MetricError> {
    if run.entities.is_empty() {
        return Err(MetricError::EmptyList);
    }
    let summary = render_entities(&run.entities);
    let per_piece: Vec<f64> = pieces
        .iter()
        .map(|p| relevance(&p.text, &render_entities(&run.from_piece(p.index))))
        .collect();
    let redundancy_avoidance = thresholds
        .redundancy
        .iter()
        .map(|s| Ok((s.clone(), redundancy_avoidance(&run.entities, s.threshold, s.key.as_deref())?)))
        .collect::<Result<_, MetricError>>()?;
    Ok(ScoreVector {
        semantic_similarity: semantic_similarity(document, &summary)?,
        relevance: relevance(document, &summary),
        relevance_spread: relevance_spread(&per_piece)?,
        redundancy_avoidance,
        bias_avoidance: bias_avoidance(document, &run.entities)?,
        incompleteness: incompleteness(&run.entities, schema)?,
    })
}

/// CSV with one row per score and one column per iteration count.
pub fn iteration_table_csv(columns: &[(usize, ScoreVector)]) -> String {
    let mut out = String::from("score");
    for (it, _) in columns {
        out.push_str(&format!(",{it}"));
    }
    out.push('\n');
    if let Some((_, first)) = columns.first() {
        for (r, (label, _)) in first.rows().iter().enumerate() {
            out.push_str(label);
            for (_, sv) in columns {
                out.push_str(&format!(",{:.4}", sv.rows()[r].1));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{PropertySpec, Provenance};

    fn named(ty: &str, name: &str) -> Entity {
        Entity::new(ty).with("name", name)
    }

    #[test]
    fn similarity_identity_and_disjoint() {
        let t = "Graph indexes speed up retrieval. Meetings gather researchers.";
        assert!((semantic_similarity(t, t).unwrap() - 1.0).abs() < 1e-12);
        let d = semantic_similarity("alpha beta gamma.", "delta epsilon zeta.").unwrap();
        assert!(d.abs() < 1e-12, "{d}");
        assert_eq!(semantic_similarity("", "x"), Err(MetricError::EmptyInput));
    }

    #[test]
    fn similarity_is_bit_symmetric() {
        let a = "The AI Clan Meeting gathers enthusiasts. Graph Index speeds retrieval of linked data.";
        let b = "Event. AI Meeting. community gathering\nProduct. GRIX. graph index retrieval";
        assert_eq!(semantic_similarity(a, b).unwrap(), semantic_similarity(b, a).unwrap());
    }

    #[test]
    fn spread() {
        assert_eq!(relevance_spread(&[0.4, 0.4, 0.4]).unwrap(), 0.0);
        assert!((relevance_spread(&[0.2, 0.4]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(relevance_spread(&[]), Err(MetricError::EmptyRelevances));
        assert_eq!(relevance_spread(&[0.0, 0.0]), Err(MetricError::ZeroMean));
    }

    #[test]
    fn redundancy_avoidance_cases() {
        let same = vec![named("Person", "Jane Roe"); 4];
        assert!((redundancy_avoidance(&same, 0.9, None).unwrap() - 0.25).abs() < 1e-15);
        assert!((redundancy_avoidance(&same, 1.0, Some("name")).unwrap() - 0.25).abs() < 1e-15);
        let disjoint = vec![named("A", "one"), named("B", "two"), named("C", "three")];
        assert_eq!(redundancy_avoidance(&disjoint, 0.1, None).unwrap(), 1.0);
        assert_eq!(redundancy_avoidance(&[], 0.5, None), Err(MetricError::EmptyList));
        assert_eq!(
            redundancy_avoidance(&disjoint, 0.0, None),
            Err(MetricError::InvalidThreshold(0.0))
        );
    }

    #[test]
    fn keyed_redundancy_counts() {
        let a = [named("T", "X"), named("T", "Y"), named("T", "Z")];
        let b = [named("T", "x"), named("T", "Q")];
        assert_eq!(redundancy(&a, &b, "name").unwrap(), 0.5);
        assert_eq!(redundancy(&a, &a, "name").unwrap(), 1.0);
        assert_eq!(redundancy(&a, &[named("T", "W")], "name").unwrap(), 0.0);
        assert_eq!(redundancy(&a, &[], "name"), Err(MetricError::EmptyList));
    }

    #[test]
    fn bias_avoidance_counts_grounded_names() {
        let doc = "Alice met Bob at the Graph Summit.";
        let es = [named("Person", "Alice"), named("Person", "Bob"), named("Person", "Carol")];
        assert!((bias_avoidance(doc, &es).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(bias_avoidance(doc, &es[..2]).unwrap(), 1.0);
        assert_eq!(bias_avoidance(doc, &[]), Err(MetricError::EmptyList));
    }

    fn toy_schema() -> Schema {
        Schema::new(
            "toy",
            [
                (
                    "Person".to_owned(),
                    ["name", "birthDate", "worksFor", "jobTitle"].map(PropertySpec::required).to_vec(),
                ),
                ("Insight".to_owned(), vec![PropertySpec::required("name"), PropertySpec::required("description")]),
            ],
        )
        .unwrap()
    }

    /// The three-entity toy example: an insight, a person whose birth date is
    /// not known, and the organization the person works for.
    pub(crate) fn toy_entities() -> Vec<Entity> {
        vec![
            Entity::new("Insight")
                .with("name", "AI adoption in healthcare")
                .with("description", "Hospitals increasingly adopt AI for diagnostics."),
            Entity::new("Person")
                .with("name", "AI Enthusiast")
                .with("worksFor", "Tech Innovations Inc.")
                .with("jobTitle", "Data Scientist"),
            Entity::new("Organization").with("name", "Tech Innovations Inc."),
        ]
    }

    #[test]
    fn incompleteness_of_toy_example() {
        let v = incompleteness(&toy_entities(), &toy_schema()).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(incompleteness(&toy_entities()[2..], &toy_schema()).unwrap(), 0.0);
        let all_missing = vec![Entity::new("Person").with("name", "X"); 2];
        assert_eq!(incompleteness(&all_missing, &toy_schema()).unwrap(), 1.0);
    }

    #[test]
    fn score_vector_isolates_redundancy() {
        let doc = "Alice works at Acme. Bob founded Beta Labs.";
        let pieces = chunker::split_document(doc, 6).unwrap();
        let mut run = ExtractionRun { epochs: 1, ..Default::default() };
        for (i, (n, w)) in [("Alice", "Acme"), ("Bob", "Beta Labs")].iter().enumerate() {
            let mut e = Entity::new("Person").with("name", *n).with("worksFor", *w);
            e.provenance = Some(Provenance { piece: i.min(pieces.len() - 1), iteration: 0, epoch: 0 });
            run.entities.push(e);
        }
        let schema = Schema::new("s", [("Person".to_owned(), vec![PropertySpec::required("name")])]).unwrap();
        let th = ScoreThresholds::default();
        let base = score_vector(doc, &pieces, &run, &schema, &th).unwrap();
        assert_eq!(base.bias_avoidance, 1.0);
        assert_eq!(base.incompleteness, 0.0);

        let mut dup = run.clone();
        dup.entities.push(run.entities[0].clone());
        let with_dup = score_vector(doc, &pieces, &dup, &schema, &th).unwrap();
        assert!(with_dup.redundancy_avoidance.iter().zip(&base.redundancy_avoidance).all(|(a, b)| a.1 < b.1));
        assert_eq!(with_dup.bias_avoidance, base.bias_avoidance);
        assert_eq!(with_dup.incompleteness, base.incompleteness);

        let empty = ExtractionRun::default();
        assert_eq!(score_vector(doc, &pieces, &empty, &schema, &th), Err(MetricError::EmptyList));
    }

    #[test]
    fn flat_json_and_table() {
        let sv = ScoreVector {
            semantic_similarity: 0.5,
            relevance: 0.25,
            relevance_spread: 1.5,
            redundancy_avoidance: ScoreThresholds::default().redundancy.into_iter().map(|s| (s, 1.0)).collect(),
            bias_avoidance: 1.0,
            incompleteness: 0.0,
        };
        let json = serde_json::to_value(&sv).unwrap();
        assert_eq!(json["redundancy_avoidance_name(0.5)"], 1.0);
        assert_eq!(json["relevance_spread_exceeds_one"], true);
        let csv = iteration_table_csv(&[(0, sv.clone()), (1, sv)]);
        assert!(csv.starts_with("score,0,1\nsemantic_similarity,0.5000,0.5000\n"));
        assert_eq!(csv.lines().count(), 9);
    }
}
