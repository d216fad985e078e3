//! Needle generation, annotation and seeded infusion.
//!
//! A needle is a short synthetic paragraph introducing an entity that does
//! not occur in the host document. Needles are placed at paragraph starts
//! (or sentence starts in documents with fewer than three paragraphs) drawn
//! without replacement by a seeded RNG, so the same seed always yields the
//! same enriched text. Offsets and lengths in [`Placement`] count Unicode
//! scalar values of the enriched text.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chunker;
use crate::extraction::find_json;
use crate::gateway::{ChatMessage, GatewayError, LlmGateway, Thread};
use crate::prompts;
use crate::text;

pub const MIN_KEYWORDS: usize = 3;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("document is empty")]
    EmptyDocument,
    #[error("needle count must be at least 1")]
    InvalidCount,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("invalid model reply: {0}")]
    InvalidReply(String),
    #[error("generated needle {name:?} already occurs in the document, also after regeneration")]
    NoveltyFailure { name: String },
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("needle {0} is not annotated")]
    NotAnnotated(String),
    #[error("needles would fill {ratio:.3} of the enriched text, above the {max} ceiling; use fewer or shorter needles")]
    FillRatioInfeasible { ratio: f64, max: f64 },
    #[error("needles fill only {ratio:.3} of the enriched text, below the {min} floor")]
    BelowFloor {
        ratio: f64,
        min: f64,
        /// The infusion as performed, for callers that accept the low ratio.
        infused: Box<InfusedDocument>,
    },
    #[error("{needles} needles but only {boundaries} insertion points")]
    TooFewBoundaries { needles: usize, boundaries: usize },
    #[error("infused document is corrupted: {0}")]
    Corrupted(String),
    #[error("invalid fill range [{min}, {max}]")]
    InvalidFillRange { min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Needle {
    /// Content hash; see [`needle_id`]. May be left empty in hand-written
    /// needle files and filled in with [`Needle::with_id`].
    #[serde(default)]
    pub id: String,
    #[serde(rename = "type")]
    pub entity_type: String,
    pub paragraph: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    /// Char offset in the enriched text once infused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insertion_offset: Option<usize>,
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Content hash of (type, name, paragraph), 16 hex digits.
pub fn needle_id(entity_type: &str, name: &str, paragraph: &str) -> String {
    sha256_hex(&[entity_type.as_bytes(), name.as_bytes(), paragraph.as_bytes()])[..16].to_owned()
}

impl Needle {
    pub fn new(entity_type: impl Into<String>, name: impl Into<String>, paragraph: impl Into<String>) -> Self {
        let (entity_type, name, paragraph) = (entity_type.into(), name.into(), paragraph.into());
        Self {
            id: needle_id(&entity_type, &name, &paragraph),
            entity_type,
            paragraph,
            name,
            description: String::new(),
            keywords: Vec::new(),
            insertion_offset: None,
        }
    }

    /// Fills in an empty id.
    pub fn with_id(mut self) -> Self {
        if self.id.is_empty() {
            self.id = needle_id(&self.entity_type, &self.name, &self.paragraph);
        }
        self
    }

    pub fn annotated(mut self, description: impl Into<String>, keywords: &[&str]) -> Self {
        self.description = description.into();
        self.keywords = keywords.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn is_annotated(&self) -> bool {
        !self.name.trim().is_empty() && self.keywords.len() >= MIN_KEYWORDS
    }
}

#[derive(Deserialize)]
struct GeneratedNeedle {
    name: String,
    paragraph: String,
}

fn request_needles(
    gateway: &LlmGateway,
    document: &str,
    entity_type: &str,
    count: usize,
    avoid: &[String],
) -> Result<Vec<GeneratedNeedle>, ForgeError> {
    let avoid_line = if avoid.is_empty() {
        String::new()
    } else {
        format!("Do not use any of these names: {}.\n", avoid.join("; "))
    };
    let prompt = prompts::render(
        prompts::NEEDLE_GENERATION,
        &[
            ("count", &count.to_string()),
            ("entity_type", entity_type),
            ("avoid", &avoid_line),
            ("document", document),
        ],
    );
    let reply = gateway.send(&mut Thread::new(), ChatMessage::user(prompt))?;
    let json = find_json(&reply.content).ok_or_else(|| ForgeError::InvalidReply("no JSON found".into()))?;
    let items: Vec<GeneratedNeedle> = match json {
        serde_json::Value::Object(_) => vec![serde_json::from_value(json).map_err(|e| ForgeError::InvalidReply(e.to_string()))?],
        other => serde_json::from_value(other).map_err(|e| ForgeError::InvalidReply(e.to_string()))?,
    };
    if items.len() < count {
        return Err(ForgeError::InvalidReply(format!("asked for {count} needles, got {}", items.len())));
    }
    Ok(items.into_iter().take(count).collect())
}

fn is_novel(document: &str, g: &GeneratedNeedle) -> bool {
    !g.name.trim().is_empty() && !g.paragraph.trim().is_empty() && !text::contains_normalized(document, &g.name)
}

/// Asks the model for `count` paragraphs introducing new entities of
/// `entity_type` that fit `document`. A needle whose name already occurs in
/// the document is regenerated once; a second failure is an error.
pub fn generate_needles(
    gateway: &LlmGateway,
    document: &str,
    entity_type: &str,
    count: usize,
) -> Result<Vec<Needle>, ForgeError> {
    if count == 0 {
        return Err(ForgeError::InvalidCount);
    }
    if document.trim().is_empty() {
        return Err(ForgeError::EmptyDocument);
    }
    let generated = request_needles(gateway, document, entity_type, count, &[])?;
    let mut taken: Vec<String> = generated.iter().map(|g| g.name.clone()).collect();
    let mut out = Vec::with_capacity(count);
    for g in generated {
        let g = if is_novel(document, &g) {
            g
        } else {
            log::info!("needle {:?} is not novel, regenerating", g.name);
            let retry = request_needles(gateway, document, entity_type, 1, &taken)?
                .pop()
                .expect("one needle requested");
            if !is_novel(document, &retry) {
                return Err(ForgeError::NoveltyFailure { name: retry.name });
            }
            taken.push(retry.name.clone());
            retry
        };
        out.push(Needle::new(entity_type, g.name.trim(), g.paragraph.trim()));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct Annotation {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    keywords: Vec<String>,
}

/// Fills in name, description and keywords. Already annotated needles are
/// returned unchanged without a model call.
pub fn annotate_needle(gateway: &LlmGateway, needle: &Needle) -> Result<Needle, ForgeError> {
    if needle.is_annotated() && !needle.description.trim().is_empty() {
        return Ok(needle.clone());
    }
    if needle.paragraph.trim().is_empty() {
        return Err(ForgeError::InvalidAnnotation("needle has no paragraph".into()));
    }
    let prompt = prompts::render(
        prompts::NEEDLE_ANNOTATION,
        &[("entity_type", &needle.entity_type), ("paragraph", &needle.paragraph)],
    );
    let reply = gateway.send(&mut Thread::new(), ChatMessage::user(prompt))?;
    let json = find_json(&reply.content).ok_or_else(|| ForgeError::InvalidReply("no JSON object found".into()))?;
    let ann: Annotation = serde_json::from_value(json).map_err(|e| ForgeError::InvalidReply(e.to_string()))?;
    let keywords: Vec<String> = ann
        .keywords
        .into_iter()
        .map(|k| k.trim().to_owned())
        .filter(|k| !k.is_empty())
        .collect();
    if keywords.len() < MIN_KEYWORDS {
        return Err(ForgeError::InvalidAnnotation(format!(
            "{} keywords, need at least {MIN_KEYWORDS}",
            keywords.len()
        )));
    }
    let name = ann.name.trim().to_owned();
    if name.is_empty() {
        return Err(ForgeError::InvalidAnnotation("empty name".into()));
    }
    let mut out = Needle::new(&needle.entity_type, name, &needle.paragraph);
    out.description = ann.description.trim().to_owned();
    out.keywords = keywords;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FillRange {
    pub min: f64,
    pub max: f64,
}

impl Default for FillRange {
    fn default() -> Self {
        Self { min: 0.10, max: 0.30 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub id: String,
    /// Char offset of the inserted span in the enriched text.
    pub offset: usize,
    /// Length of the inserted span in chars.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfusedDocument {
    #[serde(skip)]
    pub original: String,
    /// SHA-256 of the original text.
    pub original_ref: String,
    /// SHA-256 of the enriched text.
    pub enriched_ref: String,
    pub enriched_text: String,
    pub placements: Vec<Placement>,
    pub fill_ratio: f64,
    pub seed: u64,
}

impl InfusedDocument {
    /// Short hash identifying this exact infusion.
    pub fn fingerprint(&self) -> String {
        let placements = serde_json::to_string(&self.placements).expect("placements serialize");
        sha256_hex(&[
            self.original_ref.as_bytes(),
            self.enriched_ref.as_bytes(),
            &self.seed.to_le_bytes(),
            placements.as_bytes(),
        ])[..16]
            .to_owned()
    }
}

pub fn text_ref(text: &str) -> String {
    sha256_hex(&[text.as_bytes()])
}

/// Inserts `needles` into `document` at seeded natural boundaries.
///
/// Succeeds only when the inserted share of the enriched text lies within
/// `fill`. Above the ceiling nothing is inserted; below the floor the
/// infusion is still performed and returned inside
/// [`ForgeError::BelowFloor`].
pub fn infuse(document: &str, needles: &[Needle], fill: FillRange, seed: u64) -> Result<InfusedDocument, ForgeError> {
    if !(0.0..=1.0).contains(&fill.min) || !(0.0..=1.0).contains(&fill.max) || fill.min > fill.max {
        return Err(ForgeError::InvalidFillRange { min: fill.min, max: fill.max });
    }
    if document.trim().is_empty() {
        return Err(ForgeError::EmptyDocument);
    }
    if let Some(n) = needles.iter().find(|n| !n.is_annotated() || n.paragraph.trim().is_empty()) {
        return Err(ForgeError::NotAnnotated(n.id.clone()));
    }
    let mut paragraphs = chunker::paragraph_boundaries(document);
    paragraphs.retain(|&b| b < document.len());
    // paragraph starts when there are at least three paragraphs and enough
    // of them, sentence starts otherwise
    let (starts, sep) = if paragraphs.len() >= 3 && paragraphs.len() >= needles.len() {
        (paragraphs, "\n\n")
    } else {
        let mut s = chunker::sentence_boundaries(document);
        s.retain(|&b| b < document.len());
        (s, " ")
    };

    let inserts: Vec<String> = needles.iter().map(|n| format!("{}{sep}", n.paragraph.trim())).collect();
    let inserted: usize = inserts.iter().map(|s| s.chars().count()).sum();
    let original_chars = document.chars().count();
    let ratio = inserted as f64 / (original_chars + inserted) as f64;
    if ratio > fill.max {
        return Err(ForgeError::FillRatioInfeasible { ratio, max: fill.max });
    }
    if needles.len() > starts.len() {
        return Err(ForgeError::TooFewBoundaries {
            needles: needles.len(),
            boundaries: starts.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, starts.len(), needles.len()).into_vec();
    // (byte offset in original, needle index), in document order
    let mut order: Vec<(usize, usize)> = picks.iter().enumerate().map(|(i, &b)| (starts[b], i)).collect();
    order.sort();

    let mut enriched = String::with_capacity(document.len() + inserts.iter().map(String::len).sum::<usize>());
    let mut placements = vec![None; needles.len()];
    let mut copied = 0;
    let mut enriched_chars = 0;
    for (at, i) in order {
        let chunk = &document[copied..at];
        enriched.push_str(chunk);
        enriched_chars += chunk.chars().count();
        let len = inserts[i].chars().count();
        placements[i] = Some(Placement {
            id: needles[i].id.clone(),
            offset: enriched_chars,
            length: len,
        });
        enriched.push_str(&inserts[i]);
        enriched_chars += len;
        copied = at;
    }
    enriched.push_str(&document[copied..]);

    let infused = InfusedDocument {
        original: document.to_owned(),
        original_ref: text_ref(document),
        enriched_ref: text_ref(&enriched),
        enriched_text: enriched,
        placements: placements.into_iter().map(|p| p.expect("every needle placed")).collect(),
        fill_ratio: ratio,
        seed,
    };
    if ratio < fill.min {
        return Err(ForgeError::BelowFloor {
            ratio,
            min: fill.min,
            infused: Box::new(infused),
        });
    }
    Ok(infused)
}

/// Needles with their insertion offsets filled in from `infused`.
pub fn placed_needles(needles: &[Needle], infused: &InfusedDocument) -> Vec<Needle> {
    needles
        .iter()
        .map(|n| {
            let mut n = n.clone();
            n.insertion_offset = infused.placements.iter().find(|p| p.id == n.id).map(|p| p.offset);
            n
        })
        .collect()
}

/// Removes every inserted span and returns the original text, verifying both
/// the enriched text and the result against their recorded hashes.
pub fn strip_needles(infused: &InfusedDocument) -> Result<String, ForgeError> {
    if text_ref(&infused.enriched_text) != infused.enriched_ref {
        return Err(ForgeError::Corrupted("enriched text does not match its hash".into()));
    }
    let mut spans: Vec<(usize, usize)> = infused.placements.iter().map(|p| (p.offset, p.length)).collect();
    spans.sort();
    let total = infused.enriched_text.chars().count();
    let mut out = String::with_capacity(infused.enriched_text.len());
    let mut pos = 0;
    for (offset, length) in spans {
        if offset < pos || offset + length > total {
            return Err(ForgeError::Corrupted(format!("placement at {offset}+{length} is out of bounds or overlaps")));
        }
        let a = text::char_to_byte(&infused.enriched_text, pos);
        let b = text::char_to_byte(&infused.enriched_text, offset);
        out.push_str(&infused.enriched_text[a..b]);
        pos = offset + length;
    }
    out.push_str(&infused.enriched_text[text::char_to_byte(&infused.enriched_text, pos)..]);
    if text_ref(&out) != infused.original_ref {
        return Err(ForgeError::Corrupted("stripped text does not match the original hash".into()));
    }
    Ok(out)
}
