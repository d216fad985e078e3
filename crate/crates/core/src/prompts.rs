//! Prompt templates. Defaults ship in `assets/prompts/`; every template can be
//! replaced at runtime through [`PromptSet`].
//!
//! Placeholders are written `{name}` and substituted verbatim by [`render`].

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const EXTRACTION_SYSTEM: &str = include_str!("../assets/prompts/extraction_system.txt");
pub const EXTRACTION_PIECE: &str = include_str!("../assets/prompts/extraction_piece.txt");
pub const EXTRACTION_CONTINUE: &str = include_str!("../assets/prompts/extraction_continue.txt");
pub const SCHEMA_SUGGESTION: &str = include_str!("../assets/prompts/schema_suggestion.txt");
pub const NEEDLE_GENERATION: &str = include_str!("../assets/prompts/needle_generation.txt");
pub const NEEDLE_ANNOTATION: &str = include_str!("../assets/prompts/needle_annotation.txt");
pub const NEEDLE_IDENTIFICATION: &str = include_str!("../assets/prompts/needle_identification.txt");

/// Tags around the text piece in extraction requests.
pub const PIECE_OPEN: &str = "<document>\n";
pub const PIECE_CLOSE: &str = "\n</document>";

pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_owned();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Returns the text piece embedded in an extraction request, if any.
/// Mock backends use this to see which piece they are asked about.
pub fn embedded_piece(message: &str) -> Option<&str> {
    let start = message.find(PIECE_OPEN)? + PIECE_OPEN.len();
    let end = message.rfind(PIECE_CLOSE)?;
    (end >= start).then(|| &message[start..end])
}

/// The extraction prompt triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSet {
    pub system: String,
    pub piece: String,
    pub continuation: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            system: EXTRACTION_SYSTEM.into(),
            piece: EXTRACTION_PIECE.into(),
            continuation: EXTRACTION_CONTINUE.into(),
        }
    }
}

impl PromptSet {
    /// Loads `system.txt`, `piece.txt` and `continue.txt` from `dir`,
    /// keeping the default for any file that is absent.
    pub fn from_dir(dir: &Path) -> io::Result<Self> {
        let mut set = Self::default();
        let read = |name: &str, slot: &mut String| -> io::Result<()> {
            let p = dir.join(name);
            if p.exists() {
                *slot = fs::read_to_string(p)?;
            }
            Ok(())
        };
        read("system.txt", &mut set.system)?;
        read("piece.txt", &mut set.piece)?;
        read("continue.txt", &mut set.continuation)?;
        Ok(set)
    }
}
