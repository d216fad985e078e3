//! Needle-infusion evaluation of LLM information extraction.
//!
//! The crate covers the whole loop: a schema of entity types, schema-driven
//! iterated extraction through an LLM gateway, synthetic "needle" entities
//! infused into documents, per-needle identification criteria aggregated into
//! the MINEA score, a summary-quality score family, and a lost-in-the-middle
//! redundancy probe.

pub mod chunker;
pub mod extraction;
pub mod forge;
pub mod gateway;
pub mod litm;
pub mod matching;
pub mod metrics;
pub mod prompts;
pub mod schema;
pub mod text;

pub use extraction::{extract_document, ExtractionConfig, ExtractionRun};
pub use forge::{infuse, strip_needles, FillRange, InfusedDocument, Needle};
pub use gateway::{ChatMessage, GatewayConfig, LlmGateway, MockBackend};
pub use matching::{minea, Criterion, CriterionResult, MineaReport};
pub use schema::{load_schema, Entity, PropertyValue, Schema};
