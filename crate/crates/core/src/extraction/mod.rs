//! Schema-driven extraction with iterated calls, in-thread history and epoch
//! restarts.
//!
//! A document is split into pieces that are extracted in order inside one
//! conversation thread. Each piece gets one extraction call followed by
//! `iterations_per_piece` continuation calls. Everything extracted so far
//! stays in the thread, so the model sees its own history. When the next
//! request would no longer fit the context window, a fresh thread (a new
//! epoch) is started and extraction continues there. The run is the plain
//! concatenation of every parsed entity; duplicates are kept.

mod parse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::{self, ChunkError, Piece, DEFAULT_MAX_PIECE_TOKENS};
use crate::gateway::{ChatMessage, GatewayError, LlmGateway, Role, Thread};
use crate::prompts::{self, PromptSet};
use crate::schema::{Entity, Provenance, Schema};

pub use parse::{find_json, parse_entities, parse_entities_detailed, ParseOutcome};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("document is empty")]
    EmptyDocument,
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error("gateway failed during piece {piece}, iteration {iteration}: {source}")]
    Gateway {
        piece: usize,
        iteration: usize,
        #[source]
        source: GatewayError,
        /// Everything extracted before the failure.
        partial: Box<ExtractionRun>,
    },
    #[error("piece {piece} needs {projected} tokens even in a fresh thread; window is {window}")]
    PieceTooLarge {
        piece: usize,
        projected: usize,
        window: usize,
    },
    #[error("thread holds no prior extraction exchange to continue")]
    NoPriorExchange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Continuation calls after the first call on each piece.
    pub iterations_per_piece: usize,
    pub max_piece_tokens: usize,
    /// Further caps the gateway's own window when smaller.
    pub context_window_tokens: usize,
    /// Once the thread exceeds this fraction of the window, earlier replies
    /// are restated as names and types only. `None` disables compaction.
    pub history_compaction: Option<f64>,
    #[serde(skip)]
    pub prompts: PromptSet,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            iterations_per_piece: 3,
            max_piece_tokens: DEFAULT_MAX_PIECE_TOKENS,
            context_window_tokens: 128_000,
            history_compaction: Some(0.25),
            prompts: PromptSet::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub epoch: usize,
    pub piece: usize,
    pub iteration: usize,
    pub request: String,
    pub reply: String,
    pub attempts: u32,
    pub parsed: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractionRun {
    pub entities: Vec<Entity>,
    /// Number of independent threads used (1 when no restart happened).
    pub epochs: usize,
    #[serde(skip)]
    pub transcript: Vec<TranscriptEntry>,
}

impl ExtractionRun {
    pub fn call_count(&self) -> usize {
        self.transcript.len()
    }

    /// Entities whose provenance points at `piece`.
    pub fn from_piece(&self, piece: usize) -> Vec<Entity> {
        self.entities
            .iter()
            .filter(|e| e.provenance.is_some_and(|p| p.piece == piece))
            .cloned()
            .collect()
    }

    /// Entities extracted with at most `iterations` continuation calls per
    /// piece, i.e. the run an extraction with that setting would have
    /// produced from the same replies.
    pub fn up_to_iteration(&self, iterations: usize) -> ExtractionRun {
        ExtractionRun {
            entities: self
                .entities
                .iter()
                .filter(|e| e.provenance.is_none_or(|p| p.iteration <= iterations))
                .cloned()
                .collect(),
            epochs: self.epochs,
            transcript: Vec::new(),
        }
    }

    /// Transcript as newline-delimited JSON.
    pub fn transcript_jsonl(&self) -> String {
        self.transcript
            .iter()
            .map(|t| serde_json::to_string(t).expect("transcript serializes") + "\n")
            .collect()
    }
}

/// Schema listing inserted into the system prompt.
pub fn describe_schema(schema: &Schema) -> String {
    schema
        .types()
        .map(|(ty, props)| {
            let list = props
                .iter()
                .map(|p| {
                    if p.required {
                        p.name.clone()
                    } else {
                        format!("{} (optional)", p.name)
                    }
                })
                .collect::<Vec<_>>()
                .join(", ");
            format!("- {ty}: {list}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn compact_listing(entities: &[Entity]) -> String {
    let items: Vec<serde_json::Value> = entities
        .iter()
        .map(|e| serde_json::json!({"type": e.entity_type, "name": e.name().unwrap_or("")}))
        .collect();
    serde_json::to_string(&items).expect("listing serializes")
}

/// Sends the continuation instruction in `thread` and returns only the
/// entities parsed from the new reply.
pub fn continue_extraction(
    gateway: &LlmGateway,
    thread: &mut Thread,
    prompts: &PromptSet,
) -> Result<Vec<Entity>, GatewayError> {
    let reply = gateway.send(thread, ChatMessage::user(prompts.continuation.clone()))?;
    Ok(parse_entities(&reply.content))
}

#[derive(Clone)]
struct AssistantTurn {
    msg_idx: usize,
    entities: Vec<Entity>,
    compacted: bool,
}

/// Stateful extraction over a sequence of pieces sharing one history.
/// Cloning forks the history.
#[derive(Clone)]
pub struct ExtractionSession<'a> {
    gateway: &'a LlmGateway,
    cfg: &'a ExtractionConfig,
    system_prompt: String,
    window: usize,
    thread: Thread,
    turns: Vec<AssistantTurn>,
    epoch: usize,
    run: ExtractionRun,
}

impl<'a> ExtractionSession<'a> {
    pub fn new(gateway: &'a LlmGateway, schema: &Schema, cfg: &'a ExtractionConfig) -> Self {
        let system_prompt = prompts::render(
            &cfg.prompts.system,
            &[("schema_name", schema.name()), ("schema", &describe_schema(schema))],
        );
        let window = cfg.context_window_tokens.min(gateway.config().context_window_tokens);
        let mut s = Self {
            gateway,
            cfg,
            system_prompt,
            window,
            thread: Thread::new(),
            turns: Vec::new(),
            epoch: 0,
            run: ExtractionRun {
                epochs: 1,
                ..Default::default()
            },
        };
        s.reset_thread();
        s
    }

    fn reset_thread(&mut self) {
        self.thread = Thread::new();
        self.turns.clear();
        self.thread
            .push(ChatMessage::system(self.system_prompt.clone()), self.gateway.estimator());
    }

    fn start_epoch(&mut self) {
        self.epoch += 1;
        self.run.epochs = self.epoch + 1;
        log::info!("context window exhausted, starting epoch {}", self.epoch);
        self.reset_thread();
    }

    fn fits(&self, msg: &ChatMessage) -> bool {
        self.gateway.projected_tokens(&self.thread, msg) <= self.window
    }

    fn ensure_fits(&mut self, piece: usize, msg: &ChatMessage, seed: Option<(&ChatMessage, &[Entity])>) -> Result<(), ExtractError> {
        if self.fits(msg) {
            return Ok(());
        }
        self.start_epoch();
        if let Some((piece_msg, so_far)) = seed {
            // resume a piece mid-way: restate it and what it already yielded
            let est = self.gateway.estimator();
            self.thread.push(piece_msg.clone(), est);
            self.thread.push(ChatMessage::assistant(compact_listing(so_far)), est);
        }
        if self.fits(msg) {
            Ok(())
        } else {
            Err(ExtractError::PieceTooLarge {
                piece,
                projected: self.gateway.projected_tokens(&self.thread, msg),
                window: self.window,
            })
        }
    }

    fn compact_history(&mut self) {
        let Some(fraction) = self.cfg.history_compaction else { return };
        if (self.thread.token_estimate() as f64) <= fraction * self.window as f64 {
            return;
        }
        for turn in self.turns.iter_mut().filter(|t| !t.compacted) {
            let listing = compact_listing(&turn.entities);
            self.thread.replace_content(turn.msg_idx, listing, self.gateway.estimator());
            turn.compacted = true;
        }
    }

    fn call(&mut self, piece: usize, iteration: usize, msg: ChatMessage) -> Result<Vec<Entity>, ExtractError> {
        let request = msg.content.clone();
        let (reply, attempts) = self
            .gateway
            .send_with_attempts(&mut self.thread, msg)
            .map_err(|source| ExtractError::Gateway {
                piece,
                iteration,
                source,
                partial: Box::new(self.run.clone()),
            })?;
        debug_assert!(self.thread.token_estimate() <= self.window);
        let outcome = parse_entities_detailed(&reply.content);
        let provenance = Provenance {
            piece,
            iteration,
            epoch: self.epoch,
        };
        let entities: Vec<Entity> = outcome
            .entities
            .into_iter()
            .map(|mut e| {
                e.provenance = Some(provenance);
                e
            })
            .collect();
        self.turns.push(AssistantTurn {
            msg_idx: self.thread.len() - 1,
            entities: entities.clone(),
            compacted: false,
        });
        self.run.transcript.push(TranscriptEntry {
            epoch: self.epoch,
            piece,
            iteration,
            request,
            reply: reply.content,
            attempts,
            parsed: entities.len(),
            dropped: outcome.dropped.len(),
        });
        self.run.entities.extend(entities.iter().cloned());
        Ok(entities)
    }

    /// Extracts one piece: a first call plus the configured continuations.
    /// Returns the entities extracted from it.
    pub fn extract_piece(&mut self, index: usize, text: &str) -> Result<Vec<Entity>, ExtractError> {
        debug_assert_eq!(self.thread.messages()[0].role, Role::System);
        self.compact_history();
        let piece_msg = ChatMessage::user(prompts::render(&self.cfg.prompts.piece, &[("piece", text)]));
        self.ensure_fits(index, &piece_msg, None)?;
        let mut found = self.call(index, 0, piece_msg.clone())?;
        for iteration in 1..=self.cfg.iterations_per_piece {
            let cont = ChatMessage::user(self.cfg.prompts.continuation.clone());
            self.ensure_fits(index, &cont, Some((&piece_msg, &found)))?;
            found.extend(self.call(index, iteration, cont)?);
        }
        Ok(found)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn thread(&self) -> &Thread {
        &self.thread
    }

    pub fn run(&self) -> &ExtractionRun {
        &self.run
    }

    pub fn finish(self) -> ExtractionRun {
        self.run
    }
}

/// Splits `document` and extracts every piece in order.
pub fn extract_document(
    gateway: &LlmGateway,
    document: &str,
    schema: &Schema,
    cfg: &ExtractionConfig,
) -> Result<ExtractionRun, ExtractError> {
    if document.trim().is_empty() {
        return Err(ExtractError::EmptyDocument);
    }
    let pieces = chunker::split_document_with(document, cfg.max_piece_tokens, gateway.estimator())?;
    extract_pieces(gateway, &pieces, schema, cfg)
}

pub fn extract_pieces(
    gateway: &LlmGateway,
    pieces: &[Piece],
    schema: &Schema,
    cfg: &ExtractionConfig,
) -> Result<ExtractionRun, ExtractError> {
    let mut session = ExtractionSession::new(gateway, schema, cfg);
    for p in pieces {
        session.extract_piece(p.index, &p.text)?;
    }
    Ok(session.finish())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::{GatewayConfig, MockBackend};
    use crate::schema::PropertySpec;

    fn schema() -> Schema {
        Schema::new(
            "test",
            [("Thing".to_owned(), vec![PropertySpec::required("name")])],
        )
        .unwrap()
    }

    #[test]
    fn zero_iterations_means_one_call_per_piece() {
        let mock = Arc::new(MockBackend::from_fn(|_| "[]".into()));
        let gw = LlmGateway::new(mock.clone(), GatewayConfig::default());
        let cfg = ExtractionConfig {
            iterations_per_piece: 0,
            max_piece_tokens: 10,
            ..Default::default()
        };
        let doc = "First sentence here. Second sentence there. Third one now.";
        let pieces = chunker::split_document(doc, 10).unwrap();
        let run = extract_document(&gw, doc, &schema(), &cfg).unwrap();
        assert_eq!(mock.call_count(), pieces.len());
        assert_eq!(run.call_count(), pieces.len());
        assert_eq!(run.epochs, 1);
    }

    #[test]
    fn continuation_returns_only_new_entities() {
        let gw = LlmGateway::new(
            MockBackend::script([
                r#"[{"type":"Thing","name":"a"}]"#,
                "NO_NEW_ENTITIES",
                r#"[{"type":"Thing","name":"b"},{"type":"Thing","name":"c"}]"#,
            ]),
            GatewayConfig::default(),
        );
        let prompts = PromptSet::default();
        let mut thread = Thread::new();
        gw.send(&mut thread, ChatMessage::user("extract")).unwrap();
        assert!(continue_extraction(&gw, &mut thread, &prompts).unwrap().is_empty());
        let two = continue_extraction(&gw, &mut thread, &prompts).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(thread.len(), 6);
    }

    #[test]
    fn gateway_error_keeps_partial_run() {
        let gw = LlmGateway::new(
            MockBackend::script([r#"[{"type":"Thing","name":"a"}]"#]),
            GatewayConfig::default(),
        );
        let cfg = ExtractionConfig {
            iterations_per_piece: 1,
            ..Default::default()
        };
        match extract_document(&gw, "Some text.", &schema(), &cfg) {
            Err(ExtractError::Gateway { partial, iteration: 1, .. }) => {
                assert_eq!(partial.entities.len(), 1);
                assert_eq!(partial.transcript.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn compaction_restates_names_only() {
        let reply = r#"[{"type":"Thing","name":"alpha","description":"a very long description that takes many tokens to state in full"}]"#;
        let mock = Arc::new(MockBackend::from_fn(move |_| reply.into()));
        let gw = LlmGateway::new(mock.clone(), GatewayConfig { context_window_tokens: 2000, max_output_tokens: 100, ..Default::default() });
        let cfg = ExtractionConfig {
            iterations_per_piece: 0,
            history_compaction: Some(0.0),
            ..Default::default()
        };
        let pieces = chunker::split_into("One piece. Two piece.", 2).unwrap();
        extract_pieces(&gw, &pieces, &schema(), &cfg).unwrap();
        let second_request = &mock.calls()[1];
        assert_eq!(second_request[2].content, r#"[{"type":"Thing","name":"alpha"}]"#);
    }

    #[test]
    fn up_to_iteration_filters_provenance() {
        let mut run = ExtractionRun { epochs: 1, ..Default::default() };
        for it in 0..3 {
            let mut e = Entity::new("Thing").with("name", format!("e{it}"));
            e.provenance = Some(Provenance { piece: 0, iteration: it, epoch: 0 });
            run.entities.push(e);
        }
        assert_eq!(run.up_to_iteration(1).entities.len(), 2);
        assert_eq!(run.from_piece(0).len(), 3);
    }
}
