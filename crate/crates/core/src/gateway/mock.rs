use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::{ChatBackend, ChatMessage, Completion, GatewayConfig, GatewayError};

type ReplyFn = dyn Fn(&[ChatMessage]) -> String + Send + Sync;

/// Where a [`MockBackend`] gets its replies from.
pub enum Responder {
    /// Canned replies consumed in order.
    Script(Mutex<VecDeque<String>>),
    /// Reply computed from the full request, so identical requests always
    /// get identical replies.
    Func(Box<ReplyFn>),
}

/// Deterministic in-process backend with a call log.
pub struct MockBackend {
    responder: Responder,
    calls: Mutex<Vec<Vec<ChatMessage>>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReplyFile {
    Object { content: String },
    Bare(String),
}

impl MockBackend {
    pub fn script<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_responder(Responder::Script(Mutex::new(
            replies.into_iter().map(Into::into).collect(),
        )))
    }

    pub fn from_fn(f: impl Fn(&[ChatMessage]) -> String + Send + Sync + 'static) -> Self {
        Self::with_responder(Responder::Func(Box::new(f)))
    }

    /// Loads a replay script from a directory of numbered reply files
    /// (`0000.json`, `0001.json`, ...), each holding `{"content": "..."}` or
    /// a bare JSON string. Files are replayed in file-name order.
    pub fn from_dir(dir: &Path) -> Result<Self, GatewayError> {
        let io = |e: std::io::Error| GatewayError::MalformedResponse(format!("{}: {e}", dir.display()));
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut replies = Vec::with_capacity(files.len());
        for f in files {
            let raw = fs::read_to_string(&f).map_err(io)?;
            let parsed: ReplyFile = serde_json::from_str(&raw)
                .map_err(|e| GatewayError::MalformedResponse(format!("{}: {e}", f.display())))?;
            replies.push(match parsed {
                ReplyFile::Object { content } | ReplyFile::Bare(content) => content,
            });
        }
        Ok(Self::script(replies))
    }

    pub fn with_responder(responder: Responder) -> Self {
        Self {
            responder,
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Every request received so far, in order.
    pub fn calls(&self) -> Vec<Vec<ChatMessage>> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, messages: &[ChatMessage], _cfg: &GatewayConfig) -> Result<Completion, GatewayError> {
        let n = {
            let mut calls = self.calls.lock().unwrap();
            calls.push(messages.to_vec());
            calls.len()
        };
        let content = match &self.responder {
            Responder::Script(queue) => queue
                .lock()
                .unwrap()
                .pop_front()
                .ok_or(GatewayError::ScriptExhausted(n - 1))?,
            Responder::Func(f) => f(messages),
        };
        Ok(Completion { content, attempts: 1 })
    }
}

// Lets tests keep a handle on the call log while the gateway owns the backend.
impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, messages: &[ChatMessage], cfg: &GatewayConfig) -> Result<Completion, GatewayError> {
        (**self).complete(messages, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_runs_out() {
        let m = MockBackend::script(["a"]);
        let cfg = GatewayConfig::default();
        assert_eq!(m.complete(&[], &cfg).unwrap().content, "a");
        assert!(matches!(m.complete(&[], &cfg), Err(GatewayError::ScriptExhausted(1))));
        assert_eq!(m.call_count(), 2);
    }

    #[test]
    fn fn_responder_is_pure_in_request() {
        let m = MockBackend::from_fn(|msgs| format!("{}", msgs.len()));
        let cfg = GatewayConfig::default();
        let req = vec![ChatMessage::user("x")];
        assert_eq!(m.complete(&req, &cfg).unwrap(), m.complete(&req, &cfg).unwrap());
    }

    #[test]
    fn replays_numbered_files() {
        let dir = std::env::temp_dir().join(format!("ng-mock-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("0001.json"), r#""second""#).unwrap();
        fs::write(dir.join("0000.json"), r#"{"content": "first"}"#).unwrap();
        let m = MockBackend::from_dir(&dir).unwrap();
        let cfg = GatewayConfig::default();
        assert_eq!(m.complete(&[], &cfg).unwrap().content, "first");
        assert_eq!(m.complete(&[], &cfg).unwrap().content, "second");
        fs::remove_dir_all(&dir).unwrap();
    }
}
