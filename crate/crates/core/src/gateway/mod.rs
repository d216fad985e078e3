//! Chat-style LLM access: one gateway over an HTTP backend or a scripted mock.
//!
//! A [`Thread`] is the running conversation; [`LlmGateway::send`] appends the
//! outgoing message and the reply to it, after checking that the projected
//! prompt plus the full output allowance fits the context window. Requests
//! that would not fit fail with [`GatewayError::BudgetExceeded`]; nothing is
//! ever truncated.

mod http;
mod mock;
mod tokens;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, API_KEY_ENV};
pub use mock::{MockBackend, Responder};
pub use tokens::{CharRatioEstimator, TokenEstimator};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(
        "request needs {projected} tokens ({thread} in thread + {message} new + {reserve} reserved for output) but the window is {window}"
    )]
    BudgetExceeded {
        thread: usize,
        message: usize,
        reserve: usize,
        projected: usize,
        window: usize,
    },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("mock script exhausted after {0} call(s)")]
    ScriptExhausted(usize),
    #[error("invalid gateway config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// First backoff delay; doubles after every failed attempt.
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            backoff_base_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: usize,
    pub context_window_tokens: usize,
    pub retry: RetryPolicy,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            temperature: 0.0,
            max_output_tokens: 4095,
            context_window_tokens: 128_000,
            retry: RetryPolicy::default(),
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(m.into()));
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if self.max_output_tokens == 0 || self.context_window_tokens == 0 {
            return bad("token limits must be positive");
        }
        if self.max_output_tokens >= self.context_window_tokens {
            return bad("max_output_tokens must be smaller than context_window_tokens");
        }
        if self.retry.max_attempts == 0 {
            return bad("retry.max_attempts must be at least 1");
        }
        Ok(())
    }
}

/// A conversation with a running token estimate.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thread {
    messages: Vec<ChatMessage>,
    message_tokens: Vec<usize>,
    tokens: usize,
}

impl Thread {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Sum of the per-message estimates.
    pub fn token_estimate(&self) -> usize {
        self.tokens
    }

    pub fn push(&mut self, msg: ChatMessage, estimator: &dyn TokenEstimator) {
        let t = estimator.estimate(&msg.content);
        self.tokens += t;
        self.message_tokens.push(t);
        self.messages.push(msg);
    }

    /// Replaces the content of message `idx`, keeping the estimate exact.
    pub fn replace_content(&mut self, idx: usize, content: String, estimator: &dyn TokenEstimator) {
        let t = estimator.estimate(&content);
        self.tokens = self.tokens - self.message_tokens[idx] + t;
        self.message_tokens[idx] = t;
        self.messages[idx].content = content;
    }
}

/// What a backend returns for one completion request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub content: String,
    /// Transport attempts spent, retries included.
    pub attempts: u32,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], cfg: &GatewayConfig) -> Result<Completion, GatewayError>;
}

/// Thread-safe front door to a chat backend.
#[derive(Clone)]
pub struct LlmGateway {
    backend: Arc<dyn ChatBackend>,
    config: GatewayConfig,
    estimator: Arc<dyn TokenEstimator>,
}

impl LlmGateway {
    pub fn new(backend: impl ChatBackend + 'static, config: GatewayConfig) -> Self {
        Self::from_arc(Arc::new(backend), config)
    }

    pub fn from_arc(backend: Arc<dyn ChatBackend>, config: GatewayConfig) -> Self {
        Self {
            backend,
            config,
            estimator: Arc::new(CharRatioEstimator::default()),
        }
    }

    pub fn with_estimator(mut self, estimator: impl TokenEstimator + 'static) -> Self {
        self.estimator = Arc::new(estimator);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn estimator(&self) -> &dyn TokenEstimator {
        self.estimator.as_ref()
    }

    pub fn estimate_tokens(&self, text: &str) -> usize {
        self.estimator.estimate(text)
    }

    /// Tokens a request would occupy: thread + message + output allowance.
    pub fn projected_tokens(&self, thread: &Thread, msg: &ChatMessage) -> usize {
        thread.token_estimate() + self.estimator.estimate(&msg.content) + self.config.max_output_tokens
    }

    pub fn fits(&self, thread: &Thread, msg: &ChatMessage) -> bool {
        self.projected_tokens(thread, msg) <= self.config.context_window_tokens
    }

    /// Sends `msg` in `thread` and returns the reply. On success both the
    /// message and the reply are appended; on error the thread is unchanged.
    pub fn send(&self, thread: &mut Thread, msg: ChatMessage) -> Result<ChatMessage, GatewayError> {
        self.send_with_attempts(thread, msg).map(|(reply, _)| reply)
    }

    pub fn send_with_attempts(
        &self,
        thread: &mut Thread,
        msg: ChatMessage,
    ) -> Result<(ChatMessage, u32), GatewayError> {
        let message = self.estimator.estimate(&msg.content);
        let projected = thread.token_estimate() + message + self.config.max_output_tokens;
        if projected > self.config.context_window_tokens {
            return Err(GatewayError::BudgetExceeded {
                thread: thread.token_estimate(),
                message,
                reserve: self.config.max_output_tokens,
                projected,
                window: self.config.context_window_tokens,
            });
        }
        let mut request = thread.messages.clone();
        request.push(msg.clone());
        let completion = self.backend.complete(&request, &self.config)?;
        let reply = ChatMessage::assistant(completion.content);
        thread.push(msg, self.estimator.as_ref());
        thread.push(reply.clone(), self.estimator.as_ref());
        Ok((reply, completion.attempts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_reply_extends_thread_by_two() {
        let gw = LlmGateway::new(MockBackend::script(["hello"]), GatewayConfig::default());
        let mut thread = Thread::new();
        let reply = gw.send(&mut thread, ChatMessage::user("hi")).unwrap();
        assert_eq!(reply, ChatMessage::assistant("hello"));
        assert_eq!(thread.len(), 2);
        assert_eq!(thread.token_estimate(), 1 + 2);
    }

    #[test]
    fn budget_exceeded_near_full_window() {
        let gw = LlmGateway::new(MockBackend::script(["x"]), GatewayConfig::default());
        let mut thread = Thread::new();
        // 127,000 tokens under the chars/4 estimator
        thread.push(ChatMessage::user("a".repeat(127_000 * 4)), gw.estimator());
        assert_eq!(thread.token_estimate(), 127_000);
        let before = thread.clone();
        let err = gw.send(&mut thread, ChatMessage::user("next")).unwrap_err();
        assert!(matches!(err, GatewayError::BudgetExceeded { window: 128_000, .. }));
        assert_eq!(thread, before);
    }

    #[test]
    fn thread_estimate_tracks_replacements() {
        let est = CharRatioEstimator::default();
        let mut t = Thread::new();
        t.push(ChatMessage::user("abcdefgh"), &est);
        t.push(ChatMessage::assistant("abcd"), &est);
        assert_eq!(t.token_estimate(), 3);
        t.replace_content(0, "a".into(), &est);
        assert_eq!(t.token_estimate(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(GatewayConfig::default().validate().is_ok());
        let cfg = GatewayConfig {
            max_output_tokens: 10,
            context_window_tokens: 10,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
