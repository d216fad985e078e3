use std::thread;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use super::{ChatBackend, ChatMessage, Completion, GatewayConfig, GatewayError};

pub const API_KEY_ENV: &str = "NEEDLEGAUGE_API_KEY";

#[derive(Serialize)]
struct RequestBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: usize,
}

/// OpenAI-compatible `POST {endpoint}/chat/completions` backend.
///
/// Transport failures, 5xx and 429 responses are retried with exponential
/// backoff up to `retry.max_attempts`; other statuses fail immediately.
pub struct HttpBackend {
    agent: ureq::Agent,
    api_key: Option<String>,
}

enum Attempt {
    Done(String),
    Retry(GatewayError),
    Fatal(GatewayError),
}

impl HttpBackend {
    /// Reads the bearer token from `NEEDLEGAUGE_API_KEY` when set.
    pub fn from_env() -> Self {
        Self::new(std::env::var(API_KEY_ENV).ok())
    }

    pub fn new(api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self { agent, api_key }
    }

    fn attempt(&self, url: &str, body: &RequestBody<'_>, tries: u32) -> Attempt {
        let mut req = self.agent.post(url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(GatewayError::Transport {
                    attempts: tries,
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.into_body().read_to_string() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry(GatewayError::Transport {
                    attempts: tries,
                    message: e.to_string(),
                })
            }
        };
        match status {
            200..=299 => match first_choice_content(&text) {
                Ok(c) => Attempt::Done(c),
                Err(e) => Attempt::Fatal(e),
            },
            429 | 500..=599 => Attempt::Retry(GatewayError::Status { status, body: text }),
            _ => Attempt::Fatal(GatewayError::Status { status, body: text }),
        }
    }
}

fn first_choice_content(body: &str) -> Result<String, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0].message.content".into()))
}

impl ChatBackend for HttpBackend {
    fn complete(&self, messages: &[ChatMessage], cfg: &GatewayConfig) -> Result<Completion, GatewayError> {
        let url = format!("{}/chat/completions", cfg.endpoint.trim_end_matches('/'));
        let body = RequestBody {
            model: &cfg.model,
            messages,
            temperature: cfg.temperature,
            max_tokens: cfg.max_output_tokens,
        };
        let max = cfg.retry.max_attempts.max(1);
        let mut last = None;
        for attempt in 1..=max {
            match self.attempt(&url, &body, attempt) {
                Attempt::Done(content) => {
                    return Ok(Completion {
                        content,
                        attempts: attempt,
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("attempt {attempt}/{max} to {url} failed: {e}");
                    last = Some(e);
                    if attempt < max {
                        let delay = cfg.retry.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                        thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
        Err(match last {
            Some(GatewayError::Transport { message, .. }) => GatewayError::Transport { attempts: max, message },
            Some(e) => e,
            None => unreachable!("at least one attempt is made"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_first_choice() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}},{"message":{"content":"no"}}]}"#;
        assert_eq!(first_choice_content(body).unwrap(), "hi");
        assert!(matches!(
            first_choice_content(r#"{"choices":[]}"#),
            Err(GatewayError::MalformedResponse(_))
        ));
    }
}
