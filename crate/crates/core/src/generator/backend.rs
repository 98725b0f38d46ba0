//! Generation backends: a chat-completions HTTP client and an offline mock.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::embed::excerpt;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    Mock,
}

fn default_timeout_ms() -> u64 {
    120_000
}

fn default_retries() -> u32 {
    2
}

fn default_api_key_env() -> String {
    "PRAGE_API_KEY".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    /// Full URL of the chat-completions endpoint.
    #[serde(default)]
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    /// Fine-tuned checkpoint; used for grouping results only.
    #[serde(default)]
    pub fine_tuned: bool,
    /// Fixed output for mock backends; when absent the mock answers from the
    /// prompt's context (or question).
    #[serde(default)]
    pub mock_output: Option<String>,
}

pub const MAX_RETRIES: u32 = 10;

impl BackendConfig {
    pub fn mock(model_name: &str) -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint_url: String::new(),
            model_name: model_name.to_string(),
            temperature: 0.0,
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            api_key_env: default_api_key_env(),
            fine_tuned: false,
            mock_output: None,
        }
    }

    pub fn http(model_name: &str, endpoint_url: &str) -> Self {
        BackendConfig {
            kind: BackendKind::Http,
            endpoint_url: endpoint_url.to_string(),
            ..Self::mock(model_name)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_name.trim().is_empty() {
            return Err(Error::config("model_name", "must not be empty"));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::config("temperature", "must be >= 0"));
        }
        if self.retries > MAX_RETRIES {
            return Err(Error::config(
                "retries",
                format!("at most {MAX_RETRIES} retries"),
            ));
        }
        if self.kind == BackendKind::Http && self.endpoint_url.is_empty() {
            return Err(Error::config("endpoint_url", "required for http backends"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Backend>> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Http => Box::new(HttpBackend::new(self)),
            BackendKind::Mock => Box::new(match &self.mock_output {
                Some(text) => MockBackend::fixed(text),
                None => MockBackend::extractive(),
            }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn user(model: &str, prompt: &str, max_tokens: u32, temperature: f64) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            max_tokens,
            temperature,
        }
    }

    pub fn prompt(&self) -> &str {
        self.messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub content: String,
    pub finish_reason: Option<String>,
    pub raw: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendError {
    /// Connection, timeout or non-success status; worth retrying.
    Transport(String),
    /// The backend answered with something that is not a chat completion.
    Malformed(String),
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> std::result::Result<BackendReply, BackendError>;

    /// Whether latency should be measured with the wall clock. Offline
    /// backends report zero so their runs are byte-reproducible.
    fn wall_clock(&self) -> bool {
        true
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Parses a chat-completions response body.
pub fn parse_completion(body: &str) -> std::result::Result<BackendReply, BackendError> {
    let raw: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| BackendError::Malformed(format!("{e}: {}", excerpt(body))))?;
    let parsed: CompletionResponse = serde_json::from_value(raw.clone())
        .map_err(|e| BackendError::Malformed(format!("{e}: {}", excerpt(body))))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Malformed(format!("no choices: {}", excerpt(body))))?;
    Ok(BackendReply {
        content: choice.message.content.unwrap_or_default(),
        finish_reason: choice.finish_reason,
        raw,
    })
}

pub struct HttpBackend {
    endpoint: String,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(cfg: &BackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        HttpBackend {
            endpoint: cfg.endpoint_url.clone(),
            agent,
            api_key: std::env::var(&cfg.api_key_env).ok(),
        }
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> std::result::Result<BackendReply, BackendError> {
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(req)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Transport(format!(
                "status {status}: {}",
                excerpt(&body)
            )));
        }
        parse_completion(&body)
    }
}

/// Deterministic offline backend. Output is the first `max_tokens`
/// whitespace-separated words of its source text; the finish reason is
/// `length` when the source has at least `max_tokens` words.
#[derive(Debug, Clone)]
pub struct MockBackend {
    fixed: Option<String>,
}

impl MockBackend {
    pub fn fixed(text: &str) -> Self {
        MockBackend {
            fixed: Some(text.to_string()),
        }
    }

    /// Answers from the text between `Contexte:` and `Question:` when the
    /// prompt has one, else from the text after the prompt's last `:`.
    pub fn extractive() -> Self {
        MockBackend { fixed: None }
    }

    fn source<'a>(&'a self, prompt: &'a str) -> &'a str {
        if let Some(text) = &self.fixed {
            return text;
        }
        if let Some(start) = prompt.find("Contexte:") {
            let rest = &prompt[start + "Contexte:".len()..];
            let end = rest.find("Question:").unwrap_or(rest.len());
            return &rest[..end];
        }
        prompt.rsplit(':').next().unwrap_or(prompt)
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &ChatRequest) -> std::result::Result<BackendReply, BackendError> {
        let words: Vec<&str> = self.source(req.prompt()).split_whitespace().collect();
        let budget = req.max_tokens as usize;
        let content = words[..words.len().min(budget)].join(" ");
        let finish = if words.len() >= budget {
            "length"
        } else {
            "stop"
        };
        let raw = json!({
            "object": "chat.completion",
            "model": req.model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": content},
                "finish_reason": finish,
            }],
        });
        Ok(BackendReply {
            content,
            finish_reason: Some(finish.to_string()),
            raw,
        })
    }

    fn wall_clock(&self) -> bool {
        false
    }
}
