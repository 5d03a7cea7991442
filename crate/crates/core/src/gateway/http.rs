//! Chat-completions client: JSON over HTTPS, images as base64 PNG parts.

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{BackendError, BackendReply, ChatBackend, ChatRequest, Usage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpConfig {
    /// Full chat-completions URL, e.g. `https://api.example.com/v1/chat/completions`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpConfig {
    /// Reads `SPLATSCOPE_ENDPOINT` and `SPLATSCOPE_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("SPLATSCOPE_ENDPOINT")
            .map_err(|_| Error::Validation("SPLATSCOPE_ENDPOINT is not set and no mock script was given".into()))?;
        Ok(HttpConfig {
            endpoint,
            api_key: std::env::var("SPLATSCOPE_API_KEY").ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_secs(120),
        })
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Transport(format!("building HTTP client: {e}")))?;
        Ok(HttpBackend { config, client })
    }
}

/// Request body; the content text is split at `[img]` markers and images are
/// interleaved in order. Surplus images are appended at the end.
pub(crate) fn request_body(req: &ChatRequest) -> Value {
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut parts = Vec::new();
    let mut images = req.images.iter();
    let mut segments = req.content_text.split("[img]").peekable();
    while let Some(seg) = segments.next() {
        if !seg.is_empty() {
            parts.push(json!({"type": "text", "text": seg}));
        }
        if segments.peek().is_some() {
            if let Some(png) = images.next() {
                parts.push(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{}", b64.encode(png))}
                }));
            }
        }
    }
    for png in images {
        parts.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:image/png;base64,{}", b64.encode(png))}
        }));
    }
    let mut messages = Vec::new();
    if !req.system_text.is_empty() {
        messages.push(json!({"role": "system", "content": req.system_text}));
    }
    messages.push(json!({"role": "user", "content": parts}));
    json!({
        "model": req.model_tag,
        "max_tokens": req.max_tokens,
        "messages": messages,
    })
}

pub(crate) fn parse_reply(body: &Value) -> std::result::Result<BackendReply, BackendError> {
    let text = body["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| BackendError::Fatal(format!("response without message content: {body}")))?;
    let usage = Usage {
        prompt_tokens: body["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: body["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok(BackendReply {
        text: text.to_string(),
        usage,
    })
}

impl ChatBackend for HttpBackend {
    fn send(&self, req: &ChatRequest) -> std::result::Result<BackendReply, BackendError> {
        let mut builder = self.client.post(&self.config.endpoint).json(&request_body(req));
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Fatal(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {body}")));
        }
        let body: Value = resp
            .json()
            .map_err(|e| BackendError::Transient(format!("decoding response: {e}")))?;
        parse_reply(&body)
    }
}
