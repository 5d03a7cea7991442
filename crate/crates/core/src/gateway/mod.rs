//! Uniform access to chat models: retries with backoff, call/token budgets,
//! an image cap, a run ledger, and pluggable backends (HTTP or scripted mock).

mod http;
mod mock;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use http::{HttpBackend, HttpConfig};
pub use mock::{load_mock_script, MockBackend, MockRule, MockScript, RuleMatch};

/// Model tags per pipeline role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTags {
    pub evidence: String,
    pub vqa: String,
    pub selection: String,
    pub verification: String,
    pub judge: String,
}

impl Default for ModelTags {
    fn default() -> Self {
        ModelTags {
            evidence: "gpt-5-mini".into(),
            vqa: "gpt-4o".into(),
            selection: "gpt-5-mini".into(),
            verification: "gpt-5-mini".into(),
            judge: "gpt-4o".into(),
        }
    }
}

impl ModelTags {
    /// Defaults overridden by `SPLATSCOPE_MODEL_{EVIDENCE,VQA,SELECTION,VERIFICATION,JUDGE}`.
    pub fn from_env() -> Self {
        let mut tags = ModelTags::default();
        let slots: [(&str, &mut String); 5] = [
            ("SPLATSCOPE_MODEL_EVIDENCE", &mut tags.evidence),
            ("SPLATSCOPE_MODEL_VQA", &mut tags.vqa),
            ("SPLATSCOPE_MODEL_SELECTION", &mut tags.selection),
            ("SPLATSCOPE_MODEL_VERIFICATION", &mut tags.verification),
            ("SPLATSCOPE_MODEL_JUDGE", &mut tags.judge),
        ];
        for (key, slot) in slots {
            if let Ok(v) = std::env::var(key) {
                if !v.is_empty() {
                    *slot = v;
                }
            }
        }
        tags
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub system_text: String,
    /// Prompt body; `[img]` markers show where the images belong, in order.
    pub content_text: String,
    /// PNG payloads.
    pub images: Vec<Vec<u8>>,
    pub model_tag: String,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn text(system: &str, content: String, model_tag: &str) -> Self {
        ChatRequest {
            system_text: system.to_string(),
            content_text: content,
            images: Vec::new(),
            model_tag: model_tag.to_string(),
            max_tokens: 512,
        }
    }

    pub fn with_images(mut self, images: Vec<Vec<u8>>) -> Self {
        self.images = images;
        self
    }

    pub fn image_digests(&self) -> Vec<String> {
        self.images.iter().map(|png| sha256_hex(png)).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying (timeouts, rate limits, 5xx).
    Transient(String),
    Fatal(String),
}

/// Raw reply from a backend, before the gateway adds latency and bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Usage,
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, req: &ChatRequest) -> std::result::Result<BackendReply, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub max_images: usize,
    pub max_calls: Option<u64>,
    pub max_tokens: Option<u64>,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            max_images: 16,
            max_calls: None,
            max_tokens: None,
            max_in_flight: 4,
        }
    }
}

/// One exchange in the run ledger (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: u64,
    pub model_tag: String,
    pub system: String,
    pub content: String,
    pub images_sha256: Vec<String>,
    pub reply: String,
    pub usage: Usage,
    pub latency_ms: u64,
    pub attempts: u32,
}

struct Ledger {
    entries: Vec<LedgerEntry>,
    sink: Option<File>,
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
}

/// Shareable chat gateway. All counters and the ledger are internally synchronised.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    config: GatewayConfig,
    tags: ModelTags,
    calls: AtomicU64,
    tokens: AtomicU64,
    seq: AtomicU64,
    ledger: Mutex<Ledger>,
    in_flight: InFlight,
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>, config: GatewayConfig) -> Self {
        Gateway {
            backend,
            config,
            tags: ModelTags::default(),
            calls: AtomicU64::new(0),
            tokens: AtomicU64::new(0),
            seq: AtomicU64::new(0),
            ledger: Mutex::new(Ledger {
                entries: Vec::new(),
                sink: None,
            }),
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
            },
        }
    }

    pub fn mock(script: MockScript) -> Self {
        let config = GatewayConfig {
            backoff_base: Duration::ZERO,
            ..Default::default()
        };
        Gateway::new(Box::new(MockBackend::new(script)), config)
    }

    pub fn with_tags(mut self, tags: ModelTags) -> Self {
        self.tags = tags;
        self
    }

    /// Appends every subsequent exchange to `path` as JSON lines.
    pub fn with_ledger_file(self, path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.ledger.lock().unwrap().sink = Some(file);
        Ok(self)
    }

    pub fn tags(&self) -> &ModelTags {
        &self.tags
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn calls_made(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn tokens_used(&self) -> u64 {
        self.tokens.load(Ordering::SeqCst)
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.ledger.lock().unwrap().entries.clone()
    }

    /// Mock script that replays this run's exchanges.
    pub fn replay_script(&self) -> MockScript {
        MockScript::from_ledger(&self.ledger())
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<ChatResponse> {
        if req.content_text.trim().is_empty() {
            return Err(Error::Validation("chat request with empty content".into()));
        }
        if req.images.len() > self.config.max_images {
            return Err(Error::Validation(format!(
                "request carries {} images, cap is {}",
                req.images.len(),
                self.config.max_images
            )));
        }
        if let Some(max) = self.config.max_calls {
            let prev = self.calls.fetch_add(1, Ordering::SeqCst);
            if prev >= max {
                self.calls.fetch_sub(1, Ordering::SeqCst);
                return Err(Error::Budget(format!("call budget of {max} exhausted")));
            }
        } else {
            self.calls.fetch_add(1, Ordering::SeqCst);
        }
        if let Some(max) = self.config.max_tokens {
            let used = self.tokens.load(Ordering::SeqCst);
            if used >= max {
                return Err(Error::Budget(format!("token budget of {max} exhausted ({used} used)")));
            }
        }

        let _slot = self.acquire_slot();
        let start = Instant::now();
        let mut attempts = 0;
        let reply = loop {
            attempts += 1;
            match self.backend.send(req) {
                Ok(r) => break r,
                Err(BackendError::Transient(msg)) if attempts <= self.config.max_retries => {
                    log::warn!("transient gateway failure (attempt {attempts}): {msg}");
                    let backoff = self.config.backoff_base * 2u32.saturating_pow(attempts - 1);
                    std::thread::sleep(backoff);
                }
                Err(BackendError::Transient(msg)) => {
                    return Err(Error::Transport(format!("{msg} (after {attempts} attempts)")))
                }
                Err(BackendError::Fatal(msg)) => return Err(Error::Transport(msg)),
            }
        };
        let latency_ms = start.elapsed().as_millis() as u64;
        self.tokens.fetch_add(
            reply.usage.prompt_tokens + reply.usage.completion_tokens,
            Ordering::SeqCst,
        );
        self.record(req, &reply, latency_ms, attempts)?;
        Ok(ChatResponse {
            text: reply.text,
            usage: reply.usage,
            latency_ms,
        })
    }

    fn record(&self, req: &ChatRequest, reply: &BackendReply, latency_ms: u64, attempts: u32) -> Result<()> {
        let mut ledger = self.ledger.lock().unwrap();
        let entry = LedgerEntry {
            seq: self.seq.fetch_add(1, Ordering::SeqCst),
            model_tag: req.model_tag.clone(),
            system: req.system_text.clone(),
            content: req.content_text.clone(),
            images_sha256: req.image_digests(),
            reply: reply.text.clone(),
            usage: reply.usage,
            latency_ms,
            attempts,
        };
        if let Some(sink) = ledger.sink.as_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(sink, "{line}").map_err(|e| Error::Transport(format!("writing ledger: {e}")))?;
        }
        ledger.entries.push(entry);
        Ok(())
    }

    fn acquire_slot(&self) -> SlotGuard<'_> {
        let limit = self.config.max_in_flight.max(1);
        let mut count = self.in_flight.count.lock().unwrap();
        while *count >= limit {
            count = self.in_flight.freed.wait(count).unwrap();
        }
        *count += 1;
        SlotGuard { gate: &self.in_flight }
    }
}

struct SlotGuard<'a> {
    gate: &'a InFlight,
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.gate.count.lock().unwrap() -= 1;
        self.gate.freed.notify_one();
    }
}

/// Reads a JSON-lines ledger.
pub fn read_ledger(path: &Path) -> Result<Vec<LedgerEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })
        })
        .collect()
}
