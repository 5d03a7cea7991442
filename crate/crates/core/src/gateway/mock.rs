use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendReply, ChatBackend, ChatRequest, LedgerEntry, Usage};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum RuleMatch {
    /// Substring of the content text.
    Contains(String),
    /// Regular expression searched in the content text.
    Pattern(Regex),
    /// Entire content text.
    Exact(String),
}

impl RuleMatch {
    fn matches(&self, content: &str) -> bool {
        match self {
            RuleMatch::Contains(s) => content.contains(s.as_str()),
            RuleMatch::Pattern(re) => re.is_match(content),
            RuleMatch::Exact(s) => content == s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockRule {
    pub matcher: RuleMatch,
    /// When set, the request's image digests must equal this list.
    pub images: Option<Vec<String>>,
    pub reply: String,
}

/// Ordered rules; the first match wins, otherwise `default_reply`.
#[derive(Debug, Clone)]
pub struct MockScript {
    pub default_reply: String,
    pub rules: Vec<MockRule>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exact: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    images: Option<Vec<String>>,
    reply: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScript {
    #[serde(default)]
    default: String,
    #[serde(default)]
    rules: Vec<RawRule>,
}

fn line_of(text: &str, needle: &str) -> usize {
    text.find(needle)
        .map(|pos| text[..pos].matches('\n').count() + 1)
        .unwrap_or(1)
}

impl MockScript {
    pub fn with_default(reply: &str) -> Self {
        MockScript {
            default_reply: reply.to_string(),
            rules: Vec::new(),
        }
    }

    pub fn rule(mut self, substring: &str, reply: &str) -> Self {
        self.rules.push(MockRule {
            matcher: RuleMatch::Contains(substring.to_string()),
            images: None,
            reply: reply.to_string(),
        });
        self
    }

    pub fn pattern(mut self, pattern: &str, reply: &str) -> Result<Self> {
        let re = Regex::new(pattern).map_err(|e| Error::Validation(format!("bad pattern: {e}")))?;
        self.rules.push(MockRule {
            matcher: RuleMatch::Pattern(re),
            images: None,
            reply: reply.to_string(),
        });
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawScript = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let mut rules = Vec::with_capacity(raw.rules.len());
        for r in raw.rules {
            let anchor = r
                .contains
                .as_deref()
                .or(r.pattern.as_deref())
                .or(r.exact.as_deref())
                .unwrap_or(&r.reply);
            let line = line_of(text, &serde_json::to_string(anchor)?);
            let matcher = match (r.contains, r.pattern, r.exact) {
                (Some(s), None, None) => RuleMatch::Contains(s),
                (None, Some(p), None) => RuleMatch::Pattern(Regex::new(&p).map_err(|e| Error::Parse {
                    line,
                    column: 1,
                    message: format!("invalid pattern: {e}"),
                })?),
                (None, None, Some(s)) => RuleMatch::Exact(s),
                _ => {
                    return Err(Error::Parse {
                        line,
                        column: 1,
                        message: "rule needs exactly one of 'match', 'pattern' or 'exact'".into(),
                    })
                }
            };
            rules.push(MockRule {
                matcher,
                images: r.images,
                reply: r.reply,
            });
        }
        Ok(MockScript {
            default_reply: raw.default,
            rules,
        })
    }

    pub fn to_json(&self) -> String {
        let raw = RawScript {
            default: self.default_reply.clone(),
            rules: self
                .rules
                .iter()
                .map(|r| {
                    let mut raw = RawRule {
                        contains: None,
                        pattern: None,
                        exact: None,
                        images: r.images.clone(),
                        reply: r.reply.clone(),
                    };
                    match &r.matcher {
                        RuleMatch::Contains(s) => raw.contains = Some(s.clone()),
                        RuleMatch::Pattern(re) => raw.pattern = Some(re.as_str().to_string()),
                        RuleMatch::Exact(s) => raw.exact = Some(s.clone()),
                    }
                    raw
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("mock script serialises")
    }

    /// Exact-match rules (content and image digests) reproducing a ledger.
    pub fn from_ledger(entries: &[LedgerEntry]) -> Self {
        MockScript {
            default_reply: String::new(),
            rules: entries
                .iter()
                .map(|e| MockRule {
                    matcher: RuleMatch::Exact(e.content.clone()),
                    images: Some(e.images_sha256.clone()),
                    reply: e.reply.clone(),
                })
                .collect(),
        }
    }

    pub fn reply_for(&self, req: &ChatRequest) -> &str {
        let mut digests: Option<Vec<String>> = None;
        for rule in &self.rules {
            if !rule.matcher.matches(&req.content_text) {
                continue;
            }
            if let Some(want) = &rule.images {
                let got = digests.get_or_insert_with(|| req.image_digests());
                if got != want {
                    continue;
                }
            }
            return &rule.reply;
        }
        &self.default_reply
    }
}

pub fn load_mock_script(path: &Path) -> Result<MockScript> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MockScript::parse(&text)
}

/// Deterministic backend answering from a [`MockScript`].
pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend { script }
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, req: &ChatRequest) -> std::result::Result<BackendReply, BackendError> {
        let text = self.script.reply_for(req).to_string();
        let usage = Usage {
            prompt_tokens: req.content_text.split_whitespace().count() as u64,
            completion_tokens: text.split_whitespace().count() as u64,
        };
        Ok(BackendReply { text, usage })
    }
}
