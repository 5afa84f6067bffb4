//! Deterministic scripted backends for tests and offline runs.
//!
//! Every model interaction a test expects must be declared as a rule;
//! unmatched requests raise [`Error::MockUnmatched`] so prompt drift cannot
//! pass silently.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{approx_tokens, ChatBackend, ChatRequest, ChatResponse};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vector::Embedding;

/// How a rule's `user` pattern is compared against the request's user
/// prompt. The `system` pattern always matches by equality, with the empty
/// string acting as a wildcard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Exact,
    Prefix,
    Contains,
}

/// One scripted reply.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub mode: MatchMode,
    #[serde(default)]
    pub system: String,
    pub user: String,
    pub reply: String,
}

impl MockRule {
    fn matches(&self, system: &str, user: &str) -> bool {
        if !self.system.is_empty() && self.system != system {
            return false;
        }
        match self.mode {
            MatchMode::Exact => self.user == user && self.system == system,
            MatchMode::Prefix => user.starts_with(&self.user),
            MatchMode::Contains => user.contains(&self.user),
        }
    }
}

/// Stable 64-bit FNV-1a hash of a (system, user) prompt pair. Unseeded, so
/// identical prompts hash identically across process runs.
pub fn prompt_hash(system: &str, user: &str) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut hash = OFFSET;
    for byte in system.bytes().chain([0x1f]).chain(user.bytes()) {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

/// An ordered rule set. Exact rules are indexed by prompt hash; prefix and
/// contains rules are scanned in declaration order, first match wins.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    rules: Vec<MockRule>,
    exact_index: HashMap<u64, usize>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rule: MockRule) {
        if rule.mode == MatchMode::Exact {
            self.exact_index
                .entry(prompt_hash(&rule.system, &rule.user))
                .or_insert(self.rules.len());
        }
        self.rules.push(rule);
    }

    pub fn exact(
        mut self,
        system: impl Into<String>,
        user: impl Into<String>,
        reply: impl Into<String>,
    ) -> Self {
        self.push(MockRule {
            mode: MatchMode::Exact,
            system: system.into(),
            user: user.into(),
            reply: reply.into(),
        });
        self
    }

    pub fn prefix(
        mut self,
        system: impl Into<String>,
        user: impl Into<String>,
        reply: impl Into<String>,
    ) -> Self {
        self.push(MockRule {
            mode: MatchMode::Prefix,
            system: system.into(),
            user: user.into(),
            reply: reply.into(),
        });
        self
    }

    pub fn contains(
        mut self,
        system: impl Into<String>,
        user: impl Into<String>,
        reply: impl Into<String>,
    ) -> Self {
        self.push(MockRule {
            mode: MatchMode::Contains,
            system: system.into(),
            user: user.into(),
            reply: reply.into(),
        });
        self
    }

    /// Load rules from a line-delimited record file of
    /// `{match, system, user, reply}` objects.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut script = Self::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rule: MockRule = serde_json::from_str(&line).map_err(|e| Error::FormatError {
                line: idx + 1,
                message: e.to_string(),
            })?;
            script.push(rule);
        }
        Ok(script)
    }

    pub fn lookup(&self, system: &str, user: &str) -> Option<&str> {
        if let Some(&idx) = self.exact_index.get(&prompt_hash(system, user)) {
            let rule = &self.rules[idx];
            if rule.matches(system, user) {
                return Some(&rule.reply);
            }
        }
        self.rules
            .iter()
            .find(|r| r.mode != MatchMode::Exact && r.matches(system, user))
            .map(|r| r.reply.as_str())
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Scripted chat backend. Referentially transparent: the same request gets
/// the same byte-identical reply in every run.
pub struct MockChat {
    script: MockScript,
}

impl MockChat {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }
}

impl ChatBackend for MockChat {
    fn complete_raw(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let reply = self
            .script
            .lookup(&req.system_prompt, &req.user_prompt)
            .ok_or(Error::MockUnmatched {
                prompt_hash: prompt_hash(&req.system_prompt, &req.user_prompt),
            })?;
        Ok(ChatResponse {
            text: reply.to_string(),
            prompt_tokens: approx_tokens(&req.system_prompt) + approx_tokens(&req.user_prompt),
            completion_tokens: approx_tokens(reply),
            backend_id: "mock".to_string(),
            latency_ms: 0,
        })
    }

    fn id(&self) -> &str {
        "mock"
    }
}

/// Scripted embedding backend mapping exact texts to fixed vectors.
pub struct MockEmbedder<S> {
    vectors: HashMap<String, Vec<S>>,
}

impl<S: Scalar> MockEmbedder<S> {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<S>)>) -> Self {
        Self {
            vectors: entries.into_iter().collect(),
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding<S>> {
        self.vectors
            .get(text)
            .map(|v| Embedding::new(v.clone()))
            .ok_or(Error::MockUnmatched {
                prompt_hash: prompt_hash("", text),
            })
    }
}
