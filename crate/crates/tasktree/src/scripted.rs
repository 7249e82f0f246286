//! Deterministic provider driven by a scenario script.
//!
//! Script files are TOML:
//!
//! ```toml
//! version = 1
//!
//! [[rule]]
//! kind = "decompose"                     # decompose | options | summarize
//! contains = ["book a flight to Tokyo"]  # all must occur in the prompt; empty matches any
//! response = '{"sub_problems": ["..."]}'
//! latency_ms = 0                         # optional artificial delay
//! fail = "transport"                     # optional: transport | refusal
//! times = 1                              # optional: rule retires after N matches
//! ```
//!
//! Rules are tried in file order and the first match wins. A prompt that
//! matches nothing is an error, never a silent default.

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tasktree_core::TemplateKind;
use thiserror::Error;

use crate::gateway::{Provider, ProviderCall, ProviderError};

pub const SCRIPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid script: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailMode {
    Transport,
    Refusal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    pub kind: TemplateKind,
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub fail: Option<FailMode>,
    #[serde(default)]
    pub times: Option<u32>,
}

impl ScriptRule {
    fn matches(&self, call: &ProviderCall<'_>) -> bool {
        self.kind == call.kind && self.contains.iter().all(|s| call.prompt.contains(s.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub version: u32,
    #[serde(default, rename = "rule")]
    pub rules: Vec<ScriptRule>,
}

impl ScenarioScript {
    pub fn from_toml(text: &str) -> Result<Self, ScriptError> {
        let script: ScenarioScript =
            toml::from_str(text).map_err(|e| ScriptError::Invalid(e.to_string()))?;
        if script.version != SCRIPT_VERSION {
            return Err(ScriptError::Invalid(format!(
                "unsupported script version {} (expected {SCRIPT_VERSION})",
                script.version
            )));
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }
}

/// One prompt the provider received.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Captured {
    pub kind: TemplateKind,
    pub prompt: String,
    /// Index of the rule that answered, if any.
    pub rule: Option<usize>,
}

pub struct ScriptedProvider {
    script: ScenarioScript,
    uses: Mutex<Vec<u32>>,
    transcript: Mutex<Vec<Captured>>,
}

impl ScriptedProvider {
    pub fn new(script: ScenarioScript) -> Self {
        let uses = Mutex::new(vec![0; script.rules.len()]);
        Self {
            script,
            uses,
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        ScenarioScript::load(path).map(Self::new)
    }

    pub fn script(&self) -> &ScenarioScript {
        &self.script
    }

    pub fn transcript(&self) -> Vec<Captured> {
        self.transcript.lock().expect("transcript lock poisoned").clone()
    }

    pub fn transcript_len(&self) -> usize {
        self.transcript.lock().expect("transcript lock poisoned").len()
    }

    fn pick(&self, call: &ProviderCall<'_>) -> Option<(usize, ScriptRule)> {
        let mut uses = self.uses.lock().expect("rule counter lock poisoned");
        let (i, rule) = self.script.rules.iter().enumerate().find(|(i, rule)| {
            rule.matches(call) && rule.times.is_none_or(|limit| uses[*i] < limit)
        })?;
        uses[i] += 1;
        Some((i, rule.clone()))
    }
}

#[async_trait]
impl Provider for ScriptedProvider {
    fn id(&self) -> &str {
        "scripted"
    }

    async fn complete(&self, call: ProviderCall<'_>) -> Result<String, ProviderError> {
        let picked = self.pick(&call);
        self.transcript
            .lock()
            .expect("transcript lock poisoned")
            .push(Captured {
                kind: call.kind,
                prompt: call.prompt.to_string(),
                rule: picked.as_ref().map(|(i, _)| *i),
            });
        let (_, rule) = picked.ok_or(ProviderError::NoScriptMatch { kind: call.kind })?;
        if rule.latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(rule.latency_ms)).await;
        }
        match rule.fail {
            None => Ok(rule.response),
            Some(FailMode::Transport) => Err(ProviderError::Transport(
                "scripted transport failure".to_string(),
            )),
            Some(FailMode::Refusal) => Err(ProviderError::Refusal {
                status: 400,
                message: if rule.response.is_empty() {
                    "scripted refusal".to_string()
                } else {
                    rule.response
                },
            }),
        }
    }
}
