//! Provider selection from flags / environment.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, ValueEnum};
use thiserror::Error;

use crate::gateway::{Gateway, Provider, DEFAULT_MAX_ATTEMPTS, DEFAULT_MAX_IN_FLIGHT};
use crate::http_provider::HttpProvider;
use crate::scripted::ScriptedProvider;

#[derive(Debug, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigInvalid(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, Args)]
pub struct ProviderConfig {
    /// Which provider answers prompts.
    #[arg(long = "provider", env = "TASKTREE_PROVIDER", value_enum)]
    pub kind: Option<ProviderKind>,

    /// API root of a chat-completions endpoint (http provider).
    #[arg(long, env = "TASKTREE_BASE_URL")]
    pub base_url: Option<String>,

    #[arg(long, env = "TASKTREE_MODEL", default_value = "gpt-4")]
    pub model: String,

    /// Bearer token (http provider).
    #[arg(long, env = "TASKTREE_API_KEY", hide_env_values = true)]
    pub api_key: Option<String>,

    /// Scenario script file (scripted provider).
    #[arg(long, env = "TASKTREE_SCRIPT")]
    pub script: Option<PathBuf>,

    /// Overall deadline per model call, in milliseconds.
    #[arg(long, env = "TASKTREE_TIMEOUT_MS", default_value_t = 60_000)]
    pub timeout_ms: u64,

    #[arg(long, env = "TASKTREE_MAX_ATTEMPTS", default_value_t = DEFAULT_MAX_ATTEMPTS)]
    pub max_attempts: u32,

    #[arg(long, env = "TASKTREE_MAX_IN_FLIGHT", default_value_t = DEFAULT_MAX_IN_FLIGHT)]
    pub max_in_flight: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: None,
            base_url: None,
            model: "gpt-4".to_string(),
            api_key: None,
            script: None,
            timeout_ms: 60_000,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

impl ProviderConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

pub enum ProviderHandle {
    Http(Arc<HttpProvider>),
    Scripted(Arc<ScriptedProvider>),
}

impl ProviderHandle {
    pub fn provider(&self) -> Arc<dyn Provider> {
        match self {
            ProviderHandle::Http(p) => p.clone(),
            ProviderHandle::Scripted(p) => p.clone(),
        }
    }

    pub fn scripted(&self) -> Option<&Arc<ScriptedProvider>> {
        match self {
            ProviderHandle::Scripted(p) => Some(p),
            ProviderHandle::Http(_) => None,
        }
    }

    pub fn gateway(&self, config: &ProviderConfig) -> Gateway {
        Gateway::new(self.provider()).with_max_in_flight(config.max_in_flight)
    }
}

fn present(v: &Option<String>) -> Option<&str> {
    v.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

pub fn provider_from_config(config: &ProviderConfig) -> Result<ProviderHandle, ConfigInvalid> {
    if config.timeout_ms == 0 {
        return Err(ConfigInvalid("timeout must be positive".into()));
    }
    if config.max_attempts == 0 || config.max_attempts > crate::gateway::MAX_ATTEMPTS_LIMIT {
        return Err(ConfigInvalid("max attempts must be between 1 and 5".into()));
    }
    match config.kind {
        None => Err(ConfigInvalid(
            "no provider configured (set --provider or TASKTREE_PROVIDER)".into(),
        )),
        Some(ProviderKind::Http) => {
            let base = present(&config.base_url)
                .ok_or_else(|| ConfigInvalid("http provider needs a base URL".into()))?;
            let token = present(&config.api_key)
                .ok_or_else(|| ConfigInvalid("http provider needs an auth token (TASKTREE_API_KEY)".into()))?;
            if config.model.trim().is_empty() {
                return Err(ConfigInvalid("http provider needs a model name".into()));
            }
            Ok(ProviderHandle::Http(Arc::new(HttpProvider::new(
                base,
                config.model.trim(),
                token,
            ))))
        }
        Some(ProviderKind::Scripted) => {
            let path = config
                .script
                .as_ref()
                .ok_or_else(|| ConfigInvalid("scripted provider needs a script path".into()))?;
            ScriptedProvider::load(path)
                .map(|p| ProviderHandle::Scripted(Arc::new(p)))
                .map_err(|e| ConfigInvalid(e.to_string()))
        }
    }
}
