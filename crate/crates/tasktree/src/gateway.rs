//! Provider-agnostic completion gateway.
//!
//! A [`Provider`] turns one prompt into one raw text reply. The [`Gateway`]
//! wraps any provider with request validation, an overall deadline,
//! retry with exponential backoff on transport failures, and a cap on
//! in-flight requests.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use tasktree_core::TemplateKind;
use thiserror::Error;
use tokio::sync::Semaphore;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const MAX_ATTEMPTS_LIMIT: u32 = 5;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const DEFAULT_BACKOFF: Duration = Duration::from_millis(200);

/// Sampling temperature used when the caller does not pick one.
pub fn default_temperature(kind: TemplateKind) -> f32 {
    match kind {
        TemplateKind::Decompose => 0.2,
        TemplateKind::Options => 0.7,
        TemplateKind::Summarize => 0.3,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProviderCall<'a> {
    pub kind: TemplateKind,
    pub prompt: &'a str,
    pub temperature: f32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider refused with status {status}: {message}")]
    Refusal { status: u16, message: String },
    #[error("no script rule matches this {kind} prompt")]
    NoScriptMatch { kind: TemplateKind },
}

#[async_trait]
pub trait Provider: Send + Sync {
    fn id(&self) -> &str;

    async fn complete(&self, call: ProviderCall<'_>) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone)]
pub struct GatewayRequest {
    pub prompt: String,
    pub kind: TemplateKind,
    pub temperature: f32,
    pub timeout: Duration,
    pub max_attempts: u32,
}

impl GatewayRequest {
    pub fn new(kind: TemplateKind, prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            kind,
            temperature: default_temperature(kind),
            timeout: DEFAULT_TIMEOUT,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_max_attempts(mut self, attempts: u32) -> Self {
        self.max_attempts = attempts;
        self
    }

    pub fn with_temperature(mut self, temperature: f32) -> Self {
        self.temperature = temperature;
        self
    }

    fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |msg: &str| Err(GatewayError::InvalidRequest(msg.to_string()));
        if self.prompt.is_empty() {
            return invalid("prompt is empty");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return invalid("temperature must be within [0, 2]");
        }
        if self.timeout.is_zero() {
            return invalid("timeout must be positive");
        }
        if self.max_attempts == 0 || self.max_attempts > MAX_ATTEMPTS_LIMIT {
            return invalid("max_attempts must be between 1 and 5");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GatewayResponse {
    pub raw_text: String,
    /// Wall time from the first attempt to the reply.
    pub latency: Duration,
    /// 1-based number of the attempt that succeeded.
    pub attempt: u32,
    pub attempt_latencies: Vec<Duration>,
    pub provider_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider refused with status {status}: {message}")]
    ProviderRefusal { status: u16, message: String },
    #[error("no script rule matches this {kind} prompt")]
    NoScriptMatch { kind: TemplateKind },
}

pub struct Gateway {
    provider: Arc<dyn Provider>,
    permits: Semaphore,
    backoff: Duration,
    requests: AtomicU64,
    attempts: AtomicU64,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self {
            provider,
            permits: Semaphore::new(DEFAULT_MAX_IN_FLIGHT),
            backoff: DEFAULT_BACKOFF,
            requests: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
        }
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.permits = Semaphore::new(n.max(1));
        self
    }

    /// Delay before the second attempt; doubles for each later one.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    /// Number of `complete` calls that reached the provider.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    /// Number of provider attempts, retries included.
    pub fn attempt_count(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    pub async fn complete(&self, req: GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        req.validate()?;
        let _permit = self
            .permits
            .acquire()
            .await
            .expect("gateway semaphore is never closed");
        self.requests.fetch_add(1, Ordering::SeqCst);
        match tokio::time::timeout(req.timeout, self.attempt_loop(&req)).await {
            Ok(result) => result,
            Err(_) => {
                tracing::warn!(kind = %req.kind, timeout = ?req.timeout, "gateway request timed out");
                Err(GatewayError::Timeout(req.timeout))
            }
        }
    }

    async fn attempt_loop(&self, req: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        let started = Instant::now();
        let mut latencies = Vec::with_capacity(req.max_attempts as usize);
        let call = ProviderCall {
            kind: req.kind,
            prompt: &req.prompt,
            temperature: req.temperature,
        };
        for attempt in 1..=req.max_attempts {
            let t0 = Instant::now();
            self.attempts.fetch_add(1, Ordering::SeqCst);
            let outcome = self.provider.complete(call).await;
            latencies.push(t0.elapsed());
            match outcome {
                Ok(raw_text) => {
                    tracing::debug!(kind = %req.kind, attempt, latency = ?t0.elapsed(), "completion ok");
                    return Ok(GatewayResponse {
                        raw_text,
                        latency: started.elapsed(),
                        attempt,
                        attempt_latencies: latencies,
                        provider_id: self.provider.id().to_string(),
                    });
                }
                Err(ProviderError::Transport(message)) => {
                    tracing::warn!(kind = %req.kind, attempt, %message, "transport failure");
                    if attempt == req.max_attempts {
                        return Err(GatewayError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    tokio::time::sleep(self.backoff * 2u32.pow(attempt - 1)).await;
                }
                Err(ProviderError::Refusal { status, message }) => {
                    return Err(GatewayError::ProviderRefusal { status, message })
                }
                Err(ProviderError::NoScriptMatch { kind }) => {
                    return Err(GatewayError::NoScriptMatch { kind })
                }
            }
        }
        unreachable!("max_attempts validated to be >= 1")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    /// Fails with a transport error `failures` times, then echoes.
    struct Flaky {
        failures: u32,
        seen: AtomicU32,
    }

    #[async_trait]
    impl Provider for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }

        async fn complete(&self, call: ProviderCall<'_>) -> Result<String, ProviderError> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(ProviderError::Transport("connection reset".into()))
            } else {
                Ok(call.prompt.to_string())
            }
        }
    }

    fn flaky(failures: u32) -> Gateway {
        Gateway::new(Arc::new(Flaky {
            failures,
            seen: AtomicU32::new(0),
        }))
        .with_backoff(Duration::from_millis(1))
    }

    #[tokio::test]
    async fn retry_accounting() {
        for failures in 0..3 {
            let gw = flaky(failures);
            let resp = gw
                .complete(GatewayRequest::new(TemplateKind::Summarize, "p"))
                .await
                .unwrap();
            assert_eq!(resp.attempt, failures + 1);
            assert_eq!(resp.attempt_latencies.len() as u32, failures + 1);
            assert_eq!(gw.attempt_count(), u64::from(failures) + 1);
            assert_eq!(resp.raw_text, "p");
        }
    }

    #[tokio::test]
    async fn retries_exhausted() {
        let gw = flaky(10);
        let err = gw
            .complete(GatewayRequest::new(TemplateKind::Options, "p").with_max_attempts(3))
            .await
            .unwrap_err();
        assert_eq!(
            err,
            GatewayError::Transport {
                attempts: 3,
                message: "connection reset".into()
            }
        );
        assert_eq!(gw.attempt_count(), 3);
    }

    #[tokio::test]
    async fn request_validation() {
        let gw = flaky(0);
        let bad = [
            GatewayRequest::new(TemplateKind::Decompose, ""),
            GatewayRequest::new(TemplateKind::Decompose, "p").with_max_attempts(0),
            GatewayRequest::new(TemplateKind::Decompose, "p").with_max_attempts(6),
            GatewayRequest::new(TemplateKind::Decompose, "p").with_timeout(Duration::ZERO),
            GatewayRequest::new(TemplateKind::Decompose, "p").with_temperature(2.5),
        ];
        for req in bad {
            assert!(matches!(gw.complete(req).await, Err(GatewayError::InvalidRequest(_))));
        }
        assert_eq!(gw.request_count(), 0);
    }

    #[test]
    fn temperatures() {
        assert_eq!(default_temperature(TemplateKind::Decompose), 0.2);
        assert_eq!(default_temperature(TemplateKind::Options), 0.7);
        assert_eq!(default_temperature(TemplateKind::Summarize), 0.3);
    }
}
