//! Provider for chat-completions style HTTP endpoints.

use async_trait::async_trait;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};
use serde_json::{json, Value};

use crate::gateway::{Provider, ProviderCall, ProviderError};

pub struct HttpProvider {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    token: String,
}

impl HttpProvider {
    /// `base_url` is the API root; requests go to `{base_url}/chat/completions`.
    pub fn new(base_url: &str, model: impl Into<String>, token: impl Into<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            token: token.into(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    fn body(&self, call: &ProviderCall<'_>) -> Value {
        json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": call.prompt }],
            "temperature": call.temperature,
        })
    }
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v["error"]["message"].as_str().map(str::to_string))
        .unwrap_or_else(|| body.chars().take(500).collect())
}

#[async_trait]
impl Provider for HttpProvider {
    fn id(&self) -> &str {
        "http"
    }

    async fn complete(&self, call: ProviderCall<'_>) -> Result<String, ProviderError> {
        let payload = serde_json::to_vec(&self.body(&call))
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let resp = self
            .client
            .post(&self.endpoint)
            .header(AUTHORIZATION, format!("Bearer {}", self.token))
            .header(CONTENT_TYPE, "application/json")
            .body(payload)
            .send()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Refusal {
                status: status.as_u16(),
                message: error_message(&text),
            });
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Transport(format!("malformed response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Transport("response has no choices[0].message.content".into()))
    }
}
