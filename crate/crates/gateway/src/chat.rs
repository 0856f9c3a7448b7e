//! Chat-completions client (`POST {base}/v1/chat/completions`).

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::config::{secret_from_env, ChatEndpointConfig};
use crate::error::{ChatError, ConfigError};

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Sends one user message; returns the assistant text.
    async fn complete(&self, message: &str, max_tokens: Option<u32>) -> Result<String, ChatError>;
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
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: ChatMessage,
}

pub struct HttpChatClient {
    http: reqwest::Client,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpChatClient {
    pub fn new(cfg: &ChatEndpointConfig) -> Result<Self, ConfigError> {
        let api_key = secret_from_env(cfg.api_key_env.as_deref())?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ConfigError::Invalid(format!("http client: {e}")))?;
        Ok(Self {
            http,
            url: format!("{}/v1/chat/completions", cfg.base_url.trim_end_matches('/')),
            model: cfg.model.clone(),
            api_key,
        })
    }
}

#[async_trait]
impl ChatBackend for HttpChatClient {
    fn name(&self) -> &str {
        &self.model
    }

    async fn complete(&self, message: &str, max_tokens: Option<u32>) -> Result<String, ChatError> {
        let body = ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: message.to_string(),
            }],
            max_tokens,
        };
        let mut req = self.http.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| ChatError::Transport {
            endpoint: self.url.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(ChatError::Status {
                endpoint: self.url.clone(),
                status: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        let parsed: ChatResponse = resp.json().await.map_err(|e| ChatError::Protocol {
            endpoint: self.url.clone(),
            message: e.to_string(),
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ChatError::Protocol {
                endpoint: self.url.clone(),
                message: "no choices".into(),
            })
    }
}
