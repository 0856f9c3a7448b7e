//! Remote text-embedding provider: `POST {model, input: [texts]}` answered
//! with `{embeddings: [[floats]]}`.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use dxgate_core::quality::{FileProvider, MockProvider, ProviderError, TextEmbeddingProvider};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::config::{secret_from_env, ProviderConfig};
use crate::error::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub model: String,
    pub input: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embeddings: Vec<Vec<f32>>,
}

pub struct HttpEmbeddingProvider {
    http: reqwest::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    permits: Semaphore,
}

impl HttpEmbeddingProvider {
    pub fn new(
        url: &str,
        model: &str,
        api_key: Option<String>,
        max_in_flight: usize,
        timeout: Duration,
    ) -> Result<Self, ConfigError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ConfigError::Invalid(format!("http client: {e}")))?;
        Ok(Self {
            http,
            url: url.to_string(),
            model: model.to_string(),
            api_key,
            permits: Semaphore::new(max_in_flight.max(1)),
        })
    }
}

#[async_trait]
impl TextEmbeddingProvider for HttpEmbeddingProvider {
    fn name(&self) -> &str {
        &self.model
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|_| ProviderError::fatal("provider shut down"))?;
        let body = EmbedRequest {
            model: self.model.clone(),
            input: texts.to_vec(),
        };
        let mut req = self.http.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| ProviderError::retryable(format!("{}: {e}", self.url)))?;
        let status = resp.status();
        if !status.is_success() {
            let msg = format!("{} answered HTTP {}", self.url, status.as_u16());
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                ProviderError::retryable(msg)
            } else {
                ProviderError::fatal(msg)
            });
        }
        let parsed: EmbedResponse = resp
            .json()
            .await
            .map_err(|e| ProviderError::fatal(format!("{}: bad body: {e}", self.url)))?;
        if parsed.embeddings.len() != texts.len() {
            return Err(ProviderError::fatal(format!(
                "{} returned {} vectors for {} texts",
                self.url,
                parsed.embeddings.len(),
                texts.len()
            )));
        }
        Ok(parsed.embeddings)
    }
}

pub fn build_provider(cfg: &ProviderConfig) -> Result<Arc<dyn TextEmbeddingProvider>, ConfigError> {
    Ok(match cfg {
        ProviderConfig::Mock { dim, seed, semantic } => Arc::new(MockProvider::new(*dim, *seed, *semantic)),
        ProviderConfig::Http {
            url,
            model,
            api_key_env,
            max_in_flight,
            timeout_secs,
        } => Arc::new(HttpEmbeddingProvider::new(
            url,
            model,
            secret_from_env(api_key_env.as_deref())?,
            *max_in_flight,
            Duration::from_secs(*timeout_secs),
        )?),
        ProviderConfig::File { path } => {
            Arc::new(FileProvider::load(path).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?)
        }
    })
}
