//! HTTP client for the dxgate gateway.

use std::time::Duration;

use dxgate_core::api::{AssessResponse, ErrorBody, GateDecision, Health, RetrainResponse, TaskRequest};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("gateway answered HTTP {status}: {}", body.error)]
    Api { status: u16, body: Box<ErrorBody> },
    #[error("gateway answered HTTP {status} with an unreadable body: {text}")]
    Unreadable { status: u16, text: String },
}

impl ClientError {
    /// Decision carried by an LLM failure after a forward verdict.
    pub fn fallback(&self) -> Option<&GateDecision> {
        match self {
            ClientError::Api { body, .. } => body.fallback.as_ref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatewayClient {
    http: reqwest::Client,
    base: String,
}

impl GatewayClient {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        Self::with_timeout(base_url, Duration::from_secs(600))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<Self, ClientError> {
        Ok(Self {
            http: reqwest::Client::builder().timeout(timeout).build()?,
            base: base_url.trim_end_matches('/').to_string(),
        })
    }

    pub async fn healthz(&self) -> Result<Health, ClientError> {
        let resp = self.http.get(format!("{}/healthz", self.base)).send().await?;
        decode(resp).await
    }

    pub async fn assess(&self, req: &TaskRequest) -> Result<AssessResponse, ClientError> {
        self.post("/v1/assess", req).await
    }

    pub async fn complete(&self, req: &TaskRequest) -> Result<GateDecision, ClientError> {
        self.post("/v1/complete", req).await
    }

    pub async fn retrain(&self, seed: u64) -> Result<RetrainResponse, ClientError> {
        self.post("/v1/retrain", &serde_json::json!({ "seed": seed })).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        decode(resp).await
    }
}

async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
    let status = resp.status().as_u16();
    let text = resp.text().await?;
    if (200..300).contains(&status) {
        return serde_json::from_str(&text).map_err(|_| ClientError::Unreadable { status, text });
    }
    match serde_json::from_str::<ErrorBody>(&text) {
        Ok(body) => Err(ClientError::Api {
            status,
            body: Box::new(body),
        }),
        Err(_) => Err(ClientError::Unreadable { status, text }),
    }
}
