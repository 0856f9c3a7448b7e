use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dxgate_core::api::{ErrorBody, GateDecision};
use dxgate_core::mechanism::MechanismError;
use dxgate_core::quality::QualityError;
use dxgate_core::regressor::RegressorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Read(PathBuf, #[source] std::io::Error),
    #[error("cannot parse config {0}: {1}")]
    Parse(PathBuf, #[source] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment variable {0} is not set")]
    MissingSecret(String),
}

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("request to {endpoint} failed: {message}")]
    Transport { endpoint: String, message: String },
    #[error("{endpoint} answered HTTP {status}: {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("{endpoint} returned an unusable body: {message}")]
    Protocol { endpoint: String, message: String },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sanitization failed: {0}")]
    Sanitization(#[from] MechanismError),
    #[error("SLM endpoint failed: {0}")]
    Slm(#[source] ChatError),
    #[error("LLM endpoint failed after a forward decision: {source}")]
    Llm {
        #[source]
        source: ChatError,
        fallback: Box<GateDecision>,
    },
    #[error("quality estimation failed: {0}")]
    Quality(#[from] QualityError),
    #[error("regressor: {0}")]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl GatewayError {
    pub fn status(&self) -> StatusCode {
        match self {
            GatewayError::BadRequest(_) => StatusCode::BAD_REQUEST,
            GatewayError::Sanitization(MechanismError::Oov { .. } | MechanismError::InvalidConfig(_)) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            GatewayError::Slm(_) | GatewayError::Llm { .. } => StatusCode::BAD_GATEWAY,
            GatewayError::Quality(e) if e.is_retryable() => StatusCode::SERVICE_UNAVAILABLE,
            GatewayError::Quality(QualityError::Provider { .. }) => StatusCode::BAD_GATEWAY,
            GatewayError::Regressor(RegressorError::Empty | RegressorError::TooFewRows { .. }) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let status = self.status();
        let error = self.to_string();
        let fallback = match self {
            GatewayError::Llm { fallback, .. } => Some(*fallback),
            _ => None,
        };
        (status, Json(ErrorBody { error, fallback })).into_response()
    }
}
