use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Json, State};
use axum::routing::{get, post};
use axum::Router;
use dxgate_core::api::{AssessResponse, GateDecision, Health, RetrainResponse, TaskRequest};
use dxgate_core::regressor::Hyperparams;
use serde::Deserialize;
use tracing::info;

use crate::error::GatewayError;
use crate::service::Gateway;

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/assess", post(assess))
        .route("/v1/complete", post(complete))
        .route("/v1/retrain", post(retrain))
        .with_state(gw)
}

async fn healthz(State(gw): State<Arc<Gateway>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        embedding_model: gw.model().name().to_string(),
        vocab_size: gw.model().len(),
        regressor_trees: gw.regressor().tree_count(),
    })
}

async fn assess(
    State(gw): State<Arc<Gateway>>,
    Json(req): Json<TaskRequest>,
) -> Result<Json<AssessResponse>, GatewayError> {
    gw.assess(&req).await.map(Json)
}

async fn complete(
    State(gw): State<Arc<Gateway>>,
    Json(req): Json<TaskRequest>,
) -> Result<Json<GateDecision>, GatewayError> {
    gw.handle_request(&req).await.map(Json)
}

#[derive(Debug, Default, Deserialize)]
struct RetrainRequest {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    hyperparams: Option<Hyperparams>,
}

async fn retrain(
    State(gw): State<Arc<Gateway>>,
    body: Option<Json<RetrainRequest>>,
) -> Result<Json<RetrainResponse>, GatewayError> {
    let req = body.map(|b| b.0).unwrap_or_default();
    gw.retrain(req.hyperparams.unwrap_or_default(), req.seed)
        .await
        .map(Json)
}

/// Serves until ctrl-c.
pub async fn serve(gw: Arc<Gateway>, addr: &str) -> Result<(), GatewayError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| GatewayError::Startup(format!("bind {addr}: {e}")))?;
    let local: SocketAddr = listener
        .local_addr()
        .map_err(|e| GatewayError::Startup(e.to_string()))?;
    info!(%local, "gateway listening");
    serve_on(listener, gw)
        .await
        .map_err(|e| GatewayError::Internal(e.to_string()))
}

/// Serves on an already bound listener until ctrl-c.
pub async fn serve_on(listener: tokio::net::TcpListener, gw: Arc<Gateway>) -> std::io::Result<()> {
    axum::serve(listener, router(gw))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
