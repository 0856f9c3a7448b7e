//! Offline stand-ins for the SLM, LLM and embedding endpoints, in-process or
//! over HTTP.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use dxgate_core::quality::{MockProvider, TextEmbeddingProvider};

use crate::chat::{ChatBackend, ChatChoice, ChatMessage, ChatRequest, ChatResponse};
use crate::error::ChatError;
use crate::provider::{EmbedRequest, EmbedResponse};

type Reply = dyn Fn(&str) -> Result<String, String> + Send + Sync;

/// Chat backend answering with a closure and recording every message.
pub struct MockChat {
    name: String,
    reply: Box<Reply>,
    calls: Mutex<Vec<String>>,
}

impl MockChat {
    pub fn new(name: &str, reply: impl Fn(&str) -> Result<String, String> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            reply: Box::new(reply),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Replies with the text after the last blank line of the message,
    /// i.e. the payload of the default templates.
    pub fn echo(name: &str) -> Self {
        Self::new(name, |m| Ok(payload(m).to_string()))
    }

    pub fn failing(name: &str) -> Self {
        Self::new(name, |_| Err("unavailable".into()))
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("calls lock").len()
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().expect("calls lock").clone()
    }
}

/// Text after the last blank line.
pub fn payload(message: &str) -> &str {
    message.rsplit("\n\n").next().unwrap_or(message)
}

#[async_trait]
impl ChatBackend for MockChat {
    fn name(&self) -> &str {
        &self.name
    }

    async fn complete(&self, message: &str, _max_tokens: Option<u32>) -> Result<String, ChatError> {
        self.calls.lock().expect("calls lock").push(message.to_string());
        (self.reply)(message).map_err(|message| ChatError::Status {
            endpoint: self.name.clone(),
            status: 503,
            body: message,
        })
    }
}

/// A chat-completions server over a [`MockChat`].
pub struct MockChatServer {
    pub addr: SocketAddr,
    pub chat: Arc<MockChat>,
    pub requests: Arc<Mutex<Vec<ChatRequest>>>,
}

impl MockChatServer {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

#[derive(Clone)]
struct ChatState {
    chat: Arc<MockChat>,
    requests: Arc<Mutex<Vec<ChatRequest>>>,
}

async fn chat_handler(
    State(st): State<ChatState>,
    Json(req): Json<ChatRequest>,
) -> Result<Json<ChatResponse>, (StatusCode, String)> {
    st.requests.lock().expect("requests lock").push(req.clone());
    let msg = req.messages.last().map(|m| m.content.clone()).unwrap_or_default();
    match st.chat.complete(&msg, req.max_tokens).await {
        Ok(content) => Ok(Json(ChatResponse {
            choices: vec![ChatChoice {
                message: ChatMessage {
                    role: "assistant".into(),
                    content,
                },
            }],
        })),
        Err(e) => Err((StatusCode::SERVICE_UNAVAILABLE, e.to_string())),
    }
}

pub async fn spawn_chat_server(chat: MockChat) -> std::io::Result<MockChatServer> {
    let chat = Arc::new(chat);
    let requests = Arc::new(Mutex::new(Vec::new()));
    let app = Router::new()
        .route("/v1/chat/completions", post(chat_handler))
        .with_state(ChatState {
            chat: chat.clone(),
            requests: requests.clone(),
        });
    let addr = spawn(app).await?;
    Ok(MockChatServer { addr, chat, requests })
}

#[derive(Clone)]
struct EmbedState {
    provider: Arc<MockProvider>,
    calls: Arc<AtomicUsize>,
}

pub struct MockEmbeddingServer {
    pub addr: SocketAddr,
    pub calls: Arc<AtomicUsize>,
}

impl MockEmbeddingServer {
    pub fn url(&self) -> String {
        format!("http://{}/embeddings", self.addr)
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

async fn embed_handler(State(st): State<EmbedState>, Json(req): Json<EmbedRequest>) -> Json<EmbedResponse> {
    st.calls.fetch_add(1, Ordering::SeqCst);
    let embeddings = st
        .provider
        .embed(&req.input)
        .await
        .expect("mock provider is infallible");
    Json(EmbedResponse { embeddings })
}

pub async fn spawn_embedding_server(provider: MockProvider) -> std::io::Result<MockEmbeddingServer> {
    let calls = Arc::new(AtomicUsize::new(0));
    let app = Router::new()
        .route("/embeddings", post(embed_handler))
        .with_state(EmbedState {
            provider: Arc::new(provider),
            calls: calls.clone(),
        });
    let addr = spawn(app).await?;
    Ok(MockEmbeddingServer { addr, calls })
}

async fn spawn(app: Router) -> std::io::Result<SocketAddr> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Ok(addr)
}
