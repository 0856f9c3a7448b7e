//! Utility-gating middleware: sanitizes prompts with the dx-privacy
//! mechanism, estimates the LLM's utility on the sanitized prompt from a
//! local SLM's results and forwards only promising prompts.

pub mod chat;
pub mod config;
pub mod error;
pub mod http;
pub mod mock;
pub mod provider;
pub mod service;
pub mod store;
pub mod tasks;

pub use config::GatewayConfig;
pub use error::GatewayError;
pub use service::{Gateway, Parts, Settings};
