//! JSON wire types of the gateway HTTP API, shared by server and client.

use serde::{Deserialize, Serialize};

use crate::quality::FeatureVector;
use crate::regressor::EvalReport;

pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Summarize,
    Translate {
        target_language: String,
    },
    /// `template` must contain `{text}`, replaced by the prompt.
    Custom {
        template: String,
    },
}

impl Task {
    pub fn kind(&self) -> &'static str {
        match self {
            Task::Summarize => "summarize",
            Task::Translate { .. } => "translate",
            Task::Custom { .. } => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub prompt: String,
    pub task: Task,
    pub epsilon: f64,
    /// Falls back to the server default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_threshold: Option<f64>,
    #[serde(default)]
    pub correct_prompts: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

impl TaskRequest {
    pub fn new(prompt: impl Into<String>, task: Task, epsilon: f64) -> Self {
        Self {
            prompt: prompt.into(),
            task,
            epsilon,
            quality_threshold: None,
            correct_prompts: false,
            metadata: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.prompt.trim().is_empty() {
            return Err("prompt is empty".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(format!("epsilon must be positive and finite, got {}", self.epsilon));
        }
        if let Some(t) = self.quality_threshold {
            if !(-1.0..=1.0).contains(&t) {
                return Err(format!("quality_threshold must lie in [-1, 1], got {t}"));
            }
        }
        match &self.task {
            Task::Translate { target_language } if target_language.trim().is_empty() => {
                Err("target_language is empty".into())
            }
            Task::Custom { template } if !template.contains("{text}") => {
                Err("custom template must contain {text}".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Forward,
    Abort,
}

/// Forward exactly when the predicted utility reaches the threshold.
pub fn decide(predicted_e: f64, threshold: f64) -> Decision {
    if predicted_e >= threshold {
        Decision::Forward
    } else {
        Decision::Abort
    }
}

/// Steps up to the prediction, without calling the LLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessResponse {
    pub predicted_e: f64,
    pub quality_threshold: f64,
    pub would_forward: bool,
    pub features: FeatureVector,
    pub sanitized_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_prompt: Option<String>,
    pub slm_result: String,
    pub slm_result_sanitized: String,
    pub cache_hit: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub decision: Decision,
    pub predicted_e: f64,
    pub quality_threshold: f64,
    pub features: FeatureVector,
    /// The stored sanitization of the prompt.
    pub sanitized_prompt: String,
    /// Text actually sent downstream when correction ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_prompt: Option<String>,
    pub slm_result: String,
    pub slm_result_sanitized: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_result: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realized_e: Option<f64>,
    pub cache_hit: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl GateDecision {
    /// What the caller should use: the LLM answer when present, else the
    /// local SLM result.
    pub fn answer(&self) -> &str {
        self.llm_result.as_deref().unwrap_or(&self.slm_result)
    }
}

/// Error body. `fallback` carries the decision when the LLM failed after a
/// forward verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<GateDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub embedding_model: String,
    pub vocab_size: usize,
    pub regressor_trees: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainResponse {
    pub rows: usize,
    pub report: EvalReport,
}
