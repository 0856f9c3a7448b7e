use std::path::{Path, PathBuf};

use dxgate_core::ann::AnnParams;
use dxgate_core::api::DEFAULT_QUALITY_THRESHOLD;
use dxgate_core::mechanism::{NnBackend, OovPolicy, Variant, DEFAULT_TAIL_MASS};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Binary or GloVe-text embedding model.
    pub embedding_model: PathBuf,
    #[serde(default)]
    pub sanitization: SanitizationDefaults,
    pub slm: ChatEndpointConfig,
    pub llm: ChatEndpointConfig,
    pub text_embeddings: ProviderConfig,
    /// Trained regressor; without one every prompt gets
    /// `cold_start_prediction`.
    #[serde(default)]
    pub regressor_model: Option<PathBuf>,
    #[serde(default = "default_cold_start")]
    pub cold_start_prediction: f64,
    #[serde(default = "default_threshold")]
    pub quality_threshold: f64,
    pub cache_path: PathBuf,
    pub training_log_path: PathBuf,
    #[serde(default = "default_correction_template")]
    pub correction_template: String,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_cold_start() -> f64 {
    1.0
}

fn default_threshold() -> f64 {
    DEFAULT_QUALITY_THRESHOLD
}

pub const DEFAULT_CORRECTION_TEMPLATE: &str =
    "Correct the following text for coherence and grammar. Reply with the corrected text only.\n\n{text}";

fn default_correction_template() -> String {
    DEFAULT_CORRECTION_TEMPLATE.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SanitizationDefaults {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_backend")]
    pub backend: NnBackend,
    #[serde(default = "default_oov")]
    pub oov_policy: OovPolicy,
    #[serde(default = "default_tail")]
    pub tail_mass_delta: f64,
    /// Root seed for sanitization streams; random per process when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub ann: Option<AnnParams>,
}

fn default_variant() -> Variant {
    Variant::NearestToken
}

fn default_backend() -> NnBackend {
    NnBackend::Exact
}

fn default_oov() -> OovPolicy {
    OovPolicy::PassthroughFlagged
}

fn default_tail() -> f64 {
    DEFAULT_TAIL_MASS
}

impl Default for SanitizationDefaults {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            backend: default_backend(),
            oov_policy: default_oov(),
            tail_mass_delta: default_tail(),
            seed: None,
            ann: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatEndpointConfig {
    /// Root URL; `/v1/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub templates: TaskTemplates,
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTemplates {
    #[serde(default = "default_summarize")]
    pub summarize: String,
    #[serde(default = "default_summary_tokens")]
    pub summarize_max_tokens: u32,
    #[serde(default = "default_translate")]
    pub translate: String,
    /// Output cap relative to the input length.
    #[serde(default = "default_translate_factor")]
    pub translate_length_factor: f64,
}

pub const DEFAULT_SUMMARIZE_TEMPLATE: &str =
    "Summarize the following text. Limit your answer to {max_tokens} tokens.\n\n{text}";
pub const DEFAULT_TRANSLATE_TEMPLATE: &str =
    "Translate the following text into {language}. Your answer must be at most 30% longer than the input.\n\n{text}";

fn default_summarize() -> String {
    DEFAULT_SUMMARIZE_TEMPLATE.into()
}

fn default_summary_tokens() -> u32 {
    142
}

fn default_translate() -> String {
    DEFAULT_TRANSLATE_TEMPLATE.into()
}

fn default_translate_factor() -> f64 {
    1.3
}

impl Default for TaskTemplates {
    fn default() -> Self {
        Self {
            summarize: default_summarize(),
            summarize_max_tokens: default_summary_tokens(),
            translate: default_translate(),
            translate_length_factor: default_translate_factor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Mock {
        #[serde(default = "default_mock_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_true")]
        semantic: bool,
    },
    Http {
        /// Full URL of the embeddings endpoint.
        url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
    File {
        path: PathBuf,
    },
}

fn default_mock_dim() -> usize {
    256
}

fn default_true() -> bool {
    true
}

fn default_in_flight() -> usize {
    4
}

impl GatewayConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(path.to_path_buf(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.slm.base_url == self.llm.base_url && self.slm.model == self.llm.model {
            return bad("slm and llm must be distinct endpoints".into());
        }
        if !(-1.0..=1.0).contains(&self.quality_threshold) {
            return bad(format!("quality_threshold {} outside [-1, 1]", self.quality_threshold));
        }
        if !(-1.0..=1.0).contains(&self.cold_start_prediction) {
            return bad(format!(
                "cold_start_prediction {} outside [-1, 1]",
                self.cold_start_prediction
            ));
        }
        if !self.correction_template.contains("{text}") {
            return bad("correction_template must contain {text}".into());
        }
        for ep in [&self.slm, &self.llm] {
            if !ep.templates.summarize.contains("{text}") || !ep.templates.translate.contains("{text}") {
                return bad(format!("templates of {} must contain {{text}}", ep.model));
            }
            if ep.templates.translate_length_factor.is_nan() || ep.templates.translate_length_factor <= 0.0 {
                return bad("translate_length_factor must be positive".into());
            }
        }
        if self.sanitization.backend == NnBackend::Approximate && self.sanitization.ann.is_none() {
            tracing::info!("approximate backend without ann params: using defaults");
        }
        if let ProviderConfig::Http { max_in_flight: 0, .. } = self.text_embeddings {
            return bad("max_in_flight must be >= 1".into());
        }
        Ok(())
    }
}

/// Reads a secret from the environment variable named in the config.
pub fn secret_from_env(var: Option<&str>) -> Result<Option<String>, ConfigError> {
    match var {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| ConfigError::MissingSecret(name.to_string())),
    }
}
