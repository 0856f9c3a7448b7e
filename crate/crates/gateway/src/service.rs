//! The utility assessor: sanitize, run the SLM on both prompts, predict the
//! LLM's utility and forward or abort.

use std::sync::{Arc, RwLock};

use chrono::Utc;
use dxgate_core::ann::AnnIndex;
use dxgate_core::api::{decide, AssessResponse, Decision, GateDecision, RetrainResponse, TaskRequest};
use dxgate_core::embedding::EmbeddingModel;
use dxgate_core::mechanism::{Mechanism, NnBackend, SanitizationConfig};
use dxgate_core::quality::{FeatureExtractor, FeatureVector, TargetKind, TextEmbeddingProvider};
use dxgate_core::regressor::{self, Dataset, FeatureSet, GbdtModel, Hyperparams};
use dxgate_core::rng;
use dxgate_core::text::{tokenize_words, TokenizerOptions};
use rand::RngCore;
use tracing::{info, warn};

use crate::chat::{ChatBackend, HttpChatClient};
use crate::config::{GatewayConfig, SanitizationDefaults, TaskTemplates};
use crate::error::{ChatError, GatewayError};
use crate::provider::build_provider;
use crate::store::{cache_key, LogRecord, SanitizationCache, Sanitized, TrainingLog};
use crate::tasks;

/// Request-independent settings of a [`Gateway`].
#[derive(Debug, Clone)]
pub struct Settings {
    pub sanitization: SanitizationDefaults,
    pub sanitization_seed: u64,
    pub quality_threshold: f64,
    pub slm_templates: TaskTemplates,
    pub llm_templates: TaskTemplates,
    pub correction_template: String,
    /// Where retrained models are written, if anywhere.
    pub regressor_path: Option<std::path::PathBuf>,
}

impl Settings {
    pub fn new(sanitization_seed: u64) -> Self {
        Self {
            sanitization: SanitizationDefaults::default(),
            sanitization_seed,
            quality_threshold: dxgate_core::api::DEFAULT_QUALITY_THRESHOLD,
            slm_templates: TaskTemplates::default(),
            llm_templates: TaskTemplates::default(),
            correction_template: crate::config::DEFAULT_CORRECTION_TEMPLATE.into(),
            regressor_path: None,
        }
    }
}

/// Everything a [`Gateway`] is assembled from.
pub struct Parts {
    pub model: Arc<EmbeddingModel>,
    pub ann: Option<Arc<AnnIndex>>,
    pub regressor: GbdtModel,
    pub provider: Arc<dyn TextEmbeddingProvider>,
    pub slm: Arc<dyn ChatBackend>,
    pub llm: Arc<dyn ChatBackend>,
    pub cache: SanitizationCache,
    pub log: TrainingLog,
    pub settings: Settings,
}

pub struct Gateway {
    model: Arc<EmbeddingModel>,
    ann: Option<Arc<AnnIndex>>,
    regressor: RwLock<Arc<GbdtModel>>,
    extractor: FeatureExtractor,
    slm: Arc<dyn ChatBackend>,
    llm: Arc<dyn ChatBackend>,
    cache: SanitizationCache,
    log: TrainingLog,
    settings: Settings,
}

/// Result of steps 1-4.
struct Assessment {
    sanitized_prompt: String,
    corrected_prompt: Option<String>,
    cache_hit: bool,
    slm_result: String,
    slm_result_sanitized: String,
    features: FeatureVector,
    predicted_e: f64,
    threshold: f64,
    warnings: Vec<String>,
}

impl Assessment {
    fn downstream_prompt(&self) -> &str {
        self.corrected_prompt.as_deref().unwrap_or(&self.sanitized_prompt)
    }
}

impl Gateway {
    pub fn new(parts: Parts) -> Result<Self, GatewayError> {
        if parts.settings.sanitization.backend == NnBackend::Approximate && parts.ann.is_none() {
            return Err(GatewayError::Startup("approximate backend needs an index".into()));
        }
        if parts.regressor.feature_set() != FeatureSet::Abcd {
            return Err(GatewayError::Startup("gateway regressor must use features ABCD".into()));
        }
        Ok(Self {
            model: parts.model,
            ann: parts.ann,
            regressor: RwLock::new(Arc::new(parts.regressor)),
            extractor: FeatureExtractor::new(parts.provider),
            slm: parts.slm,
            llm: parts.llm,
            cache: parts.cache,
            log: parts.log,
            settings: parts.settings,
        })
    }

    /// Loads the embedding model, index, regressor, stores and endpoint
    /// clients named by `cfg`.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let model = Arc::new(
            EmbeddingModel::load_any(&cfg.embedding_model)
                .map_err(|e| GatewayError::Startup(format!("{}: {e}", cfg.embedding_model.display())))?,
        );
        info!(
            model = model.name(),
            vocab = model.len(),
            dim = model.dim(),
            "embedding model loaded"
        );
        let ann = if cfg.sanitization.backend == NnBackend::Approximate {
            let params = cfg.sanitization.ann.unwrap_or_default();
            let idx = AnnIndex::build(&model, params).map_err(|e| GatewayError::Startup(e.to_string()))?;
            Some(Arc::new(idx))
        } else {
            None
        };
        let regressor = match &cfg.regressor_model {
            Some(p) if p.exists() => GbdtModel::load(p)?,
            Some(p) => {
                warn!(path = %p.display(), "regressor model missing, using cold-start prediction");
                GbdtModel::constant(FeatureSet::Abcd, cfg.cold_start_prediction)
            }
            None => GbdtModel::constant(FeatureSet::Abcd, cfg.cold_start_prediction),
        };
        let seed = cfg.sanitization.seed.unwrap_or_else(|| {
            let s = rand::rng().next_u64();
            info!(seed = s, "no sanitization seed configured, drew one");
            s
        });
        let settings = Settings {
            sanitization: cfg.sanitization.clone(),
            sanitization_seed: seed,
            quality_threshold: cfg.quality_threshold,
            slm_templates: cfg.slm.templates.clone(),
            llm_templates: cfg.llm.templates.clone(),
            correction_template: cfg.correction_template.clone(),
            regressor_path: cfg.regressor_model.clone(),
        };
        Self::new(Parts {
            model,
            ann,
            regressor,
            provider: build_provider(&cfg.text_embeddings)?,
            slm: Arc::new(HttpChatClient::new(&cfg.slm)?),
            llm: Arc::new(HttpChatClient::new(&cfg.llm)?),
            cache: SanitizationCache::open(&cfg.cache_path)?,
            log: TrainingLog::open(&cfg.training_log_path)?,
            settings,
        })
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.model
    }

    pub fn cache(&self) -> &SanitizationCache {
        &self.cache
    }

    pub fn training_log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn regressor(&self) -> Arc<GbdtModel> {
        self.regressor.read().expect("regressor lock").clone()
    }

    pub fn set_regressor(&self, model: GbdtModel) {
        *self.regressor.write().expect("regressor lock") = Arc::new(model);
    }

    /// Step 1: the stored sanitization of the prompt, computed on a miss.
    /// Runs before any network call.
    async fn sanitize(&self, prompt: &str, epsilon: f64) -> Result<(String, bool), GatewayError> {
        let s = &self.settings.sanitization;
        let key = cache_key(prompt, epsilon, self.model.name(), s.variant);
        let mut cfg = SanitizationConfig::new(epsilon, s.variant, s.backend, 0);
        cfg.oov_policy = s.oov_policy;
        cfg.tail_mass_delta = s.tail_mass_delta;
        cfg.validate()?;
        cfg.rng_seed = rng::keyed(
            self.settings.sanitization_seed,
            "gateway-sanitize",
            &[rng::str_key(&key)],
        )
        .next_u64();
        let model = self.model.clone();
        let ann = self.ann.clone();
        let text = prompt.to_string();
        let (entry, hit) = self
            .cache
            .get_or_sanitize(&key, || async move {
                tokio::task::spawn_blocking(move || {
                    let mech = match &ann {
                        Some(a) => Mechanism::with_index(&model, a),
                        None => Mechanism::new(&model),
                    };
                    let tok = tokenize_words(&text, TokenizerOptions::default());
                    let (out, rendered) = mech.sanitize_tokenized(&tok, &cfg)?;
                    Ok::<_, GatewayError>(Sanitized {
                        changed_pct: out.changed_pct(),
                        token_ids: out.sanitized_token_ids,
                        text: rendered,
                    })
                })
                .await
                .map_err(|e| GatewayError::Internal(e.to_string()))?
            })
            .await?;
        Ok((entry.sanitized_prompt, hit))
    }

    /// Asks the SLM to repair grammar and coherence. On failure the input is
    /// returned with a warning.
    pub async fn correct_prompt(&self, sanitized: &str) -> (String, Option<String>) {
        let msg = self.settings.correction_template.replace("{text}", sanitized);
        match self.slm.complete(&msg, None).await {
            Ok(t) if !t.trim().is_empty() => (t, None),
            Ok(_) => (
                sanitized.to_string(),
                Some("prompt correction returned empty text".into()),
            ),
            Err(e) => (sanitized.to_string(), Some(format!("prompt correction failed: {e}"))),
        }
    }

    async fn run_slm(&self, req: &TaskRequest, text: &str) -> Result<String, ChatError> {
        let t = tasks::render(&req.task, text, &self.settings.slm_templates);
        self.slm.complete(&t.message, t.max_tokens).await
    }

    async fn assess_inner(&self, req: &TaskRequest) -> Result<Assessment, GatewayError> {
        req.validate().map_err(GatewayError::BadRequest)?;
        let threshold = req.quality_threshold.unwrap_or(self.settings.quality_threshold);
        let mut warnings = Vec::new();
        let (sanitized_prompt, cache_hit) = self.sanitize(&req.prompt, req.epsilon).await?;
        let corrected_prompt = if req.correct_prompts {
            let (c, w) = self.correct_prompt(&sanitized_prompt).await;
            warnings.extend(w);
            Some(c)
        } else {
            None
        };
        let downstream = corrected_prompt.as_deref().unwrap_or(&sanitized_prompt);
        let (slm_result, slm_result_sanitized) =
            tokio::try_join!(self.run_slm(req, &req.prompt), self.run_slm(req, downstream))
                .map_err(GatewayError::Slm)?;
        let features = self
            .extractor
            .compute_features(&req.prompt, downstream, &slm_result, &slm_result_sanitized, req.epsilon)
            .await?;
        let predicted_e = self.regressor().predict(&features);
        Ok(Assessment {
            sanitized_prompt,
            corrected_prompt,
            cache_hit,
            slm_result,
            slm_result_sanitized,
            features: features.with_target(predicted_e, TargetKind::Predicted),
            predicted_e,
            threshold,
            warnings,
        })
    }

    /// Steps 1-4 only; never calls the LLM and writes no log record.
    pub async fn assess(&self, req: &TaskRequest) -> Result<AssessResponse, GatewayError> {
        let a = self.assess_inner(req).await?;
        Ok(AssessResponse {
            predicted_e: a.predicted_e,
            quality_threshold: a.threshold,
            would_forward: decide(a.predicted_e, a.threshold) == Decision::Forward,
            features: a.features,
            sanitized_prompt: a.sanitized_prompt,
            corrected_prompt: a.corrected_prompt,
            slm_result: a.slm_result,
            slm_result_sanitized: a.slm_result_sanitized,
            cache_hit: a.cache_hit,
            warnings: a.warnings,
        })
    }

    /// The full flow, including the LLM call on a forward decision and the
    /// training-log append.
    pub async fn handle_request(&self, req: &TaskRequest) -> Result<GateDecision, GatewayError> {
        let a = self.assess_inner(req).await?;
        let decision = decide(a.predicted_e, a.threshold);
        let mut warnings = a.warnings.clone();
        let mut llm_error = None;
        let mut llm_result = None;
        let mut realized_e = None;
        if decision == Decision::Forward {
            let t = tasks::render(&req.task, a.downstream_prompt(), &self.settings.llm_templates);
            match self.llm.complete(&t.message, t.max_tokens).await {
                Ok(r) => match self.extractor.realized_target(&req.prompt, &r).await {
                    Ok(e) => {
                        realized_e = Some(e);
                        llm_result = Some(r);
                    }
                    Err(e) => {
                        llm_error = Some(ChatError::Protocol {
                            endpoint: self.llm.name().to_string(),
                            message: format!("cannot score answer: {e}"),
                        })
                    }
                },
                Err(e) => llm_error = Some(e),
            }
        }
        let record = LogRecord {
            timestamp: Utc::now(),
            task: req.task.kind().to_string(),
            features: FeatureVector {
                target_e: None,
                target_kind: None,
                ..a.features
            },
            predicted_e: a.predicted_e,
            quality_threshold: a.threshold,
            decision,
            realized_e,
            llm_error: llm_error.as_ref().map(|e| e.to_string()),
        };
        if let Err(e) = self.log.append(&record).await {
            warn!("training log append failed: {e}");
            warnings.push(format!("training log append failed: {e}"));
        }
        let out = GateDecision {
            decision,
            predicted_e: a.predicted_e,
            quality_threshold: a.threshold,
            features: a.features,
            sanitized_prompt: a.sanitized_prompt,
            corrected_prompt: a.corrected_prompt,
            slm_result: a.slm_result,
            slm_result_sanitized: a.slm_result_sanitized,
            llm_result,
            realized_e,
            cache_hit: a.cache_hit,
            warnings,
        };
        match llm_error {
            Some(source) => Err(GatewayError::Llm {
                source,
                fallback: Box::new(out),
            }),
            None => Ok(out),
        }
    }

    /// Trains a fresh ABCD regressor on the logged outcomes and swaps it in.
    pub async fn retrain(&self, params: Hyperparams, split_seed: u64) -> Result<RetrainResponse, GatewayError> {
        let rows = self.log.export_training_set()?;
        let path = self.settings.regressor_path.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let ds = Dataset::from_records(&rows, FeatureSet::Abcd)?;
            let out = regressor::train(&ds, &params, split_seed)?;
            if let Some(p) = &path {
                out.model.save(p)?;
            }
            Ok::<_, GatewayError>((ds.len(), out))
        })
        .await
        .map_err(|e| GatewayError::Internal(e.to_string()))??;
        let (rows, out) = outcome;
        info!(rows, r2 = ?out.report.r2, "regressor retrained");
        self.set_regressor(out.model);
        Ok(RetrainResponse {
            rows,
            report: out.report,
        })
    }
}
