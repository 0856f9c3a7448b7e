//! Text-similarity features for the utility regressor.
//!
//! Texts are embedded by a pluggable [`TextEmbeddingProvider`] and compared
//! with cosine similarity. [`FeatureExtractor`] memoizes embeddings by the
//! SHA-256 digest of the NFC-normalized text.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::embedding::TokenId;
use crate::rng;
use crate::text::{tokenize_words, TokenizerOptions};

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("similarity undefined for a zero vector")]
    ZeroVector,
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty token sequence")]
    Empty,
    #[error("empty text for {0}")]
    EmptyText(TextRole),
    #[error("embedding provider failed on {role}: {source}")]
    Provider {
        role: TextRole,
        #[source]
        source: ProviderError,
    },
}

impl QualityError {
    /// Provider failures may succeed on retry; the rest are input errors.
    pub fn is_retryable(&self) -> bool {
        matches!(self, QualityError::Provider { source, .. } if source.retryable)
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct ProviderError {
    pub message: String,
    pub retryable: bool,
}

impl ProviderError {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: false,
        }
    }
}

/// Which text of the assessor pipeline a vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextRole {
    Prompt,
    SanitizedPrompt,
    SlmResult,
    SlmResultSanitized,
    LlmResultSanitized,
}

impl std::fmt::Display for TextRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TextRole::Prompt => "prompt",
            TextRole::SanitizedPrompt => "sanitized prompt",
            TextRole::SlmResult => "SLM result",
            TextRole::SlmResultSanitized => "SLM result on sanitized prompt",
            TextRole::LlmResultSanitized => "LLM result on sanitized prompt",
        };
        f.write_str(s)
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64, QualityError> {
    if u.len() != v.len() {
        return Err(QualityError::DimensionMismatch(u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(QualityError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Hex SHA-256 of the NFC-normalized UTF-8 text.
pub fn text_digest(text: &str) -> String {
    let normalized: String = text.nfc().collect();
    hex::encode(Sha256::digest(normalized.as_bytes()))
}

/// Percentage of positions left unchanged by sanitization.
pub fn token_change_stats(original: &[TokenId], sanitized: &[TokenId]) -> Result<f64, QualityError> {
    if original.len() != sanitized.len() {
        return Err(QualityError::LengthMismatch(original.len(), sanitized.len()));
    }
    if original.is_empty() {
        return Err(QualityError::Empty);
    }
    let same = original.iter().zip(sanitized).filter(|(a, b)| a == b).count();
    Ok(100.0 * same as f64 / original.len() as f64)
}

/// Maps texts to fixed-dimension vectors.
#[async_trait]
pub trait TextEmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

/// Offline provider: a seeded hash of the text picks a point on the unit
/// sphere. In semantic mode the vector is the normalized sum of per-word
/// vectors, so texts sharing words are similar.
#[derive(Debug, Clone)]
pub struct MockProvider {
    pub dim: usize,
    pub seed: u64,
    pub semantic: bool,
}

impl MockProvider {
    pub fn new(dim: usize, seed: u64, semantic: bool) -> Self {
        assert!(dim > 0);
        Self { dim, seed, semantic }
    }

    fn gaussian(&self, key: &str) -> Vec<f64> {
        let mut r = rng::keyed(self.seed, "mock-embedding", &[rng::str_key(key)]);
        (0..self.dim).map(|_| StandardNormal.sample(&mut r)).collect()
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let normalized: String = text.nfc().collect();
        let mut acc = vec![0.0f64; self.dim];
        if self.semantic {
            let toks = tokenize_words(&normalized, TokenizerOptions { lowercase: true });
            for t in &toks.tokens {
                for (a, g) in acc.iter_mut().zip(self.gaussian(&format!("w:{t}"))) {
                    *a += g;
                }
            }
        }
        if acc.iter().all(|v| *v == 0.0) {
            acc = self.gaussian(&format!("t:{normalized}"));
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc.iter().map(|v| (v / norm) as f32).collect()
    }
}

#[async_trait]
impl TextEmbeddingProvider for MockProvider {
    fn name(&self) -> &str {
        if self.semantic {
            "mock-semantic"
        } else {
            "mock"
        }
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Precomputed vectors looked up by text digest.
///
/// Reads JSONL records of the form `{"text": ..., "embedding": [...]}` or
/// `{"digest": ..., "embedding": [...]}`.
#[derive(Debug, Clone, Default)]
pub struct FileProvider {
    vectors: HashMap<String, Vec<f32>>,
}

#[derive(Deserialize)]
struct FileRecord {
    text: Option<String>,
    digest: Option<String>,
    embedding: Vec<f32>,
}

impl FileProvider {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let body = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ProviderError::fatal(format!("{}: {e}", path.as_ref().display())))?;
        let mut vectors = HashMap::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FileRecord =
                serde_json::from_str(line).map_err(|e| ProviderError::fatal(format!("line {}: {e}", i + 1)))?;
            let key = match (rec.digest, rec.text) {
                (Some(d), _) => d,
                (None, Some(t)) => text_digest(&t),
                (None, None) => return Err(ProviderError::fatal(format!("line {}: need text or digest", i + 1))),
            };
            vectors.insert(key, rec.embedding);
        }
        Ok(Self { vectors })
    }

    pub fn insert(&mut self, text: &str, embedding: Vec<f32>) {
        self.vectors.insert(text_digest(text), embedding);
    }
}

#[async_trait]
impl TextEmbeddingProvider for FileProvider {
    fn name(&self) -> &str {
        "file"
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        texts
            .iter()
            .map(|t| {
                self.vectors
                    .get(&text_digest(t))
                    .cloned()
                    .ok_or_else(|| ProviderError::fatal(format!("no vector for text digest {}", text_digest(t))))
            })
            .collect()
    }
}

/// Features A-D plus the optional target E.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// A: the privacy parameter.
    pub epsilon: f64,
    /// B: sim(prompt, sanitized prompt).
    pub sim_b: f64,
    /// C: sim(prompt, SLM result on prompt).
    pub sim_c: f64,
    /// D: sim(prompt, SLM result on sanitized prompt).
    pub sim_d: f64,
    /// E: sim(prompt, LLM result on sanitized prompt), realized or predicted.
    #[serde(default)]
    pub target_e: Option<f64>,
    #[serde(default)]
    pub target_kind: Option<TargetKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Realized,
    Predicted,
}

impl FeatureVector {
    pub fn with_target(mut self, e: f64, kind: TargetKind) -> Self {
        self.target_e = Some(e);
        self.target_kind = Some(kind);
        self
    }

    pub fn realized_target(&self) -> Option<f64> {
        match self.target_kind {
            Some(TargetKind::Realized) => self.target_e,
            _ => None,
        }
    }
}

/// Memoizing feature computation over one provider.
pub struct FeatureExtractor {
    provider: Arc<dyn TextEmbeddingProvider>,
    cache: Mutex<HashMap<String, Arc<Vec<f32>>>>,
    provider_calls: AtomicUsize,
}

impl FeatureExtractor {
    pub fn new(provider: Arc<dyn TextEmbeddingProvider>) -> Self {
        Self {
            provider,
            cache: Mutex::new(HashMap::new()),
            provider_calls: AtomicUsize::new(0),
        }
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    /// Number of texts sent to the underlying provider so far.
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::Relaxed)
    }

    pub async fn embed(&self, role: TextRole, text: &str) -> Result<Arc<Vec<f32>>, QualityError> {
        let key = text_digest(text);
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        self.provider_calls.fetch_add(1, Ordering::Relaxed);
        let mut out = self
            .provider
            .embed(&[text.to_string()])
            .await
            .map_err(|source| QualityError::Provider { role, source })?;
        if out.len() != 1 {
            return Err(QualityError::Provider {
                role,
                source: ProviderError::fatal(format!("provider returned {} vectors for 1 text", out.len())),
            });
        }
        let v = Arc::new(out.pop().expect("one vector"));
        // concurrent misses store identical values, last write wins
        self.cache.lock().expect("cache lock").insert(key, v.clone());
        Ok(v)
    }

    pub async fn similarity(&self, a: (TextRole, &str), b: (TextRole, &str)) -> Result<f64, QualityError> {
        let va = self.embed(a.0, a.1).await?;
        let vb = self.embed(b.0, b.1).await?;
        cosine_similarity(&va, &vb)
    }

    /// Features A-D for one prompt; E is left unset.
    pub async fn compute_features(
        &self,
        prompt: &str,
        sanitized_prompt: &str,
        slm_result: &str,
        slm_result_sanitized: &str,
        epsilon: f64,
    ) -> Result<FeatureVector, QualityError> {
        for (role, text) in [
            (TextRole::Prompt, prompt),
            (TextRole::SanitizedPrompt, sanitized_prompt),
            (TextRole::SlmResult, slm_result),
            (TextRole::SlmResultSanitized, slm_result_sanitized),
        ] {
            if text.trim().is_empty() {
                return Err(QualityError::EmptyText(role));
            }
        }
        let p = (TextRole::Prompt, prompt);
        Ok(FeatureVector {
            epsilon,
            sim_b: self
                .similarity(p, (TextRole::SanitizedPrompt, sanitized_prompt))
                .await?,
            sim_c: self.similarity(p, (TextRole::SlmResult, slm_result)).await?,
            sim_d: self
                .similarity(p, (TextRole::SlmResultSanitized, slm_result_sanitized))
                .await?,
            target_e: None,
            target_kind: None,
        })
    }

    /// Realized E, computed exactly like feature D.
    pub async fn realized_target(&self, prompt: &str, llm_result_sanitized: &str) -> Result<f64, QualityError> {
        if llm_result_sanitized.trim().is_empty() {
            return Err(QualityError::EmptyText(TextRole::LlmResultSanitized));
        }
        self.similarity(
            (TextRole::Prompt, prompt),
            (TextRole::LlmResultSanitized, llm_result_sanitized),
        )
        .await
    }
}
