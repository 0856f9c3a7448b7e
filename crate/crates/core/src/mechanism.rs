//! Word-level dx-privacy sanitization.
//!
//! A token `x` is perturbed by adding multivariate Laplace noise to its
//! embedding: a direction drawn uniformly on the unit sphere scaled by a
//! `Gamma(n, 1/epsilon)` magnitude. The noisy point is resolved to its nearest
//! stored token `e`. The `NearestToken` variant returns `e`; the
//! `RankSampled` variant then draws a rank `i` with probability proportional to
//! `exp(-epsilon * i)` and returns the `i`-th neighbor of `e`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann::{AnnError, AnnIndex};
use crate::embedding::{EmbeddingError, EmbeddingModel, TokenId};
use crate::rng;
use crate::text::{detokenize, Tokenized};

#[derive(Debug, Error)]
pub enum MechanismError {
    #[error("invalid sanitization config: {0}")]
    InvalidConfig(String),
    #[error("out-of-vocabulary token at position {position}")]
    Oov { position: usize },
    #[error("token id {0} is not in the model")]
    InvalidToken(TokenId),
    #[error("approximate backend requested but no index is attached")]
    MissingIndex,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Ann(#[from] AnnError),
}

pub type Result<T> = std::result::Result<T, MechanismError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Stop at the nearest token of the noisy embedding.
    NearestToken,
    /// Sample a neighbor of the nearest token by exponentially decaying rank.
    RankSampled,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NearestToken => "nearest_token",
            Variant::RankSampled => "rank_sampled",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "nearest_token" | "nearest" => Ok(Variant::NearestToken),
            "rank_sampled" | "rank" => Ok(Variant::RankSampled),
            other => Err(format!("unknown variant {other:?} (nearest_token|rank_sampled)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnBackend {
    Exact,
    #[serde(alias = "ann")]
    Approximate,
}

impl NnBackend {
    pub fn as_str(self) -> &'static str {
        match self {
            NnBackend::Exact => "exact",
            NnBackend::Approximate => "ann",
        }
    }
}

impl std::str::FromStr for NnBackend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exact" | "enn" => Ok(NnBackend::Exact),
            "ann" | "approximate" => Ok(NnBackend::Approximate),
            other => Err(format!("unknown backend {other:?} (exact|ann)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    #[default]
    Error,
    PassthroughFlagged,
}

impl std::str::FromStr for OovPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "error" => Ok(OovPolicy::Error),
            "passthrough" | "passthrough_flagged" => Ok(OovPolicy::PassthroughFlagged),
            other => Err(format!("unknown oov policy {other:?} (error|passthrough_flagged)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SanitizationConfig {
    pub epsilon: f64,
    pub variant: Variant,
    pub nn_backend: NnBackend,
    #[serde(default)]
    pub oov_policy: OovPolicy,
    pub rng_seed: u64,
    #[serde(default = "default_tail_mass")]
    pub tail_mass_delta: f64,
}

fn default_tail_mass() -> f64 {
    DEFAULT_TAIL_MASS
}

pub const DEFAULT_TAIL_MASS: f64 = 1e-12;

impl SanitizationConfig {
    pub fn new(epsilon: f64, variant: Variant, nn_backend: NnBackend, rng_seed: u64) -> Self {
        Self {
            epsilon,
            variant,
            nn_backend,
            oov_policy: OovPolicy::Error,
            rng_seed,
            tail_mass_delta: DEFAULT_TAIL_MASS,
        }
    }

    /// `epsilon` may be `+inf` (the noiseless limit) but must be positive.
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(MechanismError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.tail_mass_delta > 0.0 && self.tail_mass_delta < 1.0) {
            return Err(MechanismError::InvalidConfig(format!(
                "tail_mass_delta must lie in (0, 1), got {}",
                self.tail_mass_delta
            )));
        }
        Ok(())
    }

    /// Neighbor-list length that holds all but `tail_mass_delta` of the rank
    /// distribution.
    pub fn rank_prefetch(&self, vocab_size: usize) -> usize {
        if !self.epsilon.is_finite() {
            return 1;
        }
        let k = (self.tail_mass_delta.ln() / -self.epsilon).ceil() + 1.0;
        if k >= vocab_size as f64 {
            vocab_size
        } else {
            (k as usize).max(1)
        }
    }
}

/// Noise vector `(g / |g|) * m` with `g` standard normal and
/// `m ~ Gamma(n, 1/epsilon)`. An infinite `epsilon` yields the zero vector.
pub fn sample_noise<R: Rng + ?Sized>(n: usize, epsilon: f64, rng: &mut R) -> Vec<f64> {
    assert!(n >= 1, "noise dimension must be positive");
    assert!(epsilon > 0.0, "epsilon must be positive");
    if epsilon.is_infinite() {
        return vec![0.0; n];
    }
    let mut g: Vec<f64> = loop {
        let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        if g.iter().any(|v| *v != 0.0) {
            break g;
        }
    };
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let magnitude = Gamma::new(n as f64, 1.0 / epsilon)
        .expect("shape and scale are positive")
        .sample(rng);
    let scale = magnitude / norm;
    g.iter_mut().for_each(|v| *v *= scale);
    g
}

/// Draws a rank from `P(i) ∝ exp(-epsilon * (i + rank_base))` over
/// `i in [0, size)`, by inverting the closed-form CDF in log space.
pub fn sample_rank<R: Rng + ?Sized>(epsilon: f64, size: usize, rank_base: u32, rng: &mut R) -> usize {
    assert!(size >= 1);
    if size == 1 || epsilon.is_infinite() {
        return 0;
    }
    let u: f64 = rng.random();
    let shift = epsilon * f64::from(rank_base);
    // log(1 - q) with q = exp(-epsilon)
    let log_one_minus_q = (-(-epsilon).exp_m1()).ln();
    let log_z = -shift + (-(-epsilon * size as f64).exp_m1()).ln() - log_one_minus_q;
    // smallest i with log CDF_unnormalized(i) >= ln(u) + log_z
    let target = u.ln() + log_z + shift + log_one_minus_q;
    if target >= 0.0 {
        return size - 1;
    }
    let needed = -(-target.exp()).ln_1p() / epsilon;
    let i = needed.ceil() - 1.0;
    if i <= 0.0 {
        0
    } else {
        (i as usize).min(size - 1)
    }
}

/// Result of sanitizing a token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanitizedText {
    pub original_token_ids: Vec<TokenId>,
    pub sanitized_token_ids: Vec<TokenId>,
    pub changed_mask: Vec<bool>,
    pub oov_flags: Vec<bool>,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_token_ranks: Option<Vec<usize>>,
}

impl SanitizedText {
    pub fn len(&self) -> usize {
        self.original_token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original_token_ids.is_empty()
    }

    pub fn changed_count(&self) -> usize {
        self.changed_mask.iter().filter(|c| **c).count()
    }

    /// Percentage of positions whose token was replaced; 0 for empty input.
    pub fn changed_pct(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            100.0 * self.changed_count() as f64 / self.len() as f64
        }
    }

    /// Rebuilds text from the sanitized ids; OOV positions keep their
    /// original word.
    pub fn render(&self, model: &EmbeddingModel, original: &Tokenized) -> String {
        let words: Vec<&str> = self
            .sanitized_token_ids
            .iter()
            .zip(&original.tokens)
            .map(|(id, orig)| model.token(*id).unwrap_or(orig.as_str()))
            .collect();
        detokenize(&words, &original.separators)
    }
}

/// Sanitizer over one embedding model, optionally with an approximate index
/// for the noisy-point search.
#[derive(Debug, Clone, Copy)]
pub struct Mechanism<'a> {
    model: &'a EmbeddingModel,
    ann: Option<&'a AnnIndex>,
}

const PAR_MIN_POSITIONS: usize = 64;

impl<'a> Mechanism<'a> {
    pub fn new(model: &'a EmbeddingModel) -> Self {
        Self { model, ann: None }
    }

    pub fn with_index(model: &'a EmbeddingModel, ann: &'a AnnIndex) -> Self {
        Self { model, ann: Some(ann) }
    }

    pub fn model(&self) -> &'a EmbeddingModel {
        self.model
    }

    /// Nearest stored token to `phi(token) + noise`.
    pub fn resolve_noisy(&self, token: TokenId, backend: NnBackend, noise: &[f64]) -> Result<TokenId> {
        if noise.iter().all(|v| *v == 0.0) && backend == NnBackend::Exact {
            return Ok(token);
        }
        let query: Vec<f64> = self
            .model
            .embed(token)
            .iter()
            .zip(noise)
            .map(|(&x, &n)| f64::from(x) + n)
            .collect();
        let list = match backend {
            NnBackend::Exact => self.model.exact_nearest(&query, 1)?,
            NnBackend::Approximate => {
                let ann = self.ann.ok_or(MechanismError::MissingIndex)?;
                ann.nearest(self.model, &query, 1)?
            }
        };
        Ok(list.first().expect("k = 1"))
    }

    /// One application of the mechanism; returns the output token and the
    /// sampled rank (always 0 for `NearestToken`).
    pub fn sanitize_token<R: Rng + ?Sized>(
        &self,
        token: TokenId,
        config: &SanitizationConfig,
        rng: &mut R,
    ) -> Result<(TokenId, usize)> {
        if !self.model.contains(token) {
            return Err(MechanismError::InvalidToken(token));
        }
        let noise = sample_noise(self.model.dim(), config.epsilon, rng);
        let nearest = self.resolve_noisy(token, config.nn_backend, &noise)?;
        match config.variant {
            Variant::NearestToken => Ok((nearest, 0)),
            Variant::RankSampled => {
                let rank = sample_rank(config.epsilon, self.model.len(), 0, rng);
                if rank == 0 {
                    return Ok((nearest, 0));
                }
                let k = config.rank_prefetch(self.model.len()).max(rank + 1);
                let ranking = self.model.ranked_around(nearest, k)?;
                Ok((ranking.entries[rank].id, rank))
            }
        }
    }

    /// Sanitizes each position independently with its own keyed substream.
    pub fn sanitize_ids(&self, ids: &[TokenId], config: &SanitizationConfig) -> Result<SanitizedText> {
        config.validate()?;
        let oov_flags: Vec<bool> = ids.iter().map(|id| !self.model.contains(*id)).collect();
        if config.oov_policy == OovPolicy::Error {
            if let Some(position) = oov_flags.iter().position(|f| *f) {
                return Err(MechanismError::Oov { position });
            }
        }
        let one = |(pos, id): (usize, &TokenId)| -> Result<(TokenId, usize)> {
            if oov_flags[pos] {
                return Ok((*id, 0));
            }
            let mut rng = rng::keyed(config.rng_seed, "sanitize", &[pos as u64]);
            self.sanitize_token(*id, config, &mut rng)
        };
        let out: Vec<(TokenId, usize)> = if ids.len() >= PAR_MIN_POSITIONS {
            ids.par_iter().enumerate().map(one).collect::<Result<_>>()?
        } else {
            ids.iter().enumerate().map(one).collect::<Result<_>>()?
        };
        let sanitized: Vec<TokenId> = out.iter().map(|(t, _)| *t).collect();
        let changed_mask = ids.iter().zip(&sanitized).map(|(a, b)| a != b).collect();
        let per_token_ranks = (config.variant == Variant::RankSampled).then(|| out.iter().map(|(_, r)| *r).collect());
        Ok(SanitizedText {
            original_token_ids: ids.to_vec(),
            sanitized_token_ids: sanitized,
            changed_mask,
            oov_flags,
            epsilon: config.epsilon,
            per_token_ranks,
        })
    }

    /// Sanitizes tokenized text and renders the output string.
    pub fn sanitize_tokenized(&self, text: &Tokenized, config: &SanitizationConfig) -> Result<(SanitizedText, String)> {
        let ids = text.ids(self.model);
        let out = self.sanitize_ids(&ids, config)?;
        let rendered = out.render(self.model, text);
        Ok((out, rendered))
    }
}
