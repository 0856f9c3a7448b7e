//! Replication experiments: per-word output tallies, vocabulary self-return
//! curves (exact vs approximate search) and corpus-level sweeps of text
//! similarity and unchanged tokens against epsilon.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::embedding::{EmbeddingModel, TokenId};
use crate::mechanism::{Mechanism, MechanismError, NnBackend, OovPolicy, SanitizationConfig, Variant};
use crate::quality::{FeatureExtractor, QualityError, TextRole};
use crate::rng;
use crate::text::{tokenize_words, TokenizerOptions};

#[derive(Debug, Error)]
pub enum ReplicationError {
    #[error("word {0:?} is not in the vocabulary")]
    Oov(String),
    #[error("word sample is empty")]
    EmptySample,
    #[error("epsilon grid is empty")]
    EmptyGrid,
    #[error("trials must be positive")]
    NoTrials,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ReplicationError>;

/// Output tally for one word at one epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub word: String,
    pub epsilon: f64,
    pub trials: usize,
    pub backend: NnBackend,
    pub variant: Variant,
    /// Every distinct output, by count descending then token.
    pub top_outputs: Vec<(String, usize)>,
    pub self_return_count: usize,
}

fn check_grid(epsilons: &[f64], trials: usize) -> Result<()> {
    if epsilons.is_empty() {
        return Err(ReplicationError::EmptyGrid);
    }
    if trials == 0 {
        return Err(ReplicationError::NoTrials);
    }
    Ok(())
}

fn config(epsilon: f64, backend: NnBackend, variant: Variant) -> SanitizationConfig {
    SanitizationConfig::new(epsilon, variant, backend, 0)
}

/// Sanitizes `word` `trials` times. Trial `t` draws from the substream keyed
/// by (seed, word, epsilon, t), so results do not depend on thread count.
pub fn word_frequency_experiment(
    mech: &Mechanism<'_>,
    word: &str,
    epsilon: f64,
    trials: usize,
    backend: NnBackend,
    variant: Variant,
    seed: u64,
) -> Result<ReplicationReport> {
    check_grid(&[epsilon], trials)?;
    let model = mech.model();
    let id = model
        .lookup(word)
        .ok_or_else(|| ReplicationError::Oov(word.to_string()))?;
    let cfg = config(epsilon, backend, variant);
    cfg.validate()?;
    let wkey = rng::str_key(word);
    let outputs: Vec<TokenId> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::keyed(seed, "replicate-word", &[wkey, epsilon.to_bits(), t]);
            mech.sanitize_token(id, &cfg, &mut r).map(|(tok, _)| tok)
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for o in outputs {
        *counts.entry(o).or_default() += 1;
    }
    let self_return_count = counts.get(&id).copied().unwrap_or(0);
    let mut top: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(t, c)| (model.token(t).unwrap_or("<?>").to_string(), c))
        .collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ReplicationReport {
        word: word.to_string(),
        epsilon,
        trials,
        backend,
        variant,
        top_outputs: top,
        self_return_count,
    })
}

/// Reproducible sample of `n` tokens with non-zero embeddings (all of them
/// when fewer are eligible).
pub fn sample_words(model: &EmbeddingModel, n: usize, seed: u64) -> Vec<TokenId> {
    let mut eligible: Vec<TokenId> = (0..model.len() as u32)
        .map(TokenId)
        .filter(|id| model.row_norm(*id) > 0.0)
        .collect();
    let mut r = rng::keyed(seed, "word-sample", &[]);
    let n = n.min(eligible.len());
    let (picked, _) = eligible.partial_shuffle(&mut r, n);
    picked.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    /// Mean count of trials returning the input word.
    SelfReturn,
    /// Mean cosine similarity between prompt and sanitized prompt.
    Similarity,
    /// Mean percentage of in-vocabulary tokens left unchanged.
    UnchangedPct,
}

impl SweepMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepMetric::SelfReturn => "self_return",
            SweepMetric::Similarity => "similarity",
            SweepMetric::UnchangedPct => "unchanged_pct",
        }
    }
}

/// One aggregate per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub metric: SweepMetric,
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    pub sample_size: usize,
    pub trials: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<NnBackend>,
}

/// Mean self-return count over `words` at each epsilon.
pub fn self_return_curve(
    mech: &Mechanism<'_>,
    words: &[TokenId],
    epsilons: &[f64],
    trials: usize,
    backend: NnBackend,
    variant: Variant,
    seed: u64,
) -> Result<SweepCurve> {
    check_grid(epsilons, trials)?;
    if words.is_empty() {
        return Err(ReplicationError::EmptySample);
    }
    let mut values = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg = config(eps, backend, variant);
        cfg.validate()?;
        let counts: Vec<usize> = words
            .par_iter()
            .map(|&w| {
                let mut hits = 0usize;
                for t in 0..trials as u64 {
                    let mut r = rng::keyed(seed, "replicate-curve", &[u64::from(w.0), eps.to_bits(), t]);
                    if mech.sanitize_token(w, &cfg, &mut r)?.0 == w {
                        hits += 1;
                    }
                }
                Ok(hits)
            })
            .collect::<std::result::Result<_, MechanismError>>()?;
        values.push(counts.iter().sum::<usize>() as f64 / words.len() as f64);
    }
    Ok(SweepCurve {
        metric: SweepMetric::SelfReturn,
        epsilons: epsilons.to_vec(),
        values,
        sample_size: words.len(),
        trials,
        backend: Some(backend),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    /// Documents left after the length filter, before sampling.
    pub filtered_count: usize,
    pub warnings: Vec<String>,
}

/// Reads a JSONL corpus, drops documents longer than `max_tokens` words and
/// keeps a seeded sample of `sample_size` of the rest (in file order).
pub fn load_corpus(path: impl AsRef<Path>, max_tokens: usize, sample_size: usize, seed: u64) -> Result<Corpus> {
    read_corpus(
        BufReader::new(std::fs::File::open(path)?),
        max_tokens,
        sample_size,
        seed,
    )
}

pub fn read_corpus<R: BufRead>(reader: R, max_tokens: usize, sample_size: usize, seed: u64) -> Result<Corpus> {
    let mut kept = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| ReplicationError::Corpus {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if tokenize_words(&doc.text, TokenizerOptions::default()).len() <= max_tokens {
            kept.push(doc);
        }
    }
    let filtered_count = kept.len();
    let mut warnings = Vec::new();
    if sample_size > filtered_count {
        let msg = format!("requested {sample_size} documents but only {filtered_count} pass the length filter");
        warn!("{msg}");
        warnings.push(msg);
    }
    let mut idx: Vec<usize> = (0..filtered_count).collect();
    let n = sample_size.min(filtered_count);
    let (picked, _) = idx.partial_shuffle(&mut rng::keyed(seed, "corpus-sample", &[]), n);
    let mut picked = picked.to_vec();
    picked.sort_unstable();
    let mut slots: Vec<Option<Document>> = kept.into_iter().map(Some).collect();
    let documents = picked
        .into_iter()
        .map(|i| slots[i].take().expect("unique index"))
        .collect();
    Ok(Corpus {
        documents,
        filtered_count,
        warnings,
    })
}

/// Similarity and unchanged-token curves over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSweep {
    pub similarity: SweepCurve,
    pub unchanged: SweepCurve,
    /// Set when the provider failed; curves then hold only the grid points
    /// completed before the failure.
    pub partial: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Sanitizes every document at every epsilon. OOV words pass through and are
/// excluded from the unchanged percentage.
pub async fn corpus_sweep(
    mech: &Mechanism<'_>,
    docs: &[Document],
    epsilons: &[f64],
    backend: NnBackend,
    variant: Variant,
    extractor: &FeatureExtractor,
    seed: u64,
) -> Result<CorpusSweep> {
    check_grid(epsilons, 1)?;
    if docs.is_empty() {
        return Err(ReplicationError::EmptyCorpus);
    }
    let tokenized: Vec<_> = docs
        .iter()
        .map(|d| tokenize_words(&d.text, TokenizerOptions::default()))
        .collect();
    let mut sims = Vec::new();
    let mut unchanged = Vec::new();
    let mut failure = None;
    'grid: for &eps in epsilons {
        let mut sim_sum = 0.0;
        let mut sim_n = 0usize;
        let mut unch_sum = 0.0;
        let mut unch_n = 0usize;
        for (di, (doc, tok)) in docs.iter().zip(&tokenized).enumerate() {
            let doc_seed = rng::keyed(seed, "corpus-sweep", &[di as u64, eps.to_bits()]).next_u64();
            let mut cfg = config(eps, backend, variant);
            cfg.rng_seed = doc_seed;
            cfg.oov_policy = OovPolicy::PassthroughFlagged;
            let (san, rendered) = mech.sanitize_tokenized(tok, &cfg)?;
            let in_vocab = san.oov_flags.iter().filter(|f| !**f).count();
            if in_vocab > 0 {
                let same = san
                    .changed_mask
                    .iter()
                    .zip(&san.oov_flags)
                    .filter(|(c, oov)| !**c && !**oov)
                    .count();
                unch_sum += 100.0 * same as f64 / in_vocab as f64;
                unch_n += 1;
            }
            if doc.text.trim().is_empty() {
                continue;
            }
            match extractor
                .similarity((TextRole::Prompt, &doc.text), (TextRole::SanitizedPrompt, &rendered))
                .await
            {
                Ok(s) => {
                    sim_sum += s;
                    sim_n += 1;
                }
                Err(e @ (QualityError::Provider { .. } | QualityError::EmptyText(_))) => {
                    failure = Some(e.to_string());
                    break 'grid;
                }
                Err(e) => {
                    warn!(doc = %doc.id, "similarity skipped: {e}");
                }
            }
        }
        sims.push(if sim_n > 0 { sim_sum / sim_n as f64 } else { f64::NAN });
        unchanged.push(if unch_n > 0 { unch_sum / unch_n as f64 } else { f64::NAN });
    }
    let done = sims.len();
    let curve = |metric, values| SweepCurve {
        metric,
        epsilons: epsilons[..done].to_vec(),
        values,
        sample_size: docs.len(),
        trials: 1,
        backend: Some(backend),
    };
    Ok(CorpusSweep {
        similarity: curve(SweepMetric::Similarity, sims),
        unchanged: curve(SweepMetric::UnchangedPct, unchanged),
        partial: failure.is_some(),
        error: failure,
    })
}

/// How many outputs per word go into the CSV.
pub const CSV_TOP_OUTPUTS: usize = 3;

/// One row per (word, epsilon): the self-return count and the top outputs as
/// `token:count` pairs separated by `;`.
pub fn write_reports_csv<W: Write>(w: W, reports: &[ReplicationReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "word",
        "epsilon",
        "backend",
        "variant",
        "trials",
        "self_return_count",
        "top_outputs",
    ])?;
    for r in reports {
        let top = r
            .top_outputs
            .iter()
            .take(CSV_TOP_OUTPUTS)
            .map(|(t, c)| format!("{t}:{c}"))
            .collect::<Vec<_>>()
            .join(";");
        out.write_record([
            r.word.clone(),
            r.epsilon.to_string(),
            r.backend.as_str().to_string(),
            r.variant.as_str().to_string(),
            r.trials.to_string(),
            r.self_return_count.to_string(),
            top,
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_curves_csv<W: Write>(w: W, curves: &[SweepCurve]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "backend", "epsilon", "value", "sample_size", "trials"])?;
    for c in curves {
        for (e, v) in c.epsilons.iter().zip(&c.values) {
            out.write_record([
                c.metric.as_str().to_string(),
                c.backend.map(|b| b.as_str()).unwrap_or("").to_string(),
                e.to_string(),
                v.to_string(),
                c.sample_size.to_string(),
                c.trials.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
