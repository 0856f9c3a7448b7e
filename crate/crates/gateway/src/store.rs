//! Append-only JSONL stores: the sanitization cache and the training log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use dxgate_core::api::Decision;
use dxgate_core::embedding::TokenId;
use dxgate_core::mechanism::Variant;
use dxgate_core::quality::{text_digest, FeatureVector};
use dxgate_core::regressor::FeatureRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::OnceCell;
use tracing::warn;

use crate::error::{GatewayError, StoreError};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses every complete line. A final line without newline that fails to
/// parse is a torn write: it is dropped and the file truncated before it.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut line = String::new();
    let mut offset = 0u64;
    let mut lineno = 0usize;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        let complete = line.ends_with('\n');
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            match serde_json::from_str::<T>(trimmed) {
                Ok(v) => out.push((lineno, v)),
                Err(_) if !complete => {
                    warn!(path = %path.display(), line = lineno, "dropping torn trailing record");
                    let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
                    f.set_len(offset).map_err(io_err(path))?;
                    break;
                }
                Err(e) => {
                    return Err(StoreError::Corrupt {
                        path: path.to_path_buf(),
                        line: lineno,
                        message: e.to_string(),
                    })
                }
            }
        }
        offset += n as u64;
    }
    Ok(out)
}

/// Appends one line per call, flushed to disk before returning.
struct AppendFile {
    path: PathBuf,
    file: Mutex<File>,
}

impl AppendFile {
    fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(path))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    fn append_line(&self, line: &str) -> Result<(), StoreError> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        let mut f = self.file.lock().expect("append lock");
        f.write_all(&buf).map_err(io_err(&self.path))?;
        f.sync_data().map_err(io_err(&self.path))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub sanitized_token_ids: Vec<TokenId>,
    pub sanitized_prompt: String,
    pub changed_pct: f64,
    pub created_at: DateTime<Utc>,
}

/// Key of the single stored sanitization for (prompt, epsilon, model, variant).
pub fn cache_key(prompt: &str, epsilon: f64, model: &str, variant: Variant) -> String {
    text_digest(&format!(
        "dxgate-cache-v1\0{}\0{:016x}\0{}\0{}",
        text_digest(prompt),
        epsilon.to_bits(),
        model,
        variant.as_str()
    ))
}

/// What a fresh sanitization produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Sanitized {
    pub token_ids: Vec<TokenId>,
    pub text: String,
    pub changed_pct: f64,
}

/// Persistent map from cache key to the one sanitization ever made for it.
/// Concurrent first requests for a key share one computation.
pub struct SanitizationCache {
    file: Arc<AppendFile>,
    cells: Mutex<HashMap<String, Arc<OnceCell<CacheEntry>>>>,
    fresh: AtomicUsize,
}

impl SanitizationCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let mut cells = HashMap::new();
        for (_, entry) in read_jsonl::<CacheEntry>(path)? {
            // first stored version wins
            cells
                .entry(entry.key.clone())
                .or_insert_with(|| Arc::new(OnceCell::new_with(Some(entry))));
        }
        Ok(Self {
            file: Arc::new(AppendFile::open(path)?),
            cells: Mutex::new(cells),
            fresh: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.cells
            .lock()
            .expect("cache lock")
            .values()
            .filter(|c| c.initialized())
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sanitizations computed by this process (cache misses that succeeded).
    pub fn fresh_sanitizations(&self) -> usize {
        self.fresh.load(Ordering::SeqCst)
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.cells
            .lock()
            .expect("cache lock")
            .get(key)
            .and_then(|c| c.get().cloned())
    }

    /// Returns the stored entry, or runs `sanitize`, persists the result and
    /// returns it. The flag is true on a hit.
    pub async fn get_or_sanitize<F, Fut>(&self, key: &str, sanitize: F) -> Result<(CacheEntry, bool), GatewayError>
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<Sanitized, GatewayError>>,
    {
        let cell = self
            .cells
            .lock()
            .expect("cache lock")
            .entry(key.to_string())
            .or_default()
            .clone();
        let ran = AtomicBool::new(false);
        let entry = cell
            .get_or_try_init(|| async {
                ran.store(true, Ordering::SeqCst);
                let s = sanitize().await?;
                let entry = CacheEntry {
                    key: key.to_string(),
                    sanitized_token_ids: s.token_ids,
                    sanitized_prompt: s.text,
                    changed_pct: s.changed_pct,
                    created_at: Utc::now(),
                };
                let line = serde_json::to_string(&entry).map_err(|e| GatewayError::Internal(e.to_string()))?;
                let file = self.file.clone();
                tokio::task::spawn_blocking(move || file.append_line(&line))
                    .await
                    .map_err(|e| GatewayError::Internal(e.to_string()))??;
                self.fresh.fetch_add(1, Ordering::SeqCst);
                Ok::<_, GatewayError>(entry)
            })
            .await?;
        Ok((entry.clone(), !ran.load(Ordering::SeqCst)))
    }
}

/// One gateway outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub timestamp: DateTime<Utc>,
    pub task: String,
    pub features: FeatureVector,
    pub predicted_e: f64,
    pub quality_threshold: f64,
    pub decision: Decision,
    #[serde(default)]
    pub realized_e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_error: Option<String>,
}

/// Append-only JSONL of outcomes; rows with a realized E form the training
/// set of the regressor.
pub struct TrainingLog {
    path: PathBuf,
    file: Arc<AppendFile>,
}

impl TrainingLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        // validates existing content and drops a torn tail
        read_jsonl::<LogRecord>(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Arc::new(AppendFile::open(path)?),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub async fn append(&self, record: &LogRecord) -> Result<(), StoreError> {
        let line = serde_json::to_string(record).expect("log record serializes");
        let file = self.file.clone();
        tokio::task::spawn_blocking(move || file.append_line(&line))
            .await
            .expect("append task")
    }

    pub fn records(&self) -> Result<Vec<LogRecord>, StoreError> {
        Ok(read_jsonl(&self.path)?.into_iter().map(|(_, r)| r).collect())
    }

    /// Rows with a realized target, as feature-CSV records.
    pub fn export_training_set(&self) -> Result<Vec<FeatureRecord>, StoreError> {
        Ok(read_jsonl::<LogRecord>(&self.path)?
            .into_iter()
            .filter_map(|(line, r)| {
                r.realized_e.map(|e| FeatureRecord {
                    id: format!("log-{line}"),
                    epsilon: r.features.epsilon,
                    sim_b: Some(r.features.sim_b),
                    sim_c: Some(r.features.sim_c),
                    sim_d: Some(r.features.sim_d),
                    target_e: Some(e),
                })
            })
            .collect())
    }
}
