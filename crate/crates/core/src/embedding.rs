//! Word/token embedding models: loading, persistence and exact search.
//!
//! Rows are stored as contiguous `f32` in row-major order. Distances are
//! Euclidean and accumulated in `f64`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a row in an [`EmbeddingModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    /// Placeholder id for out-of-vocabulary positions.
    pub const OOV: TokenId = TokenId(u32::MAX);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_oov(self) -> bool {
        self == Self::OOV
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad magic bytes, not a dxgate embedding file")]
    BadMagic,
    #[error("unsupported embedding file version {0}")]
    Version(u32),
    #[error("truncated embedding file: {0}")]
    Truncated(String),
    #[error("inconsistent embedding file: {0}")]
    Inconsistent(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid k={k} for vocabulary of {size}")]
    InvalidK { k: usize, size: usize },
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("empty model")]
    Empty,
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

/// Vocabulary plus an `|X| x n` matrix of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    name: String,
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingModel {
    /// Builds a model from a vocabulary and a row-major matrix.
    pub fn new(name: impl Into<String>, vocab: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || vocab.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if data.len() != vocab.len() * dim {
            return Err(EmbeddingError::Inconsistent(format!(
                "{} values for {} rows of dimension {}",
                data.len(),
                vocab.len(),
                dim
            )));
        }
        if vocab.len() >= u32::MAX as usize {
            return Err(EmbeddingError::Inconsistent("vocabulary too large".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::Parse {
                line: pos / dim + 1,
                msg: "non-finite value".into(),
            });
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if index.insert(tok.clone(), TokenId(i as u32)).is_some() {
                return Err(EmbeddingError::DuplicateToken(tok.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            vocab,
            index,
            dim,
            data,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn lookup(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id.index()).map(String::as_str)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.vocab.len()
    }

    /// Embedding row of `id`. Panics on an out-of-range id.
    pub fn embed(&self, id: TokenId) -> &[f32] {
        let start = id.index() * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn row_norm(&self, id: TokenId) -> f64 {
        self.embed(id)
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance between two stored tokens.
    pub fn distance(&self, a: TokenId, b: TokenId) -> f64 {
        squared_distance_f32(self.embed(a), self.embed(b)).sqrt()
    }

    /// Parses the GloVe text format: `word v1 v2 ... vn` per line.
    pub fn load_glove_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "glove".into());
        Self::read_glove_text(BufReader::new(File::open(path)?), name)
    }

    pub fn read_glove_text<R: BufRead>(reader: R, name: impl Into<String>) -> Result<Self> {
        let mut vocab = Vec::new();
        let mut data: Vec<f32> = Vec::new();
        let mut dim = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = lineno + 1;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let word = parts.next().unwrap_or_default();
            let before = data.len();
            for tok in parts.filter(|t| !t.is_empty()) {
                let v: f32 = tok.parse().map_err(|_| EmbeddingError::Parse {
                    line: line_no,
                    msg: format!("invalid float {tok:?}"),
                })?;
                if !v.is_finite() {
                    return Err(EmbeddingError::Parse {
                        line: line_no,
                        msg: format!("non-finite value {tok:?}"),
                    });
                }
                data.push(v);
            }
            let got = data.len() - before;
            if dim == 0 {
                if got == 0 {
                    return Err(EmbeddingError::Parse {
                        line: line_no,
                        msg: "line has no vector values".into(),
                    });
                }
                dim = got;
            } else if got != dim {
                return Err(EmbeddingError::Parse {
                    line: line_no,
                    msg: format!("expected {dim} values, found {got}"),
                });
            }
            vocab.push(word.to_string());
        }
        if vocab.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        Self::new(name, vocab, dim, data)
    }

    /// Loads either format, picking the binary reader when the magic matches.
    pub fn load_any(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut head = [0u8; 8];
        let mut f = File::open(path)?;
        let n = f.read(&mut head)?;
        if n == 8 && head == MAGIC {
            Self::load_binary(path)
        } else {
            Self::load_glove_text(path)
        }
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Layout (little-endian): magic, u32 version, u64 count, u32 dim,
    /// `count * dim` f32 payload, then `count` length-prefixed tokens and a
    /// length-prefixed model name.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.vocab.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.dim * 4);
        for row in self.rows() {
            buf.clear();
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        for tok in &self.vocab {
            write_str(w, tok)?;
        }
        write_str(w, &self.name)?;
        Ok(())
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_binary(&bytes)
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(EmbeddingError::BadMagic);
        }
        cur.pos = MAGIC.len();
        let version = u32::from_le_bytes(cur.take::<4>("version")?);
        if version != FORMAT_VERSION {
            return Err(EmbeddingError::Version(version));
        }
        let count = u64::from_le_bytes(cur.take::<8>("count")?);
        let dim = u32::from_le_bytes(cur.take::<4>("dim")?) as usize;
        if dim == 0 || count == 0 {
            return Err(EmbeddingError::Inconsistent(format!(
                "header declares count={count}, dim={dim}"
            )));
        }
        let payload_len = (count as u128) * (dim as u128) * 4;
        let remaining = (bytes.len() - cur.pos) as u128;
        if payload_len > remaining {
            return Err(EmbeddingError::Truncated(format!(
                "payload needs {payload_len} bytes, {remaining} available"
            )));
        }
        let count = count as usize;
        let payload = &bytes[cur.pos..cur.pos + payload_len as usize];
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        cur.pos += payload_len as usize;
        let mut vocab = Vec::with_capacity(count);
        for _ in 0..count {
            vocab.push(cur.string("vocabulary block")?);
        }
        let name = cur.string("model name")?;
        if cur.pos != bytes.len() {
            return Err(EmbeddingError::Inconsistent(format!(
                "{} trailing bytes after vocabulary block",
                bytes.len() - cur.pos
            )));
        }
        Self::new(name, vocab, dim, data)
    }

    /// The `k` stored tokens closest to `query`, ascending by
    /// `(distance, token_id)`.
    pub fn exact_nearest(&self, query: &[f64], k: usize) -> Result<NeighborList> {
        self.check_query(query, k)?;
        let chunk_rows = PAR_CHUNK_ROWS;
        let entries = if self.len() <= chunk_rows {
            scan_rows(self, query, k, 0, self.len())
        } else {
            let n_chunks = self.len().div_ceil(chunk_rows);
            let partials: Vec<Vec<Candidate>> = (0..n_chunks)
                .into_par_iter()
                .map(|c| {
                    let lo = c * chunk_rows;
                    let hi = (lo + chunk_rows).min(self.len());
                    scan_rows(self, query, k, lo, hi)
                })
                .collect();
            merge_top_k(partials, k)
        };
        Ok(NeighborList::from_candidates(entries, QueryKind::Exact))
    }

    /// Single-threaded reference scan; results match [`Self::exact_nearest`].
    pub fn exact_nearest_serial(&self, query: &[f64], k: usize) -> Result<NeighborList> {
        self.check_query(query, k)?;
        let entries = scan_rows(self, query, k, 0, self.len());
        Ok(NeighborList::from_candidates(entries, QueryKind::Exact))
    }

    /// Ranking of all tokens around a stored token, with that token first.
    ///
    /// Equal embeddings elsewhere in the vocabulary never displace the
    /// anchor from rank 0.
    pub fn ranked_around(&self, anchor: TokenId, k: usize) -> Result<NeighborList> {
        let k = k.min(self.len());
        let query: Vec<f64> = self.embed(anchor).iter().map(|&v| f64::from(v)).collect();
        let list = self.exact_nearest(&query, k)?;
        let mut entries = Vec::with_capacity(k);
        entries.push(Neighbor {
            id: anchor,
            distance: 0.0,
        });
        entries.extend(list.entries.into_iter().filter(|n| n.id != anchor));
        entries.truncate(k);
        Ok(NeighborList {
            entries,
            query_kind: QueryKind::Exact,
        })
    }

    pub(crate) fn check_query(&self, query: &[f64], k: usize) -> Result<()> {
        if query.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if k == 0 || k > self.len() {
            return Err(EmbeddingError::InvalidK { k, size: self.len() });
        }
        Ok(())
    }
}

const MAGIC: [u8; 8] = *b"DXEMBED\0";
const FORMAT_VERSION: u32 = 1;
const PAR_CHUNK_ROWS: usize = 8192;

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        if end > self.bytes.len() {
            return Err(EmbeddingError::Truncated(format!("missing {what}")));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..end]);
        self.pos = end;
        Ok(out)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = u32::from_le_bytes(self.take::<4>(what)?) as usize;
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(EmbeddingError::Truncated(format!("missing {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[self.pos..end])
            .map_err(|_| EmbeddingError::Inconsistent(format!("invalid UTF-8 in {what}")))?;
        self.pos = end;
        Ok(s.to_string())
    }
}

/// Whether a [`NeighborList`] came from exhaustive or approximate search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: TokenId,
    pub distance: f64,
}

/// Neighbors ascending by distance; equal distances ordered by token id.
/// The position of an entry is its neighbor rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub entries: Vec<Neighbor>,
    pub query_kind: QueryKind,
}

impl NeighborList {
    pub(crate) fn from_candidates(mut cands: Vec<Candidate>, kind: QueryKind) -> Self {
        cands.sort_unstable_by(Candidate::cmp);
        Self {
            entries: cands
                .into_iter()
                .map(|c| Neighbor {
                    id: c.id,
                    distance: c.dist_sq.sqrt(),
                })
                .collect(),
            query_kind: kind,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().map(|n| n.id)
    }

    pub fn first(&self) -> Option<TokenId> {
        self.entries.first().map(|n| n.id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Candidate {
    pub dist_sq: f64,
    pub id: TokenId,
}

impl Candidate {
    pub(crate) fn cmp(a: &Self, b: &Self) -> std::cmp::Ordering {
        a.dist_sq.total_cmp(&b.dist_sq).then(a.id.cmp(&b.id))
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(Ord::cmp(self, other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        Candidate::cmp(self, other)
    }
}

pub(crate) fn squared_distance(query: &[f64], row: &[f32]) -> f64 {
    bounded_squared_distance(query, row, f64::INFINITY).unwrap_or(f64::INFINITY)
}

fn plain_squared_distance(query: &[f64], row: &[f32]) -> f64 {
    query
        .iter()
        .zip(row)
        .map(|(&q, &x)| {
            let d = q - f64::from(x);
            d * d
        })
        .sum()
}

fn squared_distance_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Squared distance with early exit once the partial sum exceeds `bound`.
/// Returns `None` when the row was pruned. Summation order is fixed per
/// block, so every caller sees bit-identical distances.
fn bounded_squared_distance(query: &[f64], row: &[f32], bound: f64) -> Option<f64> {
    const BLOCK: usize = 32;
    let mut acc = 0.0;
    for (qb, rb) in query.chunks(BLOCK).zip(row.chunks(BLOCK)) {
        acc += plain_squared_distance(qb, rb);
        if acc > bound {
            return None;
        }
    }
    Some(acc)
}

/// Top-k scan over rows `[lo, hi)` with partial-distance pruning.
fn scan_rows(model: &EmbeddingModel, query: &[f64], k: usize, lo: usize, hi: usize) -> Vec<Candidate> {
    let k = k.min(hi - lo);
    let mut heap: std::collections::BinaryHeap<Candidate> = std::collections::BinaryHeap::with_capacity(k + 1);
    for i in lo..hi {
        let row = &model.data[i * model.dim..(i + 1) * model.dim];
        let id = TokenId(i as u32);
        if heap.len() < k {
            heap.push(Candidate {
                dist_sq: bounded_squared_distance(query, row, f64::INFINITY).unwrap_or(f64::INFINITY),
                id,
            });
            continue;
        }
        let worst = heap.peek().map(|c| c.dist_sq).unwrap_or(f64::INFINITY);
        // rows are visited in ascending id order, so an exact tie never
        // displaces the current worst
        if let Some(d) = bounded_squared_distance(query, row, worst) {
            if d < worst {
                heap.pop();
                heap.push(Candidate { dist_sq: d, id });
            }
        }
    }
    heap.into_vec()
}

fn merge_top_k(partials: Vec<Vec<Candidate>>, k: usize) -> Vec<Candidate> {
    let mut all: Vec<Candidate> = partials.into_iter().flatten().collect();
    all.sort_unstable_by(Candidate::cmp);
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_model() -> EmbeddingModel {
        EmbeddingModel::new(
            "square",
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            2,
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0],
        )
        .unwrap()
    }

    #[test]
    fn parses_small_glove_file() {
        let text = "the 0.1 0.2\nof -1 2.5\nand 3 4\n";
        let m = EmbeddingModel::read_glove_text(text.as_bytes(), "t").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.dim(), 2);
        assert_eq!(m.embed(m.lookup("of").unwrap()), &[-1.0, 2.5]);
    }

    #[test]
    fn glove_dimension_mismatch_names_line() {
        let text = "a 1 2 3\nb 1 2 3\nc 1 2\n";
        match EmbeddingModel::read_glove_text(text.as_bytes(), "t") {
            Err(EmbeddingError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn glove_non_finite_rejected() {
        let text = "a 1 2\nb NaN 2\n";
        match EmbeddingModel::read_glove_text(text.as_bytes(), "t") {
            Err(EmbeddingError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(EmbeddingModel::read_glove_text("a inf 2\n".as_bytes(), "t").is_err());
    }

    #[test]
    fn lookup_embed_round_trip() {
        let m = square_model();
        for (i, tok) in m.vocab().iter().enumerate() {
            let id = m.lookup(tok).unwrap();
            assert_eq!(id, TokenId(i as u32));
            assert_eq!(m.token(id), Some(tok.as_str()));
        }
    }

    #[test]
    fn nearest_two_of_square() {
        let m = square_model();
        let nn = m.exact_nearest(&[0.6, 0.0], 2).unwrap();
        let ids: Vec<_> = nn.ids().collect();
        assert_eq!(ids, vec![TokenId(1), TokenId(0)]);
        assert!((nn.entries[0].distance - 0.4).abs() < 1e-12);
        assert!((nn.entries[1].distance - 0.6).abs() < 1e-12);
    }

    #[test]
    fn self_query_returns_self_at_zero() {
        let m = square_model();
        for i in 0..4 {
            let q: Vec<f64> = m.embed(TokenId(i)).iter().map(|&v| v as f64).collect();
            let nn = m.exact_nearest(&q, 1).unwrap();
            assert_eq!(nn.entries[0].id, TokenId(i));
            assert_eq!(nn.entries[0].distance, 0.0);
        }
    }

    #[test]
    fn ties_break_by_ascending_id() {
        // (1,0) and (0,1) are equidistant from the origin-diagonal point
        let m = square_model();
        let nn = m.exact_nearest(&[0.5, 0.5], 3).unwrap();
        let ids: Vec<_> = nn.ids().collect();
        assert_eq!(ids, vec![TokenId(0), TokenId(1), TokenId(2)]);
    }

    #[test]
    fn query_errors() {
        let m = square_model();
        assert!(matches!(
            m.exact_nearest(&[0.0, 0.0, 0.0], 1),
            Err(EmbeddingError::DimensionMismatch { expected: 2, got: 3 })
        ));
        assert!(matches!(
            m.exact_nearest(&[0.0, 0.0], 0),
            Err(EmbeddingError::InvalidK { .. })
        ));
        assert!(matches!(
            m.exact_nearest(&[0.0, 0.0], 5),
            Err(EmbeddingError::InvalidK { .. })
        ));
    }

    #[test]
    fn ranked_around_keeps_anchor_first_with_duplicates() {
        let m = EmbeddingModel::new("dup", vec!["x".into(), "y".into(), "z".into()], 1, vec![1.0, 1.0, 3.0]).unwrap();
        let r = m.ranked_around(TokenId(1), 3).unwrap();
        let ids: Vec<_> = r.ids().collect();
        assert_eq!(ids, vec![TokenId(1), TokenId(0), TokenId(2)]);
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let m = square_model();
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        let back = EmbeddingModel::from_binary(&buf).unwrap();
        assert_eq!(back, m);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            EmbeddingModel::from_binary(&bad),
            Err(EmbeddingError::BadMagic)
        ));

        let mut ver = buf.clone();
        ver[8] = 9;
        assert!(matches!(
            EmbeddingModel::from_binary(&ver),
            Err(EmbeddingError::Version(9))
        ));

        // header claims more rows than the payload holds
        let mut inflated = buf.clone();
        inflated[12..20].copy_from_slice(&1000u64.to_le_bytes());
        assert!(matches!(
            EmbeddingModel::from_binary(&inflated),
            Err(EmbeddingError::Truncated(_))
        ));

        let short = &buf[..buf.len() - 4];
        let err = EmbeddingModel::from_binary(short).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn duplicate_tokens_rejected() {
        let r = EmbeddingModel::new("d", vec!["a".into(), "a".into()], 1, vec![0.0, 1.0]);
        assert!(matches!(r, Err(EmbeddingError::DuplicateToken(_))));
    }
}
