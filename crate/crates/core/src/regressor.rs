//! Histogram-based gradient-boosted regression trees predicting the LLM
//! utility target E from features A-D, plus the evaluation metrics used to
//! judge the gate.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::quality::{FeatureVector, TargetKind};
use crate::rng;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("dataset is empty")]
    Empty,
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("row {row}: missing feature {feature}")]
    MissingFeature { row: usize, feature: &'static str },
    #[error("row {row}: missing realized target")]
    MissingTarget { row: usize },
    #[error("row {row}: non-finite value in {what}")]
    NonFinite { row: usize, what: &'static str },
    #[error("expected {expected} feature values, got {got}")]
    FeatureCount { expected: usize, got: usize },
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("model file: bad magic")]
    BadMagic,
    #[error("model file: unsupported version {0}")]
    Version(u32),
    #[error("model file corrupted: {0}")]
    Corrupted(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, RegressorError>;

/// Column subset used by a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSet {
    /// Epsilon only: the no-middleware baseline.
    A,
    #[serde(rename = "ABCD")]
    Abcd,
}

impl FeatureSet {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            FeatureSet::A => &["epsilon"],
            FeatureSet::Abcd => &["epsilon", "sim_b", "sim_c", "sim_d"],
        }
    }

    pub fn width(self) -> usize {
        self.names().len()
    }

    pub fn extract(self, fv: &FeatureVector) -> Vec<f64> {
        match self {
            FeatureSet::A => vec![fv.epsilon],
            FeatureSet::Abcd => vec![fv.epsilon, fv.sim_b, fv.sim_c, fv.sim_d],
        }
    }

    fn code(self) -> u8 {
        match self {
            FeatureSet::A => 1,
            FeatureSet::Abcd => 4,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(FeatureSet::A),
            4 => Some(FeatureSet::Abcd),
            _ => None,
        }
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(FeatureSet::A),
            "ABCD" => Ok(FeatureSet::Abcd),
            other => Err(format!("unknown feature set {other:?} (A|ABCD)")),
        }
    }
}

/// One row of the feature CSV (`id,epsilon,sim_b,sim_c,sim_d,target_e`).
/// Empty cells are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub epsilon: f64,
    pub sim_b: Option<f64>,
    pub sim_c: Option<f64>,
    pub sim_d: Option<f64>,
    pub target_e: Option<f64>,
}

impl FeatureRecord {
    pub fn from_vector(id: impl Into<String>, fv: &FeatureVector) -> Self {
        Self {
            id: id.into(),
            epsilon: fv.epsilon,
            sim_b: Some(fv.sim_b),
            sim_c: Some(fv.sim_c),
            sim_d: Some(fv.sim_d),
            target_e: fv.realized_target(),
        }
    }

    /// Values for `set`, failing on a missing column.
    pub fn values(&self, set: FeatureSet, row: usize) -> Result<Vec<f64>> {
        let mut out = vec![self.epsilon];
        if set == FeatureSet::Abcd {
            for (name, v) in [("sim_b", self.sim_b), ("sim_c", self.sim_c), ("sim_d", self.sim_d)] {
                out.push(v.ok_or(RegressorError::MissingFeature { row, feature: name })?);
            }
        }
        Ok(out)
    }
}

pub fn read_feature_csv<R: Read>(reader: R) -> Result<Vec<FeatureRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn load_feature_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    read_feature_csv(std::fs::File::open(path)?)
}

pub fn write_feature_csv<W: Write>(writer: W, records: &[FeatureRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows with a realized target, projected onto one feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_set: FeatureSet,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn from_records(records: &[FeatureRecord], set: FeatureSet) -> Result<Self> {
        let mut features = Vec::with_capacity(records.len());
        let mut targets = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let x = r.values(set, i + 1)?;
            let y = r.target_e.ok_or(RegressorError::MissingTarget { row: i + 1 })?;
            features.push(x);
            targets.push(y);
        }
        let ds = Self {
            feature_set: set,
            features,
            targets,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_vectors(rows: &[FeatureVector], set: FeatureSet) -> Result<Self> {
        let mut features = Vec::with_capacity(rows.len());
        let mut targets = Vec::with_capacity(rows.len());
        for (i, fv) in rows.iter().enumerate() {
            let y = match (fv.target_kind, fv.target_e) {
                (Some(TargetKind::Realized), Some(e)) => e,
                _ => return Err(RegressorError::MissingTarget { row: i + 1 }),
            };
            features.push(set.extract(fv));
            targets.push(y);
        }
        let ds = Self {
            feature_set: set,
            features,
            targets,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn validate(&self) -> Result<()> {
        for (i, (x, y)) in self.features.iter().zip(&self.targets).enumerate() {
            if x.len() != self.feature_set.width() {
                return Err(RegressorError::FeatureCount {
                    expected: self.feature_set.width(),
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(RegressorError::NonFinite {
                    row: i + 1,
                    what: "features",
                });
            }
            if !y.is_finite() {
                return Err(RegressorError::NonFinite {
                    row: i + 1,
                    what: "target",
                });
            }
        }
        Ok(())
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            feature_set: self.feature_set,
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub max_bins: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub l2_regularization: f64,
    pub test_fraction: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            max_bins: 255,
            iterations: 100,
            learning_rate: 0.1,
            max_depth: 6,
            min_samples_leaf: 20,
            l2_regularization: 0.0,
            test_fraction: 0.2,
        }
    }
}

impl Hyperparams {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RegressorError::InvalidParams(m.into()));
        if !(2..=65_535).contains(&self.max_bins) {
            return bad("max_bins must lie in [2, 65535]");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if self.max_depth == 0 || self.min_samples_leaf == 0 {
            return bad("max_depth and min_samples_leaf must be >= 1");
        }
        if self.l2_regularization.is_nan() || self.l2_regularization < 0.0 {
            return bad("l2_regularization must be >= 0");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TreeNode {
    /// Rows with `bin(feature) <= bin` go left.
    Split {
        feature: u32,
        bin: u32,
        left: u32,
        right: u32,
    },
    Leaf(f64),
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn eval(&self, bins: &[u32]) -> f64 {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf(v) => return *v,
                TreeNode::Split {
                    feature,
                    bin,
                    left,
                    right,
                } => {
                    i = if bins[*feature as usize] <= *bin {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

/// Trained ensemble: `base + learning_rate * sum(tree outputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    feature_set: FeatureSet,
    bin_edges: Vec<Vec<f64>>,
    trees: Vec<Tree>,
    learning_rate: f64,
    base_prediction: f64,
}

impl GbdtModel {
    /// Model without trees; predicts `base` everywhere.
    pub fn constant(feature_set: FeatureSet, base: f64) -> Self {
        Self {
            feature_set,
            bin_edges: vec![Vec::new(); feature_set.width()],
            trees: Vec::new(),
            learning_rate: 0.1,
            base_prediction: base,
        }
    }

    pub fn feature_set(&self) -> FeatureSet {
        self.feature_set
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    pub fn base_prediction(&self) -> f64 {
        self.base_prediction
    }

    fn bin_row(&self, row: &[f64]) -> Vec<u32> {
        row.iter()
            .zip(&self.bin_edges)
            .map(|(&x, edges)| bin_of(edges, x))
            .collect()
    }

    fn raw(&self, bins: &[u32]) -> f64 {
        self.base_prediction + self.learning_rate * self.trees.iter().map(|t| t.eval(bins)).sum::<f64>()
    }

    /// Prediction for raw feature values in the model's column order,
    /// clamped to `[-1, 1]`.
    pub fn predict_values(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.feature_set.width() {
            return Err(RegressorError::FeatureCount {
                expected: self.feature_set.width(),
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(RegressorError::NonFinite {
                row: 0,
                what: "features",
            });
        }
        Ok(self.raw(&self.bin_row(row)).clamp(-1.0, 1.0))
    }

    pub fn predict(&self, fv: &FeatureVector) -> f64 {
        let row = self.feature_set.extract(fv);
        self.raw(&self.bin_row(&row)).clamp(-1.0, 1.0)
    }

    pub fn predict_record(&self, rec: &FeatureRecord, row: usize) -> Result<f64> {
        self.predict_values(&rec.values(self.feature_set, row)?)
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<f64>> {
        ds.features.iter().map(|r| self.predict_values(r)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        p.push(self.feature_set.code());
        p.extend_from_slice(&self.learning_rate.to_le_bytes());
        p.extend_from_slice(&self.base_prediction.to_le_bytes());
        p.extend_from_slice(&(self.bin_edges.len() as u32).to_le_bytes());
        for edges in &self.bin_edges {
            p.extend_from_slice(&(edges.len() as u32).to_le_bytes());
            for e in edges {
                p.extend_from_slice(&e.to_le_bytes());
            }
        }
        p.extend_from_slice(&(self.trees.len() as u32).to_le_bytes());
        for t in &self.trees {
            p.extend_from_slice(&(t.nodes.len() as u32).to_le_bytes());
            for n in &t.nodes {
                match n {
                    TreeNode::Leaf(v) => {
                        p.push(0);
                        p.extend_from_slice(&v.to_le_bytes());
                    }
                    TreeNode::Split {
                        feature,
                        bin,
                        left,
                        right,
                    } => {
                        p.push(1);
                        for x in [feature, bin, left, right] {
                            p.extend_from_slice(&x.to_le_bytes());
                        }
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(p.len() + 52);
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&p);
        out.extend_from_slice(&Sha256::digest(&p));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || bytes[..8] != MODEL_MAGIC {
            return Err(RegressorError::BadMagic);
        }
        let mut r = Reader { b: bytes, pos: 8 };
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(RegressorError::Version(version));
        }
        let len = r.u64()? as usize;
        if bytes.len() != 20 + len + 32 {
            return Err(RegressorError::Corrupted(format!(
                "payload length {len} does not match file size {}",
                bytes.len()
            )));
        }
        let payload = &bytes[20..20 + len];
        if Sha256::digest(payload).as_slice() != &bytes[20 + len..] {
            return Err(RegressorError::Corrupted("checksum mismatch".into()));
        }
        let mut r = Reader { b: payload, pos: 0 };
        let feature_set =
            FeatureSet::from_code(r.u8()?).ok_or_else(|| RegressorError::Corrupted("unknown feature set".into()))?;
        let learning_rate = r.f64()?;
        let base_prediction = r.f64()?;
        let n_feat = r.u32()? as usize;
        if n_feat != feature_set.width() {
            return Err(RegressorError::Corrupted("bin table width".into()));
        }
        let mut bin_edges = Vec::with_capacity(n_feat);
        for _ in 0..n_feat {
            let n = r.u32()? as usize;
            bin_edges.push((0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        let n_trees = r.u32()? as usize;
        let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
        for _ in 0..n_trees {
            let n = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                nodes.push(match r.u8()? {
                    0 => TreeNode::Leaf(r.f64()?),
                    1 => {
                        let (feature, bin, left, right) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                        if feature as usize >= n_feat || left as usize >= n || right as usize >= n {
                            return Err(RegressorError::Corrupted("node reference out of range".into()));
                        }
                        TreeNode::Split {
                            feature,
                            bin,
                            left,
                            right,
                        }
                    }
                    t => return Err(RegressorError::Corrupted(format!("node tag {t}"))),
                });
            }
            trees.push(Tree { nodes });
        }
        if r.pos != payload.len() {
            return Err(RegressorError::Corrupted("trailing bytes".into()));
        }
        Ok(Self {
            feature_set,
            bin_edges,
            trees,
            learning_rate,
            base_prediction,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const MODEL_MAGIC: [u8; 8] = *b"DXGBDT\0\0";
const MODEL_VERSION: u32 = 1;

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.b.len() {
            return Err(RegressorError::Corrupted("unexpected end of data".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Bin index: number of edges strictly below `x`.
fn bin_of(edges: &[f64], x: f64) -> u32 {
    edges.partition_point(|&e| e < x) as u32
}

/// Thresholds separating up to `max_bins` bins: midpoints between distinct
/// values when few, quantiles otherwise.
fn compute_bin_edges(values: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() <= max_bins {
        return distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..max_bins)
        .map(|i| {
            let pos = i * n / max_bins;
            let (a, b) = (sorted[pos.saturating_sub(1)], sorted[pos]);
            0.5 * (a + b)
        })
        .collect();
    edges.dedup();
    edges
}

#[derive(Debug, Clone, Copy, Default)]
struct BinStat {
    grad: f64,
    count: usize,
}

struct Grower<'a> {
    bins: &'a [Vec<u32>],
    n_bins: &'a [usize],
    grads: &'a [f64],
    params: &'a Hyperparams,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    fn leaf_value(&self, g: f64, n: usize) -> f64 {
        -g / (n as f64 + self.params.l2_regularization)
    }

    fn score(&self, g: f64, n: usize) -> f64 {
        g * g / (n as f64 + self.params.l2_regularization)
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> u32 {
        let g_total: f64 = rows.iter().map(|&i| self.grads[i]).sum();
        let n_total = rows.len();
        let slot = self.nodes.len() as u32;
        self.nodes.push(TreeNode::Leaf(self.leaf_value(g_total, n_total)));
        let min_leaf = self.params.min_samples_leaf;
        if depth >= self.params.max_depth || n_total < 2 * min_leaf {
            return slot;
        }
        let parent = self.score(g_total, n_total);
        let mut best: Option<(f64, usize, u32)> = None;
        for (f, &nb) in self.n_bins.iter().enumerate() {
            if nb < 2 {
                continue;
            }
            let mut hist = vec![BinStat::default(); nb];
            for &i in &rows {
                let b = &mut hist[self.bins[i][f] as usize];
                b.grad += self.grads[i];
                b.count += 1;
            }
            let (mut gl, mut nl) = (0.0, 0usize);
            for (b, stat) in hist.iter().enumerate().take(nb - 1) {
                gl += stat.grad;
                nl += stat.count;
                let nr = n_total - nl;
                if nl < min_leaf {
                    continue;
                }
                if nr < min_leaf {
                    break;
                }
                let gain = self.score(gl, nl) + self.score(g_total - gl, nr) - parent;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, b as u32));
                }
            }
        }
        let Some((_, feature, bin)) = best else {
            return slot;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&i| self.bins[i][feature] <= bin);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[slot as usize] = TreeNode::Split {
            feature: feature as u32,
            bin,
            left,
            right,
        };
        slot
    }
}

/// Trained model plus per-iteration training RMSE (entry 0 is the
/// constant base model).
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: GbdtModel,
    pub train_rmse: Vec<f64>,
}

/// Fits on all rows of `ds`.
pub fn fit(ds: &Dataset, params: &Hyperparams) -> Result<FitOutcome> {
    params.validate()?;
    if ds.is_empty() {
        return Err(RegressorError::Empty);
    }
    ds.validate()?;
    let width = ds.feature_set.width();
    let bin_edges: Vec<Vec<f64>> = (0..width)
        .map(|f| {
            let col: Vec<f64> = ds.features.iter().map(|r| r[f]).collect();
            compute_bin_edges(&col, params.max_bins)
        })
        .collect();
    let n_bins: Vec<usize> = bin_edges.iter().map(|e| e.len() + 1).collect();
    let bins: Vec<Vec<u32>> = ds
        .features
        .iter()
        .map(|r| r.iter().zip(&bin_edges).map(|(&x, e)| bin_of(e, x)).collect())
        .collect();
    let base = ds.targets.iter().sum::<f64>() / ds.len() as f64;
    let mut preds = vec![base; ds.len()];
    let rmse = |preds: &[f64]| {
        (preds
            .iter()
            .zip(&ds.targets)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / ds.len() as f64)
            .sqrt()
    };
    let mut train_rmse = vec![rmse(&preds)];
    let mut trees = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations {
        let grads: Vec<f64> = preds.iter().zip(&ds.targets).map(|(p, y)| p - y).collect();
        let mut grower = Grower {
            bins: &bins,
            n_bins: &n_bins,
            grads: &grads,
            params,
            nodes: Vec::new(),
        };
        grower.grow((0..ds.len()).collect(), 0);
        let tree = Tree { nodes: grower.nodes };
        for (p, b) in preds.iter_mut().zip(&bins) {
            *p += params.learning_rate * tree.eval(b);
        }
        trees.push(tree);
        train_rmse.push(rmse(&preds));
    }
    Ok(FitOutcome {
        model: GbdtModel {
            feature_set: ds.feature_set,
            bin_edges,
            trees,
            learning_rate: params.learning_rate,
            base_prediction: base,
        },
        train_rmse,
    })
}

/// Held-out metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// `None` when the targets are constant.
    pub r2: Option<f64>,
    pub rmse: f64,
    pub wasted_pct: f64,
    pub failed_pct: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Absolute error beyond which a prediction counts as failed.
pub const PREDICTION_MARGIN: f64 = 0.1;

pub fn evaluate(predictions: &[f64], targets: &[f64]) -> Result<EvalReport> {
    if predictions.len() != targets.len() {
        return Err(RegressorError::LengthMismatch(predictions.len(), targets.len()));
    }
    if targets.is_empty() {
        return Err(RegressorError::Empty);
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean) * (y - mean)).sum();
    let ss_res: f64 = predictions.iter().zip(targets).map(|(p, y)| (y - p) * (y - p)).sum();
    let mut warnings = Vec::new();
    let constant = targets.iter().all(|y| *y == targets[0]);
    let r2 = if !constant && ss_tot > 0.0 {
        Some(1.0 - ss_res / ss_tot)
    } else {
        warnings.push("constant targets: R2 undefined".to_string());
        None
    };
    let wasted = predictions
        .iter()
        .zip(targets)
        .filter(|(p, y)| **y < **p - PREDICTION_MARGIN)
        .count();
    let failed = predictions
        .iter()
        .zip(targets)
        .filter(|(p, y)| (**y - **p).abs() > PREDICTION_MARGIN)
        .count();
    Ok(EvalReport {
        n: targets.len(),
        r2,
        rmse: (ss_res / n).sqrt(),
        wasted_pct: 100.0 * wasted as f64 / n,
        failed_pct: 100.0 * failed as f64 / n,
        warnings,
    })
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GbdtModel,
    pub report: EvalReport,
    pub train_rmse: Vec<f64>,
    pub train_rows: usize,
    pub test_rows: usize,
}

pub const MIN_TRAIN_ROWS: usize = 10;

/// Seeded shuffle split, fit on the train part, report on the held-out part.
pub fn train(ds: &Dataset, params: &Hyperparams, split_seed: u64) -> Result<TrainOutcome> {
    params.validate()?;
    if ds.is_empty() {
        return Err(RegressorError::Empty);
    }
    if ds.len() < MIN_TRAIN_ROWS {
        return Err(RegressorError::TooFewRows {
            need: MIN_TRAIN_ROWS,
            got: ds.len(),
        });
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng::keyed(split_seed, "train-test-split", &[]));
    let n_test = ((ds.len() as f64) * params.test_fraction).round().max(1.0) as usize;
    let (test_idx, train_idx) = idx.split_at(n_test);
    let train_ds = ds.subset(train_idx);
    let test_ds = ds.subset(test_idx);
    let fitted = fit(&train_ds, params)?;
    let preds = fitted.model.predict_dataset(&test_ds)?;
    let mut report = evaluate(&preds, &test_ds.targets)?;
    let features_constant = (0..ds.feature_set.width()).all(|f| {
        let first = train_ds.features[0][f];
        train_ds.features.iter().all(|r| r[f] == first)
    });
    let target_varies = train_ds.targets.iter().any(|y| *y != train_ds.targets[0]);
    if features_constant && target_varies {
        report
            .warnings
            .push("features are constant while the target varies: expect R2 <= 0".to_string());
    }
    Ok(TrainOutcome {
        model: fitted.model,
        report,
        train_rmse: fitted.train_rmse,
        train_rows: train_ds.len(),
        test_rows: test_ds.len(),
    })
}
