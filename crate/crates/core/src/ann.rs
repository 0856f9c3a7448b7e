//! Approximate nearest-neighbor search with a forest of random
//! hyperplane-split trees.
//!
//! Each tree recursively splits the rows with a hyperplane placed between two
//! centroids found by a short 2-means pass over sampled rows. Queries walk all
//! trees at once through a priority queue ordered by hyperplane margin and stop
//! once `search_budget` candidates have been collected; the candidates are then
//! ranked by exact distance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{squared_distance, Candidate, EmbeddingError, EmbeddingModel, NeighborList, QueryKind, TokenId};

#[derive(Debug, Error)]
pub enum AnnError {
    #[error("invalid index parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Build and query parameters of an [`AnnIndex`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnParams {
    pub tree_count: usize,
    /// Maximum rows per leaf; `None` uses `dim + 2`.
    pub leaf_size: Option<usize>,
    /// Candidate cap per query; `None` uses `tree_count * k`.
    pub search_budget: Option<usize>,
    pub build_seed: u64,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            tree_count: 50,
            leaf_size: None,
            search_budget: None,
            build_seed: 0x5eed,
        }
    }
}

impl AnnParams {
    pub fn validate(&self) -> Result<(), AnnError> {
        if self.tree_count == 0 {
            return Err(AnnError::InvalidParams("tree_count must be >= 1".into()));
        }
        if self.leaf_size == Some(0) {
            return Err(AnnError::InvalidParams("leaf_size must be >= 1".into()));
        }
        if self.search_budget == Some(0) {
            return Err(AnnError::InvalidParams("search_budget must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Node {
    Split {
        normal: Vec<f64>,
        offset: f64,
        left: u32,
        right: u32,
    },
    Leaf(Vec<TokenId>),
}

/// Immutable forest over the rows of one embedding model.
#[derive(Debug, Clone)]
pub struct AnnIndex {
    params: AnnParams,
    leaf_size: usize,
    dim: usize,
    nodes: Vec<Node>,
    roots: Vec<u32>,
}

const TWO_MEANS_ITERATIONS: usize = 200;

impl AnnIndex {
    pub fn build(model: &EmbeddingModel, params: AnnParams) -> Result<Self, AnnError> {
        params.validate()?;
        let leaf_size = params.leaf_size.unwrap_or(model.dim() + 2);
        let mut index = AnnIndex {
            params,
            leaf_size,
            dim: model.dim(),
            nodes: Vec::new(),
            roots: Vec::with_capacity(params.tree_count),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.build_seed);
        let all: Vec<TokenId> = (0..model.len() as u32).map(TokenId).collect();
        for _ in 0..params.tree_count {
            let root = index.build_node(model, all.clone(), &mut rng);
            index.roots.push(root);
        }
        Ok(index)
    }

    pub fn params(&self) -> &AnnParams {
        &self.params
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, node: Node) -> u32 {
        self.nodes.push(node);
        (self.nodes.len() - 1) as u32
    }

    fn build_node(&mut self, model: &EmbeddingModel, items: Vec<TokenId>, rng: &mut ChaCha8Rng) -> u32 {
        if items.len() <= self.leaf_size {
            return self.push(Node::Leaf(items));
        }
        let (normal, offset) = two_means_split(model, &items, rng);
        let (mut left, mut right): (Vec<TokenId>, Vec<TokenId>) = items
            .iter()
            .partition(|&&id| margin(&normal, offset, model.embed(id)) <= 0.0);
        if left.is_empty() || right.is_empty() {
            // degenerate hyperplane (e.g. duplicate rows): split at random
            let mut shuffled = items;
            for i in (1..shuffled.len()).rev() {
                let j = rng.random_range(0..=i);
                shuffled.swap(i, j);
            }
            right = shuffled.split_off(shuffled.len() / 2);
            left = shuffled;
            let idx = self.push(Node::Leaf(Vec::new()));
            let l = self.build_node(model, left, rng);
            let r = self.build_node(model, right, rng);
            // random split carries no geometry: both sides get margin zero
            self.nodes[idx as usize] = Node::Split {
                normal: vec![0.0; self.dim],
                offset: 0.0,
                left: l,
                right: r,
            };
            return idx;
        }
        let idx = self.push(Node::Leaf(Vec::new()));
        let l = self.build_node(model, left, rng);
        let r = self.build_node(model, right, rng);
        self.nodes[idx as usize] = Node::Split {
            normal,
            offset,
            left: l,
            right: r,
        };
        idx
    }

    /// Approximate `k` nearest rows to `query`.
    pub fn nearest(&self, model: &EmbeddingModel, query: &[f64], k: usize) -> Result<NeighborList, AnnError> {
        model.check_query(query, k)?;
        if model.dim() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                got: model.dim(),
            }
            .into());
        }
        let budget = self.params.search_budget.unwrap_or(self.params.tree_count * k).max(k);
        let mut queue: BinaryHeap<Pending> = self
            .roots
            .iter()
            .map(|&node| Pending {
                priority: f64::INFINITY,
                node,
            })
            .collect();
        let mut seen = vec![false; model.len()];
        let mut candidates: Vec<TokenId> = Vec::with_capacity(budget + self.leaf_size);
        while candidates.len() < budget {
            let Some(Pending { priority, node }) = queue.pop() else {
                break;
            };
            match &self.nodes[node as usize] {
                Node::Leaf(items) => {
                    for &id in items {
                        if !std::mem::replace(&mut seen[id.index()], true) {
                            candidates.push(id);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let m = dot(normal, query) + offset;
                    queue.push(Pending {
                        priority: priority.min(-m),
                        node: *left,
                    });
                    queue.push(Pending {
                        priority: priority.min(m),
                        node: *right,
                    });
                }
            }
        }
        let mut scored: Vec<Candidate> = candidates
            .into_iter()
            .map(|id| Candidate {
                dist_sq: squared_distance(query, model.embed(id)),
                id,
            })
            .collect();
        scored.sort_unstable_by(Candidate::cmp);
        scored.truncate(k);
        Ok(NeighborList::from_candidates(scored, QueryKind::Approximate))
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    priority: f64,
    node: u32,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // max-heap on priority; lower node index first among equals
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.node.cmp(&self.node))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn margin(normal: &[f64], offset: f64, row: &[f32]) -> f64 {
    normal.iter().zip(row).map(|(n, &x)| n * f64::from(x)).sum::<f64>() + offset
}

fn to_f64(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&v| f64::from(v)).collect()
}

/// Hyperplane equidistant from two centroids of a sampled 2-means run.
fn two_means_split(model: &EmbeddingModel, items: &[TokenId], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let pair: Vec<&TokenId> = items.choose_multiple(rng, 2).collect();
    let mut c1 = to_f64(model.embed(*pair[0]));
    let mut c2 = to_f64(model.embed(*pair[1]));
    let (mut n1, mut n2) = (1.0f64, 1.0f64);
    for _ in 0..TWO_MEANS_ITERATIONS {
        let id = *items.choose(rng).expect("non-empty");
        let row = model.embed(id);
        let d1 = n1 * squared_distance(&c1, row);
        let d2 = n2 * squared_distance(&c2, row);
        let (c, n) = if d1 < d2 {
            (&mut c1, &mut n1)
        } else {
            (&mut c2, &mut n2)
        };
        for (cj, &xj) in c.iter_mut().zip(row) {
            *cj = (*cj * *n + f64::from(xj)) / (*n + 1.0);
        }
        *n += 1.0;
    }
    let mut normal: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a - b).collect();
    let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        normal.iter_mut().for_each(|v| *v /= norm);
    }
    let mid: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| 0.5 * (a + b)).collect();
    let offset = -dot(&normal, &mid);
    (normal, offset)
}

/// Fraction of the exact top-k present in the approximate top-k.
pub fn recall(exact: &NeighborList, approx: &NeighborList) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let truth: std::collections::HashSet<TokenId> = exact.ids().collect();
    approx.ids().filter(|id| truth.contains(id)).count() as f64 / exact.len() as f64
}
