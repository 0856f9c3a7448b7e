//! Core library: word embeddings, nearest-neighbour search, the dx-privacy
//! sanitization mechanism, quality features and the utility regressor.

pub mod ann;
pub mod api;
pub mod embedding;
pub mod mechanism;
pub mod quality;
pub mod regressor;
pub mod replication;
pub mod rng;
pub mod text;

pub use ann::{AnnIndex, AnnParams};
pub use embedding::{EmbeddingModel, Neighbor, NeighborList, QueryKind, TokenId};
pub use mechanism::{Mechanism, NnBackend, OovPolicy, SanitizationConfig, SanitizedText, Variant};
pub use quality::{FeatureExtractor, FeatureVector, TextEmbeddingProvider};
pub use regressor::{EvalReport, FeatureSet, GbdtModel};
