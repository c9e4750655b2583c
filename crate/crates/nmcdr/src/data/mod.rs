//! Interaction-log ingestion, index spaces, overlap/density variants,
//! leave-one-out splits and negative sampling.

mod cross;
mod ingest;
mod split;

pub use cross::{apply_density, build_cross, overlap_subset_size, CrossDomainDataset};
pub use ingest::{ingest, parse_file, DomainIndex, DomainStats, InputFormat, Interaction};
pub use split::{
    eval_negatives, sample_negatives_with_rng, split, DomainSplit, SplitMode, SplitSpec,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One parsed interaction. Rating magnitude is carried through parsing but the
/// model consumes binary edges only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

#[derive(Error, Debug)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("failed to read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no users remain after filtering (min {min} interactions)")]
    EmptyAfterFilter { min: usize },
    #[error("density factor {0} outside (0, 1]")]
    BadDensity(f64),
    #[error("overlap ratio {0} outside [0, 1]")]
    BadOverlapRatio(f64),
    #[error("user {user} has {eligible} eligible negatives, need {need}")]
    CatalogTooSmall { user: usize, eligible: usize, need: usize },
    #[error("unknown input format {0:?} (expected tsv-ratings or csv-ratings)")]
    UnknownFormat(String),
}
