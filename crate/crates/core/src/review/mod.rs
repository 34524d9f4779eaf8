//! Review service: serves rendered fits to annotators and records their
//! accept/reject verdicts in an append-only log next to the manifest.

mod assets;
mod server;
mod verdicts;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fitting::Energies;
use crate::pipeline::{PipelineError, Status};

pub use assets::{is_asset_hash, prepare_review_assets, render_turned, AssetRef, AssetStore, ReviewAssets, REVIEW_AZIMUTHS};
pub use server::{ReviewConfig, ReviewService, Stats, VerdictOutcome};
pub use verdicts::{read_verdicts, replay, verdict_log_path, Decision, Verdict, VerdictLog, VerdictRequest};

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Label(#[from] crate::labelgen::LabelError),
    #[error(transparent)]
    Model(#[from] crate::body_model::ModelError),
    #[error("asset: {0}")]
    Asset(String),
    #[error("sample {0} has no fit")]
    MissingFit(String),
    #[error("unknown sample {0}")]
    UnknownSample(String),
    #[error("malformed verdict: {0}")]
    Malformed(String),
    #[error("sample {id} is leased by {holder}")]
    Leased { id: String, holder: String },
    #[error("verdict log {path}: {message}")]
    Log { path: PathBuf, message: String },
    #[error("review service is shutting down")]
    Closed,
}

impl ReviewError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ReviewError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub annotator: String,
    /// Unix time in milliseconds.
    pub expires_ms: u64,
}

/// One fitted sample as shown to an annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub status: Status,
    pub fit: String,
    #[serde(flatten)]
    pub assets: ReviewAssets,
    pub energies: Energies,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lease: Option<Lease>,
}

pub(crate) fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
