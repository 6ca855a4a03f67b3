use thiserror::Error;

/// Errors shared across the simulator modules.
///
/// Config validation failures carry a distinct variant each so callers can
/// map them to stable diagnostics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("pipeline needs at least 2 stages, got {0}")]
    StageCountTooSmall(usize),
    #[error("micro-batch count must be >= 1, got {0}")]
    MicroBatchCountTooSmall(usize),
    #[error("lambda must be > 0, got {0}")]
    NonPositiveLambda(f64),
    #[error("{name} must be >= 1, got {value}")]
    CountTooSmall { name: &'static str, value: usize },
    #[error("policy {0:?} requires a lambda value")]
    MissingLambda(crate::config::PolicyKind),

    #[error("staleness degree must be >= 0")]
    NegativeDelta,
    #[error("significance must lie in (0, 1], got {0}")]
    SignificanceOutOfRange(f64),
    #[error("forward resolution for stage {stage} mini-batch {mini_batch} was never recorded")]
    UnknownVersion { stage: usize, mini_batch: usize },

    #[error("no live version {version_id} at stage {stage} (policy bug)")]
    MissingVersion { stage: usize, version_id: u64 },
    #[error("commit at stage {stage} must use version {expected}, got {got}")]
    NonMonotonicVersion { stage: usize, expected: u64, got: u64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no cached forward activations for stage {stage} mini-batch {mini_batch} micro-batch {micro_batch}")]
    MissingForwardCache {
        stage: usize,
        mini_batch: usize,
        micro_batch: usize,
    },
    #[error("dataset size {n} is not divisible by mini_batches*micro_batches = {parts}")]
    UnevenDataset { n: usize, parts: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
