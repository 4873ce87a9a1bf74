use thiserror::Error;

/// Errors produced by the streaming estimators and the federated protocol.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NonFinite(&'static str),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty state: {0}")]
    EmptyState(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(
        "design not yet identifiable: X'X singular after {buffered} records; \
         buffer more records before initializing"
    )]
    NotIdentifiable { buffered: usize },

    #[error("numerical degeneracy: update denominator {denom} <= 1e-12")]
    Degenerate { denom: f64 },

    #[error("degrees of freedom not positive: n = {n}, k = {k}")]
    InsufficientDof { n: usize, k: usize },

    #[error("cluster id required in cluster-seeded mode")]
    MissingClusterId,

    #[error("too few effective replicates: {got} < 2")]
    TooFewReplicates { got: usize },

    #[error("too few clusters: {got} < 2")]
    TooFewClusters { got: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("quorum not met: {received}/{expected} contributions (quorum {quorum})")]
    QuorumNotMet {
        received: usize,
        expected: usize,
        quorum: f64,
    },

    #[error("ingest error at line {line}: {message}")]
    Ingest { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
