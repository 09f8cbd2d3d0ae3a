use crate::roles::RoleKind;
use thiserror::Error;

/// Structural errors on the search tree.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("Q-value queried on a node with no rewards (id {0})")]
    EmptyRewards(usize),
    #[error("empty path")]
    EmptyPath,
    #[error("node {0} is already expanded")]
    AlreadyExpanded(usize),
    #[error("node {0} is at the depth limit")]
    DepthLimit(usize),
}

/// Typed parse failures for role outputs. Parsers never panic; every bad
/// input maps onto one of these.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("not a numeric literal: {0:?}")]
    NotNumeric(String),
    #[error("value {0} outside [0,1]")]
    OutOfRange(String),
    #[error("expected a single rating 1-4, got {0:?}")]
    BadRating(String),
    #[error("expected YES or NO, got {0:?}")]
    BadYesNo(String),
    #[error("malformed cluster list: {0}")]
    BadClusterList(String),
    #[error("cluster record missing key {0:?}")]
    MissingKey(&'static str),
    #[error("non-positive cluster count")]
    NonPositiveCount,
    #[error("unbound placeholder {0:?}")]
    UnboundPlaceholder(String),
}

/// A role invocation that failed after exhausting retries.
#[derive(Debug, Error)]
#[error("{role:?} role failed: {message}")]
pub struct RoleError {
    pub role: RoleKind,
    pub message: String,
    pub retryable: bool,
}

impl RoleError {
    pub fn new(role: RoleKind, message: impl Into<String>) -> Self {
        Self { role, message: message.into(), retryable: false }
    }
}

/// HTTP transport failures, with retry eligibility.
#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request failed: {0}")]
    Request(String),
    #[error("endpoint returned status {0}")]
    Status(u16),
    #[error("response schema mismatch: {0}")]
    Schema(String),
}

impl TransportError {
    /// 5xx and connection-level failures are retryable; schema mismatches
    /// and client errors are not.
    pub fn retryable(&self) -> bool {
        match self {
            TransportError::Request(_) => true,
            TransportError::Status(code) => *code >= 500 || *code == 429,
            TransportError::Schema(_) => false,
        }
    }
}

/// Configuration rejected before any LLM call.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Role(#[from] RoleError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
