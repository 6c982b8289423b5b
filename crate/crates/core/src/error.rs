use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension {0} (only d = 2 and d = 3)")]
    UnsupportedDimension(usize),
    #[error("domain with d = {d}, k = {k} exceeds the addressable index range")]
    DomainTooLarge { d: usize, k: u32 },
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid direction coding: {0}")]
    Alpha(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("illegal toppling at site {site}: height {height} below threshold {threshold}")]
    IllegalToppling { site: usize, height: f64, threshold: f64 },
    #[error("vertex {0:?} is outside the domain")]
    OutsideDomain([i32; 3]),
    #[error("configuration is not stable")]
    Unstable,
    #[error("height {height} at site {site} is out of range")]
    HeightOutOfRange { site: usize, height: f64 },
    #[error("configuration has length {got}, domain has {expected} sites")]
    LengthMismatch { expected: usize, got: usize },
    #[error("configuration is not allowed")]
    NotAllowed,
    #[error("not a spanning tree: {0}")]
    NotATree(String),
    #[error("inconsistent tree paths: {0}")]
    InconsistentPaths(String),
    #[error("{what} needs {needed} states, limit is {limit}")]
    TooLarge { what: &'static str, needed: u128, limit: u128 },
    #[error("empty path")]
    EmptyPath,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
