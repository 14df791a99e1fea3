use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what} is not a probability vector (sum {sum}, min {min})")]
    NotOnSimplex {
        what: &'static str,
        sum: f64,
        min: f64,
    },

    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("trajectory enumeration refused: {requested} trajectories exceeds the cap of {cap}")]
    EnumerationCap { requested: u128, cap: u64 },

    #[error("unknown environment '{0}' (valid: virus, malware, invest)")]
    UnknownEnv(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("context {context} has total responsibility {mass:e}, below the degeneracy threshold")]
    DegenerateContext { context: usize, mass: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("activation cache is stale (network parameters changed since the forward pass)")]
    StaleCache,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("coordinate ({lon}, {lat}) lies outside the grid bounding box")]
    OutOfBox { lon: f64, lat: f64 },

    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
