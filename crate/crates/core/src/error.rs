//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or expression shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A named graph leaf had no tensor bound at evaluation time.
    #[error("unbound leaf '{0}'")]
    UnboundLeaf(String),

    /// A gradient was requested for a name that is not a leaf of the graph.
    #[error("leaf '{0}' not found in expression")]
    LeafNotFound(String),

    /// Evaluation produced a NaN or infinity.
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: u64, op: String },

    /// backward_grads requires a scalar-valued root expression.
    #[error("gradient root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    /// Matrix is singular to working precision (LU pivot underflow).
    #[error("singular matrix: |pivot| = {pivot:.3e} at column {col}")]
    SingularMatrix { pivot: f64, col: usize },

    /// Bisection could not bracket a root inside the analytic bounds.
    #[error("bisection failed to bracket target {target:.6e} in [{lo:.3e}, {hi:.3e}]")]
    BisectionBracket { target: f64, lo: f64, hi: f64 },

    /// Bisection hit the iteration cap before reaching tolerance.
    #[error("bisection hit iteration cap {cap} (interval width {width:.3e})")]
    BisectionCap { cap: usize, width: f64 },

    /// Transform parameters left their numerically safe region.
    #[error("parameter blow-up: {0}")]
    ParamBlowUp(String),

    /// Configuration or precondition violation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Dataset contents violate their declared contract.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Persisted-file format violation (bad magic, truncation, dtype).
    #[error("file format error: {0}")]
    Format(String),

    /// Training diverged; the message names the first offending layer.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
