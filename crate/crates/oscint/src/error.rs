use thiserror::Error;

/// Crate-wide error type.
///
/// Numerical routines distinguish between *recoverable quality problems*
/// (e.g. a partition that did not reach the requested balance, which still
/// carries the best result found) and hard failures (domain misuse,
/// degenerate geometry, solver divergence).
#[derive(Debug, Error)]
pub enum OscError {
    /// A request for a named builtin that does not exist, or a builtin used
    /// at an unsupported dimension.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Inputs outside the documented domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The phase is rank-deficient / degenerate where a construction needs
    /// nondegeneracy (e.g. the mixed Hessian loses rank).
    #[error("degenerate phase: {0}")]
    DegeneratePhase(String),

    /// A geometric configuration violates a structural precondition
    /// (wrong subspace dimensions, rank-deficient normal families, ...).
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    /// An iterative solver failed to reach its residual target.
    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    /// A grid or mesh is too coarse for the requested computation.
    #[error("resolution too coarse: {0}")]
    Resolution(String),

    /// An explicit budget (ball count, node count, memory) was exceeded.
    #[error("budget exceeded: {0}")]
    Budget(String),

    /// Structurally inconsistent data passed between stages
    /// (mismatched dimensions, field/grid disagreement, ...).
    #[error("inconsistent data: {0}")]
    Inconsistent(String),

    /// Derivative estimation or another numeric estimate failed its own
    /// internal reliability test.
    #[error("ill-conditioned computation: {0}")]
    Conditioning(String),

    /// A partition search exhausted its restarts; the payload carries the
    /// best partition found so callers can still inspect it.
    #[error("partition quality target missed: {reason}")]
    PartitionQuality {
        reason: String,
        best: Box<crate::partition::PartitionResult>,
    },

    /// A least-squares / power-law fit could not be performed.
    #[error("fit failed: {0}")]
    Fit(String),

    /// Serialization / file I/O problems for reports and field exports.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON encoding/decoding problems.
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OscError>;
