//! Error type shared by the whole crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible shapes between inputs.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid argument or state (non-negativity, range, coding checks).
    #[error("validation error: {0}")]
    Validation(String),

    /// An operation that is not defined for the given input.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A custom loss reported negative curvature at an evaluated point.
    #[error("convexity violation: custom loss curvature {curvature} < 0 at eta = {eta}")]
    Convexity { eta: f64, curvature: f64 },

    /// A factorization or solve failed (singular or indefinite system).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The stationary batch solver hit its iteration cap. Carries the
    /// per-column relative residuals at the final iterate. With a valid
    /// element-wise-max template and a positive diagonal shift this is an
    /// internal-consistency failure rather than an expected outcome.
    #[error("stationary solver did not converge within {max_iters} iterations (worst relative residual {worst:.3e})")]
    StationaryNonConvergence {
        max_iters: usize,
        worst: f64,
        residuals: Vec<f64>,
    },

    /// An iterative fit ran out of iterations.
    #[error("failed to converge: {0}")]
    NonConvergence(String),

    /// The active set for a problem would exceed the configured cap.
    #[error(
        "active-set capacity exceeded for problem {problem}: {needed} features required but \
         s_max = {s_max}; raise s_max or increase lambda1"
    )]
    Capacity {
        problem: usize,
        needed: usize,
        s_max: usize,
    },

    /// Arithmetic overflow in an exact integer computation.
    #[error("integer overflow: {0}")]
    Overflow(String),
}

impl Error {
    /// Exit-code class used by the CLI: `true` for validation-type errors
    /// (exit 1), `false` for numerical failures (exit 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Validation(_)
                | Error::Unsupported(_)
                | Error::Capacity { .. }
                | Error::Overflow(_)
        )
    }
}
