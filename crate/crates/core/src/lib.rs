//! Simultaneous training of elastic-net regularized generalized linear models.
//!
//! A typical analysis fits thousands of closely related models on one dataset:
//! cross-validation folds, bootstrap replicates, permutation-test surrogates.
//! This crate solves the whole family at once. Each problem `k` minimizes
//!
//! ```text
//! J_k(w) = l_k(w) + lambda1 * ||w||_1 + lambda2 * ||w||_2^2
//! ```
//!
//! where `l_k` is a trial-weighted GLZ negative log-likelihood (or a generic
//! convex loss). The family is encoded by `n x K` matrices `D` (trial weights)
//! and `Y` (responses) over a shared `p x n` data matrix `X`.
//!
//! The solver combines:
//! - a reduced-space Newton step (solutions live in the column space of `X`,
//!   so all linear systems are `r x r` with `r = min(p, n)`),
//! - a single template matrix factorization shared across all `K` problems,
//!   corrected per problem by a stationary iteration ([`newton`]),
//! - ADMM variable splitting for the l1 / group-lasso part with
//!   memory-efficient sparse active-set state ([`admm`]),
//! - screening and KKT verification to keep per-problem active sets small,
//! - warm-started regularization paths ([`path`]).
//!
//! [`oracle`] holds independent single-problem reference solvers used to
//! validate the fast paths, and [`tsreg`] applies the same batched template
//! machinery to frequency-domain generalized least squares for time series.

pub mod admm;
pub mod error;
pub mod glz;
pub mod newton;
pub mod oracle;
pub mod path;
pub mod problems;
pub mod sparse;
pub mod synth;
pub mod tsreg;

pub use admm::{
    estimate_memory, fastglz_fit, group_prox, objective_value, soft_threshold, AdmmConfig,
    AdmmEngine, AdmmState, FitResult,
};
pub use error::{Error, Result};
pub use glz::{ConvexLoss, GlzFamily, Linearization};
pub use newton::{
    build_template, ridge_irls_fit, spectral_radius_estimate, stationary_solve_batch, thin_qr,
    NewtonBatch, QrFactors, TemplateSystem,
};
pub use path::{fit_path, lambda_grid, lambda_max, PathConfig, PathPoint, PathResult};
pub use problems::{
    bootstrap_family, compose_product, cv_family, permutation_family, ProblemFamily, ProblemTag,
};
pub use sparse::SparseVec;
