//! Sparse simultaneous trainer: ADMM variable splitting with the batched
//! reduced-space Newton w-step.
//!
//! Each problem minimizes `J_k(w) = l_k(w) + lambda1 ||w||_1 + lambda2 ||w||_2^2`
//! (or a group-lasso penalty in place of the l1 term). ADMM splits `w = v`,
//! and the cycle is run in the reparameterized form
//!
//! ```text
//! w_k <- argmin_w  l_k(w) + rho ||w||^2 - l_k' w        (rho = lambda2 + 1/(2 mu))
//! l_k <- l_k - (2/mu) w_k
//! v_k <- -mu soft(l_k, lambda1)                         (or the group prox)
//! l_k <- l_k + (2/mu) v_k
//! ```
//!
//! The w-minimization runs in reduced coordinates: `w_k = Q a_k +
//! (1/(2 rho)) (I - P_Q) l_k` where `a_k` solves
//! `(Z R_k Z' + 2 rho I) a_k = Z b_k + Q' l_k`, solved for all problems at
//! once by the template machinery in [`crate::newton`].
//!
//! Full `p`-vectors are never stored. Per problem the state is `a_k = Q' w_k`,
//! `beta_k = Q' l_k`, and the entries of `l_k`, `v_k` on the active set `A_k`
//! (estimated by screening, certified and grown by KKT checks). The `l` and
//! `beta` updates touch only active rows of `Q`:
//!
//! ```text
//! l    <- (1 - 1/(mu rho)) l + (2/mu) Q ((1/(2 rho)) beta - a)   (rows in A_k)
//! beta <- beta - (2/mu) a
//! v    <- prox on A_k;  l <- l + (2/mu) v;  beta <- beta + (2/mu) Q' v
//! ```
//!
//! When a feature enters `A_k` later (KKT expansion, path re-screening), its
//! `l` entry is initialized to the range prediction `q_j' beta` — this
//! redefines the implicit full `l`, which is a valid ADMM restart for the
//! convex problem. Feasibility `||w - v||_inf` is measured on the active set,
//! where both iterates are represented; optimality of the reported `v_k` over
//! all `p` features is certified by the full-gradient KKT check.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::glz::GlzFamily;
use crate::newton::{batched_smooth_newton, thin_qr, QrFactors};
use crate::problems::ProblemFamily;
use crate::sparse::SparseVec;

const PAR_THRESHOLD: usize = 8;

/// `sgn(a) * max(|a| - t, 0)`.
pub fn soft_threshold(a: f64, t: f64) -> f64 {
    if a > t {
        a - t
    } else if a < -t {
        a + t
    } else {
        0.0
    }
}

/// Group-lasso proximity update for one block:
/// `-mu * (1 - lambda1 / ||l||_2)_+ * l`, with the zero block mapping to zero.
///
/// Singleton blocks are computed through scalar soft-thresholding so the 1-D
/// reduction `group_prox([l]) = -mu * soft(l, lambda1)` holds exactly.
pub fn group_prox(l_block: &[f64], lambda1: f64, mu: f64) -> Vec<f64> {
    if l_block.len() == 1 {
        return vec![-mu * soft_threshold(l_block[0], lambda1)];
    }
    let norm = l_block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || norm <= lambda1 {
        return vec![0.0; l_block.len()];
    }
    let scale = -mu * (1.0 - lambda1 / norm);
    l_block.iter().map(|&v| scale * v).collect()
}

/// Peak working-set memory of a simultaneous fit, in bytes:
/// `(64 s_max + 40 n + 32 min(p,n) + 40) K + 8 p n + 24 n min(p,n) + 16 min(p,n)^2`.
///
/// The `K`-proportional part covers per-problem state (sparse `l`, `v`,
/// reduced `a`, `beta`, bookkeeping); the rest is the shared data matrix,
/// its factors, and the template. Overflow-checked.
pub fn estimate_memory(p: u64, n: u64, s_max: u64, k: u64) -> Result<u64> {
    if p < 1 || n < 1 {
        return Err(Error::Validation(format!(
            "estimate_memory needs p >= 1 and n >= 1, got p = {p}, n = {n}"
        )));
    }
    let m = p.min(n);
    let err = || Error::Overflow("memory estimate exceeds u64".into());
    let per_problem = 64u64
        .checked_mul(s_max)
        .and_then(|t| t.checked_add(40u64.checked_mul(n)?))
        .and_then(|t| t.checked_add(32u64.checked_mul(m)?))
        .and_then(|t| t.checked_add(40))
        .ok_or_else(err)?;
    let shared = 8u64
        .checked_mul(p)
        .and_then(|t| t.checked_mul(n))
        .and_then(|t| t.checked_add(24u64.checked_mul(n)?.checked_mul(m)?))
        .and_then(|t| t.checked_add(16u64.checked_mul(m)?.checked_mul(m)?))
        .ok_or_else(err)?;
    per_problem
        .checked_mul(k)
        .and_then(|t| t.checked_add(shared))
        .ok_or_else(err)
}

/// Configuration of a simultaneous sparse fit.
#[derive(Debug, Clone)]
pub struct AdmmConfig {
    /// l1 (or group-lasso) penalty weight.
    pub lambda1: f64,
    /// Squared-l2 penalty weight.
    pub lambda2: f64,
    /// ADMM penalty parameter override. When unset, `mu` defaults to
    /// `1 / max(lambda2, lambda1, 1e-3)`, which keeps
    /// `rho = lambda2 + 1/(2 mu)` near the penalty scale (and tracks the
    /// penalties along a regularization path).
    pub mu_override: Option<f64>,
    /// Active-set cap per problem; exceeding it is a capacity error.
    pub s_max: usize,
    /// Relative objective-change tolerance of the outer loop.
    pub outer_tol: f64,
    /// Outer cycle cap; exceeding it returns partial results flagged
    /// `converged = false`.
    pub max_outer: usize,
    /// Gradient tolerance of the inner Newton minimization of the w-step.
    pub newton_tol: f64,
    /// Inner Newton round cap per w-step.
    pub max_newton: usize,
    /// Relative residual tolerance of the stationary batch solver.
    pub stat_tol: f64,
    /// Sweep cap of the stationary batch solver.
    pub stat_max_iters: usize,
    /// Feasibility tolerance: require `||w - v||_inf <= feas_tol * (1 + ||v||_inf)`
    /// on the active set.
    pub feas_tol: f64,
    /// KKT slack: inactive features must satisfy
    /// `|grad_j| <= lambda1 * (1 + kkt_tol)` and active features
    /// `|grad_j + 2 lambda2 v_j + lambda1 sgn(v_j)| <= kkt_tol * max(1, lambda1)`.
    pub kkt_tol: f64,
    /// Optional disjoint feature groups for the group-lasso penalty; features
    /// not covered are treated as singleton groups. Mutually exclusive with
    /// screening: group fits keep all features active (requires `s_max >= p`).
    pub groups: Option<Vec<Vec<usize>>>,
    /// Optional per-feature l1 mask (`false` exempts a feature, e.g. a bias
    /// term, from the l1/group penalty; lambda2 still applies). Unmasked
    /// features are always kept active.
    pub penalty_mask: Option<Vec<bool>>,
}

impl AdmmConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        AdmmConfig {
            lambda1,
            lambda2,
            mu_override: None,
            s_max: usize::MAX,
            outer_tol: 1e-7,
            max_outer: 2000,
            newton_tol: 1e-9,
            max_newton: 20,
            stat_tol: 1e-9,
            // the splitting converges whenever the template dominates, but its
            // linear rate degrades as the curvature spread across problems
            // grows (many zero trial weights); the cap only guards against
            // internal inconsistency, so it is set far above typical sweep
            // counts
            stat_max_iters: 100_000,
            feas_tol: 1e-7,
            kkt_tol: 1e-6,
            groups: None,
            penalty_mask: None,
        }
    }

    /// Effective ADMM penalty parameter.
    pub fn mu(&self) -> f64 {
        self.mu_override
            .unwrap_or_else(|| 1.0 / self.lambda2.max(self.lambda1).max(1e-3))
    }

    /// Penalty parameter of the w-subproblem, recomputed so it can never go
    /// stale: `rho = lambda2 + 1/(2 mu)`.
    pub fn rho(&self) -> f64 {
        self.lambda2 + 0.5 / self.mu()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Validation(format!(
                "penalties must be non-negative: lambda1 = {}, lambda2 = {}",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.mu() > 0.0) {
            return Err(Error::Validation(format!(
                "mu must be positive, got {}",
                self.mu()
            )));
        }
        for (name, v) in [
            ("outer_tol", self.outer_tol),
            ("newton_tol", self.newton_tol),
            ("stat_tol", self.stat_tol),
            ("feas_tol", self.feas_tol),
            ("kkt_tol", self.kkt_tol),
        ] {
            if !(v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(mask) = &self.penalty_mask {
            if mask.len() != p {
                return Err(Error::Validation(format!(
                    "penalty mask has {} entries for {p} features",
                    mask.len()
                )));
            }
        }
        if let Some(groups) = &self.groups {
            let mut seen = vec![false; p];
            for (gi, g) in groups.iter().enumerate() {
                if g.is_empty() {
                    return Err(Error::Validation(format!("group {gi} is empty")));
                }
                for &j in g {
                    if j >= p {
                        return Err(Error::Validation(format!(
                            "group {gi} references feature {j} but p = {p}"
                        )));
                    }
                    if seen[j] {
                        return Err(Error::Validation(format!(
                            "feature {j} appears in more than one group"
                        )));
                    }
                    seen[j] = true;
                }
            }
            if self.s_max < p {
                return Err(Error::Validation(format!(
                    "group-lasso fits keep all {p} features active; s_max = {} is too small",
                    self.s_max
                )));
            }
        }
        Ok(())
    }
}

/// Result of one problem's fit.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    /// Converged sparse weights (the ADMM `v_k`).
    pub weights: SparseVec,
    /// Objective `l_k(w) + lambda1 ||w||_1 + lambda2 ||w||_2^2` at the
    /// reported weights (likelihood constants in `y` are excluded).
    pub objective: f64,
    /// Outer cycles (ADMM) or Newton rounds (ridge) consumed.
    pub iterations: usize,
    pub converged: bool,
    /// Support size of the reported weights.
    pub active_size: usize,
    /// Scaled worst KKT violation at the reported weights.
    pub kkt_residual: f64,
    /// Whether any linearization hit the exponential cap (Poisson).
    pub saturated: bool,
}

/// Resolved penalty structure: per-feature l1 mask plus optional blocks.
struct PenaltyLayout {
    mask: Vec<bool>,
    /// When grouped: all blocks (declared groups plus singletons for
    /// uncovered features), and the block id of every feature.
    blocks: Option<Vec<Vec<usize>>>,
    feature_block: Vec<usize>,
}

impl PenaltyLayout {
    fn new(p: usize, config: &AdmmConfig) -> Self {
        let mask = config
            .penalty_mask
            .clone()
            .unwrap_or_else(|| vec![true; p]);
        match &config.groups {
            None => PenaltyLayout {
                mask,
                blocks: None,
                feature_block: Vec::new(),
            },
            Some(groups) => {
                let mut blocks: Vec<Vec<usize>> = groups.clone();
                let mut covered = vec![false; p];
                for g in groups {
                    for &j in g {
                        covered[j] = true;
                    }
                }
                for j in 0..p {
                    if !covered[j] {
                        blocks.push(vec![j]);
                    }
                }
                let mut feature_block = vec![0usize; p];
                for (bi, b) in blocks.iter().enumerate() {
                    for &j in b {
                        feature_block[j] = bi;
                    }
                }
                PenaltyLayout {
                    mask,
                    blocks: Some(blocks),
                    feature_block,
                }
            }
        }
    }

    /// l1/group penalty value (without the lambda1 factor) of sparse weights.
    fn penalty_norm(&self, pairs: &[(usize, f64)]) -> f64 {
        match &self.blocks {
            None => pairs
                .iter()
                .filter(|(j, _)| self.mask[*j])
                .map(|(_, v)| v.abs())
                .sum(),
            Some(_) => {
                // group norm: accumulate squared norms per block
                let mut acc: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
                for &(j, v) in pairs {
                    if self.mask[j] {
                        *acc.entry(self.feature_block[j]).or_insert(0.0) += v * v;
                    }
                }
                acc.values().map(|s| s.sqrt()).sum()
            }
        }
    }
}

/// Per-problem ADMM state in reduced + active-set coordinates.
#[derive(Debug, Clone)]
pub struct AdmmProblemState {
    /// `Q' w_k`.
    pub alpha: DVector<f64>,
    /// `Q' l_k` (the shadow of the implicit full multiplier variable).
    pub beta: DVector<f64>,
    /// Active feature indices, strictly increasing.
    pub active: Vec<usize>,
    /// Entries of `l_k` on the active set.
    pub l: Vec<f64>,
    /// Entries of `v_k` on the active set (support of the sparse iterate).
    pub v: Vec<f64>,
    /// Snapshot of `w_k` on the active set taken right after the w-step.
    pub w_active: Vec<f64>,
    /// Objective `J_k(v_k)` after the last completed cycle.
    pub objective: f64,
    /// `max_j |w_j - v_j|` over the active set after the last cycle.
    pub feas: f64,
    /// Scaled worst KKT violation from the most recent check.
    pub kkt_residual: f64,
    pub converged: bool,
    /// Cycle count at which this problem converged (or the current count).
    pub cycles: usize,
    /// Total inner Newton solves consumed.
    pub newton_steps: usize,
    pub saturated: bool,
    /// Reduced linearization point whose solve produced the current `alpha`
    /// (diagnostic for the quadratic-stationarity property).
    pub last_lin_alpha: DVector<f64>,
}

impl AdmmProblemState {
    fn position(&self, feature: usize) -> Option<usize> {
        self.active.binary_search(&feature).ok()
    }

    /// Current sparse weights (the `v` iterate) as index/value pairs.
    fn v_pairs(&self) -> Vec<(usize, f64)> {
        self.active
            .iter()
            .copied()
            .zip(self.v.iter().copied())
            .filter(|(_, v)| *v != 0.0)
            .collect()
    }
}

/// Mutable state of a whole batch fit.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub problems: Vec<AdmmProblemState>,
    /// Latest curvature diagonal per problem (`n x K`): the template source.
    pub r_cols: DMatrix<f64>,
    /// Completed outer cycles.
    pub cycles: usize,
}

impl AdmmState {
    /// Clears convergence flags (used when re-entering with new penalties).
    pub fn reset_convergence(&mut self) {
        for p in &mut self.problems {
            p.converged = false;
        }
        self.cycles = 0;
    }
}

/// Sequential strong rule: features whose loss gradient at the previous
/// solution exceeds `2 lambda1_new - lambda1_prev` survive, unioned with the
/// support of the previous solution (and any l1-exempt features). Screening
/// is heuristic; the KKT check re-admits anything it missed.
///
/// More survivors than `s_max` is a capacity error (raise `s_max` or
/// `lambda1`).
pub fn strong_rule_screen(
    x: &DMatrix<f64>,
    family: &GlzFamily,
    d: &DVector<f64>,
    y: &DVector<f64>,
    lambda1_new: f64,
    lambda1_prev: f64,
    w_prev: &SparseVec,
    s_max: usize,
    penalty_mask: Option<&[bool]>,
) -> Result<Vec<usize>> {
    if lambda1_new > lambda1_prev {
        return Err(Error::Validation(format!(
            "sequential screening needs lambda1_new <= lambda1_prev, got {lambda1_new} > {lambda1_prev}"
        )));
    }
    let n = x.ncols();
    let mut eta = DVector::zeros(n);
    for (j, wj) in w_prev.iter() {
        for i in 0..n {
            eta[i] += wj * x[(j, i)];
        }
    }
    let lin = family.linearize(&eta, d, y)?;
    let grad = x * &lin.e;
    screen_from_gradient(&grad, lambda1_new, lambda1_prev, w_prev, s_max, penalty_mask, 0)
}

fn screen_from_gradient(
    grad: &DVector<f64>,
    lambda1_new: f64,
    lambda1_prev: f64,
    w_prev: &SparseVec,
    s_max: usize,
    penalty_mask: Option<&[bool]>,
    problem: usize,
) -> Result<Vec<usize>> {
    let p = grad.len();
    let threshold = 2.0 * lambda1_new - lambda1_prev;
    let mut keep = vec![false; p];
    for j in 0..p {
        let penalized = penalty_mask.map_or(true, |m| m[j]);
        // strict comparison: at the path head (both lambdas equal the
        // maximal gradient) nothing survives
        keep[j] = !penalized || grad[j].abs() > threshold;
    }
    for (j, _) in w_prev.iter() {
        keep[j] = true;
    }
    let survivors: Vec<usize> = (0..p).filter(|&j| keep[j]).collect();
    if survivors.len() > s_max {
        return Err(Error::Capacity {
            problem,
            needed: survivors.len(),
            s_max,
        });
    }
    Ok(survivors)
}

/// Top-level simultaneous sparse fit: screening, warm ADMM cycles, KKT
/// expansion, one [`FitResult`] per problem.
pub fn fastglz_fit(
    x: &DMatrix<f64>,
    family: &GlzFamily,
    problems: &ProblemFamily,
    config: &AdmmConfig,
) -> Result<Vec<FitResult>> {
    let engine = AdmmEngine::new(x, family, problems)?;
    engine.fit(config)
}

/// Exact objective `l_k(w) + lambda1 * pen(w) + lambda2 ||w||_2^2` of sparse
/// weights for one problem (`pen` is the l1 norm or the group norm per the
/// config, honoring the penalty mask).
pub fn objective_value(
    x: &DMatrix<f64>,
    weights: &SparseVec,
    family: &GlzFamily,
    d: &DVector<f64>,
    y: &DVector<f64>,
    config: &AdmmConfig,
) -> Result<f64> {
    let n = x.ncols();
    if weights.dim != x.nrows() {
        return Err(Error::Dimension(format!(
            "weights have dimension {} but X has {} features",
            weights.dim,
            x.nrows()
        )));
    }
    let mut eta = DVector::zeros(n);
    for (j, wj) in weights.iter() {
        for i in 0..n {
            eta[i] += wj * x[(j, i)];
        }
    }
    let layout = PenaltyLayout::new(x.nrows(), config);
    let pairs: Vec<(usize, f64)> = weights.iter().collect();
    Ok(family.negloglik(&eta, d, y)?
        + config.lambda1 * layout.penalty_norm(&pairs)
        + config.lambda2 * weights.norm2_sq())
}

/// Shared immutable context of one batch fit: data matrix, family, problem
/// family, and the QR factors (computed once).
pub struct AdmmEngine<'a> {
    x: &'a DMatrix<f64>,
    family: &'a GlzFamily,
    problems: &'a ProblemFamily,
    qr: QrFactors,
    /// `Q'` stored row-major-contiguously (`r x p`): active-set updates read
    /// whole rows of `Q`.
    qt: DMatrix<f64>,
    /// `X'` (`n x p`): contiguous per-feature columns for sparse products.
    xt: DMatrix<f64>,
}

impl<'a> AdmmEngine<'a> {
    pub fn new(
        x: &'a DMatrix<f64>,
        family: &'a GlzFamily,
        problems: &'a ProblemFamily,
    ) -> Result<Self> {
        problems.validate()?;
        if x.ncols() != problems.n() {
            return Err(Error::Dimension(format!(
                "X has {} trials but the family has {}",
                x.ncols(),
                problems.n()
            )));
        }
        for k in 0..problems.k() {
            family.validate_response(&problems.y.column(k).into())?;
        }
        let qr = thin_qr(x)?;
        let qt = qr.q.transpose();
        let xt = x.transpose();
        Ok(AdmmEngine {
            x,
            family,
            problems,
            qr,
            qt,
            xt,
        })
    }

    pub fn p(&self) -> usize {
        self.x.nrows()
    }
    pub fn n(&self) -> usize {
        self.x.ncols()
    }
    pub fn k(&self) -> usize {
        self.problems.k()
    }
    pub fn qr(&self) -> &QrFactors {
        &self.qr
    }

    /// Largest l1 penalty with a nonzero gradient at zero: `max_{k,j} |grad_j l_k(0)|`
    /// over l1-penalized features.
    pub fn lambda1_max(&self, penalty_mask: Option<&[bool]>) -> Result<f64> {
        let mut worst = 0.0f64;
        for k in 0..self.k() {
            let d: DVector<f64> = self.problems.d.column(k).into();
            let y: DVector<f64> = self.problems.y.column(k).into();
            let lin = self.family.linearize(&DVector::zeros(self.n()), &d, &y)?;
            let grad = self.x * &lin.e;
            for j in 0..self.p() {
                if penalty_mask.map_or(true, |m| m[j]) {
                    worst = worst.max(grad[j].abs());
                }
            }
        }
        Ok(worst)
    }

    /// Initial active sets for a standalone fit: the basic strong rule per
    /// problem, anchored at that problem's own gradient bound
    /// `lambda1_max_k = max_j |grad_j l_k(0)|` (so one problem's data never
    /// influences another problem's screen). Group fits keep every feature
    /// active.
    pub fn screen_initial(&self, config: &AdmmConfig) -> Result<Vec<Vec<usize>>> {
        config.validate(self.p())?;
        if config.groups.is_some() {
            return Ok(vec![(0..self.p()).collect(); self.k()]);
        }
        let mask = config.penalty_mask.as_deref();
        let zero = SparseVec::zeros(self.p());
        (0..self.k())
            .map(|k| {
                let d: DVector<f64> = self.problems.d.column(k).into();
                let y: DVector<f64> = self.problems.y.column(k).into();
                let lin = self.family.linearize(&DVector::zeros(self.n()), &d, &y)?;
                let grad = self.x * &lin.e;
                let mut lmax_k = 0.0f64;
                for j in 0..self.p() {
                    if mask.map_or(true, |m| m[j]) {
                        lmax_k = lmax_k.max(grad[j].abs());
                    }
                }
                screen_from_gradient(
                    &grad,
                    config.lambda1,
                    lmax_k.max(config.lambda1),
                    &zero,
                    config.s_max,
                    mask,
                    k,
                )
            })
            .collect()
    }

    /// Sequential strong rule between path points: per problem, survivors of
    /// the gradient test at the previous solution, unioned with its support.
    /// `prev` holds the previous solutions (`None` means all-zero).
    pub fn screen_sequential(
        &self,
        config: &AdmmConfig,
        lambda1_prev: f64,
        prev: Option<&[SparseVec]>,
    ) -> Result<Vec<Vec<usize>>> {
        if config.groups.is_some() {
            return Ok(vec![(0..self.p()).collect(); self.k()]);
        }
        let mask = config.penalty_mask.as_deref();
        let zero = SparseVec::zeros(self.p());
        let sets: Result<Vec<Vec<usize>>> = (0..self.k())
            .map(|k| {
                let w_prev = prev.map_or(&zero, |ws| &ws[k]);
                let d: DVector<f64> = self.problems.d.column(k).into();
                let y: DVector<f64> = self.problems.y.column(k).into();
                let mut eta = DVector::zeros(self.n());
                for (j, wj) in w_prev.iter() {
                    eta.axpy(wj, &self.xt.column(j).into_owned(), 1.0);
                }
                let lin = self.family.linearize(&eta, &d, &y)?;
                let grad = self.x * &lin.e;
                screen_from_gradient(
                    &grad,
                    config.lambda1,
                    lambda1_prev,
                    w_prev,
                    config.s_max,
                    mask,
                    k,
                )
            })
            .collect();
        sets
    }

    /// Builds a fresh all-zero state over the given active sets.
    pub fn init_state(&self, active_sets: Vec<Vec<usize>>) -> Result<AdmmState> {
        if active_sets.len() != self.k() {
            return Err(Error::Dimension(format!(
                "{} active sets for {} problems",
                active_sets.len(),
                self.k()
            )));
        }
        let r = self.qr.r();
        let problems = active_sets
            .into_iter()
            .map(|mut active| {
                active.sort_unstable();
                active.dedup();
                let s = active.len();
                AdmmProblemState {
                    alpha: DVector::zeros(r),
                    beta: DVector::zeros(r),
                    active,
                    l: vec![0.0; s],
                    v: vec![0.0; s],
                    w_active: vec![0.0; s],
                    objective: f64::INFINITY,
                    feas: 0.0,
                    kkt_residual: f64::INFINITY,
                    converged: false,
                    cycles: 0,
                    newton_steps: 0,
                    saturated: false,
                    last_lin_alpha: DVector::zeros(r),
                }
            })
            .collect();
        Ok(AdmmState {
            problems,
            r_cols: DMatrix::zeros(self.n(), self.k()),
            cycles: 0,
        })
    }

    /// Re-screens an existing state for a new penalty level (path step),
    /// keeping the carried `l`/`v` entries and initializing entries of newly
    /// admitted features to their range prediction `q_j' beta`.
    pub fn rescreen_state(
        &self,
        state: &mut AdmmState,
        config: &AdmmConfig,
        lambda1_prev: f64,
    ) -> Result<()> {
        if config.groups.is_some() {
            return Ok(()); // group fits already hold every feature
        }
        let prev: Vec<SparseVec> = state
            .problems
            .iter()
            .map(|p| SparseVec::from_pairs(self.p(), p.v_pairs()))
            .collect();
        let sets = self.screen_sequential(config, lambda1_prev, Some(&prev))?;
        for (prob, new_active) in state.problems.iter_mut().zip(sets) {
            let mut l = Vec::with_capacity(new_active.len());
            let mut v = Vec::with_capacity(new_active.len());
            for &j in &new_active {
                match prob.position(j) {
                    Some(pos) => {
                        l.push(prob.l[pos]);
                        v.push(prob.v[pos]);
                    }
                    None => {
                        l.push(self.qt.column(j).dot(&prob.beta));
                        v.push(0.0);
                    }
                }
            }
            prob.active = new_active;
            prob.l = l;
            prob.v = v;
            prob.w_active = vec![0.0; prob.active.len()];
        }
        state.reset_convergence();
        Ok(())
    }

    /// The ADMM w-step: batched inner Newton minimization of
    /// `S_k(w, l) = l_k(w) + rho ||w||^2 - l' w` for every unconverged
    /// problem, in reduced coordinates. Also snapshots `w` on each active set
    /// for the feasibility measure.
    pub fn w_step(&self, state: &mut AdmmState, config: &AdmmConfig) -> Result<()> {
        let rho = config.rho();
        let c = 2.0 * rho;
        let r = self.qr.r();
        let kk = self.k();
        let probs: Vec<usize> = (0..kk).filter(|&k| !state.problems[k].converged).collect();
        if probs.is_empty() {
            return Ok(());
        }
        let mut alphas = DMatrix::zeros(r, kk);
        let mut betas = DMatrix::zeros(r, kk);
        for (k, p) in state.problems.iter().enumerate() {
            alphas.set_column(k, &p.alpha);
            betas.set_column(k, &p.beta);
        }
        let outcome = batched_smooth_newton(
            &self.qr.z,
            self.family,
            &self.problems.d,
            &self.problems.y,
            &mut alphas,
            &mut state.r_cols,
            &probs,
            c,
            Some(&betas),
            config.newton_tol,
            config.max_newton,
            config.stat_tol,
            config.stat_max_iters,
        )?;
        for (i, &k) in probs.iter().enumerate() {
            let prob = &mut state.problems[k];
            prob.alpha = alphas.column(k).into();
            prob.last_lin_alpha = outcome.last_lin_alpha[i].clone();
            prob.newton_steps += outcome.iterations[i];
            prob.saturated |= outcome.saturated[i];
        }
        // snapshot w on the active set: w_j = q_j'a + (l_j - q_j'beta)/(2 rho)
        let qt = &self.qt;
        let snap = |prob: &mut AdmmProblemState| {
            for (pos, &j) in prob.active.iter().enumerate() {
                let qj = qt.column(j);
                prob.w_active[pos] =
                    qj.dot(&prob.alpha) + (prob.l[pos] - qj.dot(&prob.beta)) / (2.0 * rho);
            }
        };
        let mut touched: Vec<&mut AdmmProblemState> = state
            .problems
            .iter_mut()
            .filter(|p| !p.converged)
            .collect();
        if touched.len() >= PAR_THRESHOLD {
            touched.par_iter_mut().for_each(|p| snap(p));
        } else {
            touched.iter_mut().for_each(|p| snap(p));
        }
        Ok(())
    }

    /// The closed-form remainder of one ADMM cycle: multiplier update,
    /// proximal v-update, second multiplier update, shadow `beta` updates,
    /// feasibility, and the objective at the new `v`. Exposed separately from
    /// [`AdmmEngine::cycle`] so iterates can be inspected between the two
    /// halves.
    pub fn finish_cycle(&self, state: &mut AdmmState, config: &AdmmConfig) -> Result<()> {
        let rho = config.rho();
        let mu = config.mu();
        let decay = 1.0 - 1.0 / (mu * rho);
        let layout = PenaltyLayout::new(self.p(), config);
        let qt = &self.qt;
        let xt = &self.xt;
        let family = self.family;
        let d_cols = &self.problems.d;
        let y_cols = &self.problems.y;
        let lambda1 = config.lambda1;
        let lambda2 = config.lambda2;

        let run = |(k, prob): (usize, &mut AdmmProblemState)| -> Result<()> {
            let s = prob.active.len();
            // l <- decay * l + (2/mu) Q ((1/(2 rho)) beta - a), active rows only
            let mut u = prob.beta.clone() * (1.0 / (mu * rho));
            u.axpy(-2.0 / mu, &prob.alpha, 1.0);
            for (pos, &j) in prob.active.iter().enumerate() {
                prob.l[pos] = decay * prob.l[pos] + qt.column(j).dot(&u);
            }
            // beta <- beta - (2/mu) a
            let alpha = prob.alpha.clone();
            prob.beta.axpy(-2.0 / mu, &alpha, 1.0);

            // v <- prox on the active set
            match &layout.blocks {
                None => {
                    for pos in 0..s {
                        let j = prob.active[pos];
                        let t = if layout.mask[j] { lambda1 } else { 0.0 };
                        prob.v[pos] = -mu * soft_threshold(prob.l[pos], t);
                    }
                }
                Some(blocks) => {
                    // group fits keep all features active, so block entries map
                    // directly onto active positions
                    for block in blocks {
                        let masked = block.iter().any(|&j| !layout.mask[j]);
                        if masked {
                            for &j in block {
                                let pos = prob.position(j).expect("group fits are fully active");
                                prob.v[pos] = -mu * prob.l[pos];
                            }
                            continue;
                        }
                        let lb: Vec<f64> = block
                            .iter()
                            .map(|&j| prob.l[prob.position(j).expect("fully active")])
                            .collect();
                        let vb = group_prox(&lb, lambda1, mu);
                        for (&j, &vj) in block.iter().zip(vb.iter()) {
                            let pos = prob.position(j).expect("fully active");
                            prob.v[pos] = vj;
                        }
                    }
                }
            }

            // l <- l + (2/mu) v; beta <- beta + (2/mu) Q'v
            let mut qv = DVector::zeros(prob.beta.len());
            for (pos, &j) in prob.active.iter().enumerate() {
                prob.l[pos] += (2.0 / mu) * prob.v[pos];
                if prob.v[pos] != 0.0 {
                    qv.axpy(prob.v[pos], &qt.column(j).into_owned(), 1.0);
                }
            }
            prob.beta.axpy(2.0 / mu, &qv, 1.0);

            // feasibility over the active set
            prob.feas = prob
                .w_active
                .iter()
                .zip(&prob.v)
                .fold(0.0f64, |m, (w, v)| m.max((w - v).abs()));

            // objective at the new v
            let mut eta = DVector::zeros(xt.nrows());
            let mut norm2 = 0.0;
            for (pos, &j) in prob.active.iter().enumerate() {
                let vj = prob.v[pos];
                if vj != 0.0 {
                    eta.axpy(vj, &xt.column(j).into_owned(), 1.0);
                    norm2 += vj * vj;
                }
            }
            let d: DVector<f64> = d_cols.column(k).into();
            let y: DVector<f64> = y_cols.column(k).into();
            let pairs = prob.v_pairs();
            prob.objective = family.negloglik(&eta, &d, &y)?
                + lambda1 * layout.penalty_norm(&pairs)
                + lambda2 * norm2;
            Ok(())
        };

        let mut touched: Vec<(usize, &mut AdmmProblemState)> = state
            .problems
            .iter_mut()
            .enumerate()
            .filter(|(_, p)| !p.converged)
            .collect();
        let results: Vec<Result<()>> = if touched.len() >= PAR_THRESHOLD {
            touched.par_iter_mut().map(|(k, p)| run((*k, p))).collect()
        } else {
            touched.iter_mut().map(|(k, p)| run((*k, p))).collect()
        };
        for r in results {
            r?;
        }
        Ok(())
    }

    /// One full ADMM cycle (w-step plus the closed-form updates) applied to
    /// every unconverged problem.
    pub fn cycle(&self, state: &mut AdmmState, config: &AdmmConfig) -> Result<()> {
        self.w_step(state, config)?;
        self.finish_cycle(state, config)?;
        state.cycles += 1;
        for p in state.problems.iter_mut().filter(|p| !p.converged) {
            p.cycles = state.cycles;
        }
        Ok(())
    }

    /// Full-gradient KKT verification for one problem at its current `v`.
    /// Returns the scaled residual and the list of inactive features (or
    /// whole blocks) violating the zero-subgradient bound.
    fn kkt_one(
        &self,
        prob: &AdmmProblemState,
        config: &AdmmConfig,
        layout: &PenaltyLayout,
        k: usize,
    ) -> Result<(f64, Vec<usize>)> {
        let p = self.p();
        let n = self.n();
        let lambda1 = config.lambda1;
        let scale = lambda1.max(1.0);
        let mut eta = DVector::zeros(n);
        for (pos, &j) in prob.active.iter().enumerate() {
            if prob.v[pos] != 0.0 {
                eta.axpy(prob.v[pos], &self.xt.column(j).into_owned(), 1.0);
            }
        }
        let d: DVector<f64> = self.problems.d.column(k).into();
        let y: DVector<f64> = self.problems.y.column(k).into();
        let lin = self.family.linearize(&eta, &d, &y)?;
        let grad = self.x * &lin.e;

        let mut active_mask = vec![false; p];
        let mut v_full: Vec<f64> = Vec::new();
        for &j in &prob.active {
            active_mask[j] = true;
        }
        if layout.blocks.is_some() {
            v_full = vec![0.0; p];
            for (pos, &j) in prob.active.iter().enumerate() {
                v_full[j] = prob.v[pos];
            }
        }

        let mut residual = 0.0f64;
        let mut violations = Vec::new();
        match &layout.blocks {
            None => {
                for (pos, &j) in prob.active.iter().enumerate() {
                    let vj = prob.v[pos];
                    let r = if !layout.mask[j] {
                        (grad[j] + 2.0 * config.lambda2 * vj).abs()
                    } else if vj != 0.0 {
                        (grad[j] + 2.0 * config.lambda2 * vj + lambda1 * vj.signum()).abs()
                    } else {
                        (grad[j].abs() - lambda1).max(0.0)
                    };
                    residual = residual.max(r / scale);
                }
                for j in 0..p {
                    if active_mask[j] || !layout.mask[j] {
                        continue;
                    }
                    let excess = grad[j].abs() - lambda1;
                    if excess > lambda1 * config.kkt_tol {
                        violations.push(j);
                    }
                    residual = residual.max(excess.max(0.0) / scale);
                }
            }
            Some(blocks) => {
                for block in blocks {
                    let masked = block.iter().any(|&j| !layout.mask[j]);
                    let norm: f64 = block
                        .iter()
                        .map(|&j| v_full[j] * v_full[j])
                        .sum::<f64>()
                        .sqrt();
                    if masked {
                        for &j in block {
                            let r = (grad[j] + 2.0 * config.lambda2 * v_full[j]).abs();
                            residual = residual.max(r / scale);
                        }
                    } else if norm > 0.0 {
                        let mut sq = 0.0;
                        for &j in block {
                            let g =
                                grad[j] + 2.0 * config.lambda2 * v_full[j] + lambda1 * v_full[j] / norm;
                            sq += g * g;
                        }
                        residual = residual.max(sq.sqrt() / scale);
                    } else {
                        // zero block: subgradient condition ||grad_block|| <= lambda1.
                        // Group fits keep every feature active, so nothing to expand.
                        let gn: f64 = block.iter().map(|&j| grad[j] * grad[j]).sum::<f64>().sqrt();
                        residual = residual.max((gn - lambda1).max(0.0) / scale);
                    }
                }
            }
        }
        Ok((residual, violations))
    }

    /// Runs the KKT check for every candidate-converged problem index given,
    /// expanding active sets where inactive features violate optimality.
    /// Returns the per-problem violation lists (empty means optimal).
    pub fn kkt_check_and_expand(
        &self,
        state: &mut AdmmState,
        config: &AdmmConfig,
        candidates: &[usize],
    ) -> Result<Vec<Vec<usize>>> {
        let layout = PenaltyLayout::new(self.p(), config);
        let mut all = Vec::with_capacity(candidates.len());
        for &k in candidates {
            let (residual, violations) = self.kkt_one(&state.problems[k], config, &layout, k)?;
            let prob = &mut state.problems[k];
            prob.kkt_residual = residual;
            if !violations.is_empty() {
                if prob.active.len() + violations.len() > config.s_max {
                    return Err(Error::Capacity {
                        problem: k,
                        needed: prob.active.len() + violations.len(),
                        s_max: config.s_max,
                    });
                }
                for &j in &violations {
                    let insert_at = prob.active.partition_point(|&a| a < j);
                    prob.active.insert(insert_at, j);
                    prob.l.insert(insert_at, self.qt.column(j).dot(&prob.beta));
                    prob.v.insert(insert_at, 0.0);
                    prob.w_active.insert(insert_at, 0.0);
                }
            }
            all.push(violations);
        }
        Ok(all)
    }

    /// Runs ADMM cycles on an existing state until every problem satisfies
    /// the objective-change, feasibility, and KKT criteria (or `max_outer`
    /// cycles elapse, which yields partial results flagged unconverged).
    pub fn fit_with_state(
        &self,
        state: &mut AdmmState,
        config: &AdmmConfig,
    ) -> Result<Vec<FitResult>> {
        config.validate(self.p())?;
        let kk = self.k();
        // entry objectives at the carried v
        let layout = PenaltyLayout::new(self.p(), config);
        for k in 0..kk {
            let prob = &state.problems[k];
            let mut eta = DVector::zeros(self.n());
            let mut norm2 = 0.0;
            for (pos, &j) in prob.active.iter().enumerate() {
                if prob.v[pos] != 0.0 {
                    eta.axpy(prob.v[pos], &self.xt.column(j).into_owned(), 1.0);
                    norm2 += prob.v[pos] * prob.v[pos];
                }
            }
            let d: DVector<f64> = self.problems.d.column(k).into();
            let y: DVector<f64> = self.problems.y.column(k).into();
            let pairs = prob.v_pairs();
            let obj = self.family.negloglik(&eta, &d, &y)?
                + config.lambda1 * layout.penalty_norm(&pairs)
                + config.lambda2 * norm2;
            state.problems[k].objective = obj;
        }
        let mut prev_obj: Vec<f64> = state.problems.iter().map(|p| p.objective).collect();

        while state.problems.iter().any(|p| !p.converged) {
            if state.cycles >= config.max_outer {
                break; // partial results, converged flags stay false
            }
            self.cycle(state, config)?;
            let mut candidates = Vec::new();
            for k in 0..kk {
                let prob = &state.problems[k];
                if prob.converged {
                    continue;
                }
                let obj_ok = (prob.objective - prev_obj[k]).abs()
                    <= config.outer_tol * prev_obj[k].abs().max(1.0);
                let vmax = prob.v.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let feas_ok = prob.feas <= config.feas_tol * (1.0 + vmax);
                if obj_ok && feas_ok {
                    candidates.push(k);
                }
                prev_obj[k] = prob.objective;
            }
            if !candidates.is_empty() {
                let violations = self.kkt_check_and_expand(state, config, &candidates)?;
                for (idx, k) in candidates.iter().enumerate() {
                    let prob = &mut state.problems[*k];
                    // kkt_residual is already scaled by max(1, lambda1)
                    if violations[idx].is_empty() && prob.kkt_residual <= config.kkt_tol {
                        prob.converged = true;
                    }
                }
            }
        }

        // final diagnostics for problems that ran out of cycles
        let layout = PenaltyLayout::new(self.p(), config);
        for k in 0..kk {
            if !state.problems[k].converged && state.problems[k].kkt_residual.is_infinite() {
                let (residual, _) = self.kkt_one(&state.problems[k], config, &layout, k)?;
                state.problems[k].kkt_residual = residual;
            }
        }

        Ok(state
            .problems
            .iter()
            .map(|prob| {
                let weights = SparseVec::from_pairs(self.p(), prob.v_pairs());
                FitResult {
                    active_size: weights.nnz(),
                    weights,
                    objective: prob.objective,
                    iterations: prob.cycles,
                    converged: prob.converged,
                    kkt_residual: prob.kkt_residual,
                    saturated: prob.saturated,
                }
            })
            .collect())
    }

    /// Screen, initialize, and fit from scratch.
    pub fn fit(&self, config: &AdmmConfig) -> Result<Vec<FitResult>> {
        config.validate(self.p())?;
        let sets = self.screen_initial(config)?;
        let mut state = self.init_state(sets)?;
        self.fit_with_state(&mut state, config)
    }

    /// Materializes the full `w_k = Q a_k + (1/(2 rho)) (I - P_Q) l_k`.
    /// Only valid when the active set covers every feature (test scale),
    /// since the implicit `l_k` is fully represented only then.
    pub fn materialize_w(
        &self,
        state: &AdmmState,
        k: usize,
        config: &AdmmConfig,
    ) -> Result<DVector<f64>> {
        let l = self.materialize_l(state, k)?;
        let prob = &state.problems[k];
        let rho = config.rho();
        let pq_l = &self.qr.q * &prob.beta;
        Ok(&self.qr.q * &prob.alpha + (l - pq_l) / (2.0 * rho))
    }

    /// Materializes the full `l_k`; requires a fully active problem.
    pub fn materialize_l(&self, state: &AdmmState, k: usize) -> Result<DVector<f64>> {
        let prob = &state.problems[k];
        if prob.active.len() != self.p() {
            return Err(Error::Validation(format!(
                "problem {k} tracks {} of {} features; materialization needs a full active set",
                prob.active.len(),
                self.p()
            )));
        }
        Ok(DVector::from_vec(prob.l.clone()))
    }

    /// The sparse `v_k` as a dense vector.
    pub fn materialize_v(&self, state: &AdmmState, k: usize) -> DVector<f64> {
        let prob = &state.problems[k];
        let mut out = DVector::zeros(self.p());
        for (pos, &j) in prob.active.iter().enumerate() {
            out[j] = prob.v[pos];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::newton::ridge_irls_fit;
    use crate::problems::{bootstrap_family, cv_family, permutation_family};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randmat(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn soft_threshold_definition() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        let a = 0.731;
        assert_eq!(soft_threshold(a, 0.0), a);
        assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
    }

    #[test]
    fn group_prox_inside_ball_is_zero() {
        // ||l|| = 1 <= lambda1 = 2
        let l = [0.6, 0.8];
        assert_eq!(group_prox(&l, 2.0, 1.3), vec![0.0, 0.0]);
    }

    #[test]
    fn group_prox_shrinks_by_constant_factor() {
        // ||l|| = 4, lambda1 = 2, mu = 1 -> -0.5 l
        let l = [0.0, 4.0];
        let v = group_prox(&l, 2.0, 1.0);
        assert_relative_eq!(v[0], 0.0);
        assert_relative_eq!(v[1], -2.0);
    }

    #[test]
    fn group_prox_singleton_equals_soft_threshold_exactly() {
        for &l in &[0.0, 0.3, -0.7, 2.5, -31.0] {
            for &(lam, mu) in &[(0.5, 1.0), (1.7, 0.3), (0.0, 2.0)] {
                let got = group_prox(&[l], lam, mu);
                assert_eq!(got[0], -mu * soft_threshold(l, lam));
            }
        }
    }

    /// Brute-force prox oracle: the minimizer of
    /// `lambda1 ||v|| + (1/(2 mu)) ||mu l + v||^2` is radial (`v = -t l/||l||`),
    /// so golden-section search over `t >= 0` on the objective suffices.
    fn prox_oracle(l: &[f64], lambda1: f64, mu: f64) -> Vec<f64> {
        let norm: f64 = l.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; l.len()];
        }
        let dir: Vec<f64> = l.iter().map(|v| -v / norm).collect();
        let objective = |t: f64| -> f64 {
            let mut quad = 0.0;
            for (li, di) in l.iter().zip(&dir) {
                let vi = t * di;
                quad += (mu * li + vi) * (mu * li + vi);
            }
            lambda1 * t + quad / (2.0 * mu)
        };
        let (mut a, mut b) = (0.0, 2.0 * mu * norm + 1.0);
        let inv_phi = 0.5 * (5.0f64.sqrt() - 1.0);
        for _ in 0..200 {
            let c = b - inv_phi * (b - a);
            let d = a + inv_phi * (b - a);
            if objective(c) < objective(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let t = 0.5 * (a + b);
        dir.iter().map(|d| t * d).collect()
    }

    #[test]
    fn group_prox_matches_numeric_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..60 {
            let len = rng.gen_range(1..7);
            let l: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lambda1 = rng.gen_range(0.0..2.0);
            let mu = rng.gen_range(0.1..3.0);
            let got = group_prox(&l, lambda1, mu);
            let want = prox_oracle(&l, lambda1, mu);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-6, "trial {trial}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn memory_formula_examples() {
        // the paper's own example sizes
        assert_eq!(estimate_memory(50_000, 500, 1000, 0).unwrap(), 210_000_000);
        assert_eq!(
            estimate_memory(50_000, 500, 1000, 1000).unwrap(),
            310_040_000
        );
        // direct arithmetic at the smallest sizes
        assert_eq!(estimate_memory(1, 1, 0, 1).unwrap(), 160);
        assert!(estimate_memory(0, 1, 0, 1).is_err());
        assert!(matches!(
            estimate_memory(u64::MAX, 2, 1, 1),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn rho_is_recomputed_from_mu() {
        let mut c = AdmmConfig::new(0.3, 0.2);
        assert_relative_eq!(c.rho(), c.lambda2 + 0.5 / c.mu());
        c.mu_override = Some(4.0);
        assert_relative_eq!(c.rho(), 0.2 + 0.125);
    }

    fn small_logistic_setup(
        p: usize,
        n: usize,
        k_boot: usize,
        seed: u64,
    ) -> (DMatrix<f64>, DVector<f64>, crate::problems::ProblemFamily) {
        let (x, y) = crate::synth::logistic_instance(p, n, seed);
        let fam = bootstrap_family(k_boot, &y, seed + 1).unwrap();
        (x, y, fam)
    }

    #[test]
    fn screening_empty_at_path_head() {
        let (x, _, fam) = small_logistic_setup(15, 10, 3, 2);
        let family = GlzFamily::Logistic;
        let engine = AdmmEngine::new(&x, &family, &fam).unwrap();
        let lmax = engine.lambda1_max(None).unwrap();
        let config = AdmmConfig::new(lmax, 0.0);
        let sets = engine.screen_initial(&config).unwrap();
        for s in sets {
            assert!(s.is_empty());
        }
    }

    #[test]
    fn screening_keeps_previous_support() {
        let (x, _, fam) = small_logistic_setup(15, 10, 1, 3);
        let family = GlzFamily::Logistic;
        let d: DVector<f64> = fam.d.column(0).into();
        let y: DVector<f64> = fam.y.column(0).into();
        let w_prev = SparseVec::from_pairs(15, vec![(2, 0.5), (9, -0.1)]);
        let set = strong_rule_screen(&x, &family, &d, &y, 0.4, 0.5, &w_prev, usize::MAX, None)
            .unwrap();
        assert!(set.contains(&2));
        assert!(set.contains(&9));
        // strictly increasing order
        assert!(set.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn screening_capacity_error() {
        let (x, _, fam) = small_logistic_setup(30, 12, 1, 4);
        let family = GlzFamily::Logistic;
        let d: DVector<f64> = fam.d.column(0).into();
        let y: DVector<f64> = fam.y.column(0).into();
        let w_prev = SparseVec::zeros(30);
        // tiny threshold lets everything through
        let err = strong_rule_screen(&x, &family, &d, &y, 1e-9, 1e-9, &w_prev, 5, None)
            .unwrap_err();
        assert!(matches!(err, Error::Capacity { s_max: 5, .. }));
    }

    #[test]
    fn huge_lambda1_gives_null_model_quickly() {
        let (x, _, fam) = small_logistic_setup(25, 12, 4, 5);
        let family = GlzFamily::Logistic;
        let engine = AdmmEngine::new(&x, &family, &fam).unwrap();
        let lmax = engine.lambda1_max(None).unwrap();
        let config = AdmmConfig::new(1.01 * lmax, 0.1);
        let fits = engine.fit(&config).unwrap();
        for (k, fit) in fits.iter().enumerate() {
            assert!(fit.converged, "problem {k}");
            assert_eq!(fit.active_size, 0);
            assert!(fit.iterations <= 2, "took {} cycles", fit.iterations);
            let d: DVector<f64> = fam.d.column(k).into();
            let y: DVector<f64> = fam.y.column(k).into();
            let ell0 = family.negloglik(&DVector::zeros(12), &d, &y).unwrap();
            assert_relative_eq!(fit.objective, ell0, max_relative = 1e-12);
        }
    }

    #[test]
    fn lambda1_zero_matches_ridge_fit() {
        let (x, _, fam) = small_logistic_setup(12, 8, 3, 6);
        let family = GlzFamily::Logistic;
        let lambda2 = 0.35;
        let mut config = AdmmConfig::new(0.0, lambda2);
        config.outer_tol = 1e-10;
        config.feas_tol = 1e-9;
        config.newton_tol = 1e-11;
        let fits = fastglz_fit(&x, &family, &fam, &config).unwrap();
        let ridge = ridge_irls_fit(&x, &family, &fam, lambda2, 1e-11, 50).unwrap();
        for k in 0..fam.k() {
            assert!(fits[k].converged);
            let wa = fits[k].weights.to_dense();
            let wr = ridge[k].weights.to_dense();
            assert!(
                (&wa - &wr).norm() <= 1e-6 * wr.norm().max(1.0),
                "problem {k}: admm vs ridge"
            );
            assert_relative_eq!(fits[k].objective, ridge[k].objective, max_relative = 1e-7);
        }
    }

    #[test]
    fn duplicate_problems_get_identical_results() {
        let (x, y, _) = small_logistic_setup(20, 10, 1, 7);
        // two identical bootstrap columns
        let one = bootstrap_family(1, &y, 11).unwrap();
        let mut d = DMatrix::zeros(10, 2);
        let mut ym = DMatrix::zeros(10, 2);
        for c in 0..2 {
            d.set_column(c, &one.d.column(0));
            ym.set_column(c, &one.y.column(0));
        }
        let fam = crate::problems::ProblemFamily::from_matrices(d, ym).unwrap();
        let family = GlzFamily::Logistic;
        let engine = AdmmEngine::new(&x, &family, &fam).unwrap();
        let lmax = engine.lambda1_max(None).unwrap();
        let config = AdmmConfig::new(0.3 * lmax, 0.1 * lmax);
        let fits = engine.fit(&config).unwrap();
        assert_eq!(fits[0].weights, fits[1].weights);
        assert_eq!(fits[0].objective, fits[1].objective);
        assert_eq!(fits[0].iterations, fits[1].iterations);
    }

    #[test]
    fn shadow_state_matches_materialized_l() {
        // small scale, full active set: beta must equal Q'l after every cycle
        let (x, _, fam) = small_logistic_setup(10, 6, 2, 8);
        let family = GlzFamily::Logistic;
        let engine = AdmmEngine::new(&x, &family, &fam).unwrap();
        let lmax = engine.lambda1_max(None).unwrap();
        let mut config = AdmmConfig::new(0.25 * lmax, 0.05);
        config.s_max = usize::MAX;
        let sets = vec![(0..10).collect::<Vec<_>>(); fam.k()];
        let mut state = engine.init_state(sets).unwrap();
        for _ in 0..25 {
            engine.cycle(&mut state, &config).unwrap();
            for k in 0..fam.k() {
                let l = engine.materialize_l(&state, k).unwrap();
                let beta_ref = engine.qr().q.tr_mul(&l);
                let beta = &state.problems[k].beta;
                assert!(
                    (beta - &beta_ref).norm() <= 1e-10 * beta_ref.norm().max(1.0),
                    "problem {k}"
                );
            }
        }
    }

    #[test]
    fn singleton_groups_equal_plain_l1_fit() {
        let (x, _, fam) = small_logistic_setup(14, 9, 2, 9);
        let family = GlzFamily::Logistic;
        let engine = AdmmEngine::new(&x, &family, &fam).unwrap();
        let lmax = engine.lambda1_max(None).unwrap();
        let mut plain = AdmmConfig::new(0.3 * lmax, 0.1);
        plain.s_max = usize::MAX;
        // run the plain fit with a full active set so both runs share state shape
        let sets = vec![(0..14).collect::<Vec<_>>(); fam.k()];
        let mut st1 = engine.init_state(sets.clone()).unwrap();
        let fits1 = engine.fit_with_state(&mut st1, &plain).unwrap();

        let mut grouped = plain.clone();
        grouped.groups = Some((0..14).map(|j| vec![j]).collect());
        let mut st2 = engine.init_state(sets).unwrap();
        let fits2 = engine.fit_with_state(&mut st2, &grouped).unwrap();
        for k in 0..fam.k() {
            assert_eq!(fits1[k].weights, fits2[k].weights, "problem {k}");
        }
    }

    #[test]
    fn group_fit_zeroes_whole_blocks() {
        let (x, _, fam) = small_logistic_setup(12, 9, 2, 10);
        let family = GlzFamily::Logistic;
        let engine = AdmmEngine::new(&x, &family, &fam).unwrap();
        let lmax = engine.lambda1_max(None).unwrap();
        let mut config = AdmmConfig::new(0.45 * lmax, 0.05);
        config.groups = Some(vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7], vec![8, 9, 10, 11]]);
        let fits = engine.fit(&config).unwrap();
        for fit in &fits {
            assert!(fit.converged);
            let w = fit.weights.to_dense();
            for block in config.groups.as_ref().unwrap() {
                let nz: Vec<bool> = block.iter().map(|&j| w[j] != 0.0).collect();
                let any = nz.iter().any(|&b| b);
                let all = nz.iter().all(|&b| b);
                assert!(
                    !any || all,
                    "block {block:?} is partially selected: {nz:?}"
                );
            }
        }
    }

    #[test]
    fn penalty_mask_keeps_feature_unpenalized() {
        let (x, _, fam) = small_logistic_setup(10, 8, 1, 12);
        let family = GlzFamily::Logistic;
        let engine = AdmmEngine::new(&x, &family, &fam).unwrap();
        let lmax = engine.lambda1_max(None).unwrap();
        let mut config = AdmmConfig::new(2.0 * lmax, 0.2);
        let mut mask = vec![true; 10];
        mask[3] = false; // feature 3 escapes the l1 penalty
        config.penalty_mask = Some(mask);
        let fits = engine.fit(&config).unwrap();
        // with lambda1 above lambda_max every penalized weight is zero, but
        // the exempt feature is free to be nonzero
        let w = fits[0].weights.to_dense();
        for j in 0..10 {
            if j != 3 {
                assert_eq!(w[j], 0.0, "feature {j}");
            }
        }
        assert!(w[3].abs() > 1e-8, "unpenalized feature should move");
        assert!(fits[0].converged);
    }

    #[test]
    fn trial_exclusion_is_bit_exact_for_gaussian_cv() {
        // LinearGaussian curvature is response-independent, so a held-out
        // trial's response cannot influence that fold even at the bit level.
        let p = 16;
        let n = 10;
        let x = crate::synth::gaussian_design(p, n, 33);
        let y = DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin());
        let folds = 5;
        let fam1 = cv_family(folds, &y, true, 21).unwrap();
        let family = GlzFamily::LinearGaussian;
        let config = AdmmConfig::new(0.2, 0.1);
        let fits1 = fastglz_fit(&x, &family, &fam1, &config).unwrap();

        // perturb a trial held out by fold 0 and refit everything
        let fold0_holdout = (0..n).find(|&i| fam1.d[(i, 0)] == 0.0).unwrap();
        let mut y2 = y.clone();
        y2[fold0_holdout] += 3.5;
        let fam2 = cv_family(folds, &y2, true, 21).unwrap();
        assert_eq!(fam1.d, fam2.d);
        let fits2 = fastglz_fit(&x, &family, &fam2, &config).unwrap();

        assert_eq!(fits1[0].weights, fits2[0].weights);
        assert_eq!(fits1[0].objective.to_bits(), fits2[0].objective.to_bits());
        assert_eq!(fits1[0].iterations, fits2[0].iterations);
    }

    #[test]
    fn logistic_trial_exclusion_is_numerically_inert() {
        // For curvature that depends on eta the shared template couples
        // problems at the bit level, but the converged fold must still be
        // unchanged to solver tolerance.
        let p = 14;
        let n = 10;
        let x = crate::synth::gaussian_design(p, n, 35);
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let y = DVector::from_fn(n, |_, _| rng.gen_range(0..2) as f64);
        let fam1 = cv_family(5, &y, true, 22).unwrap();
        let family = GlzFamily::Logistic;
        let mut config = AdmmConfig::new(0.05, 0.05);
        config.outer_tol = 1e-9;
        config.kkt_tol = 1e-8;
        let fits1 = fastglz_fit(&x, &family, &fam1, &config).unwrap();
        let fold0_holdout = (0..n).find(|&i| fam1.d[(i, 0)] == 0.0).unwrap();
        let mut y2 = y.clone();
        y2[fold0_holdout] = 1.0 - y2[fold0_holdout];
        let fam2 = cv_family(5, &y2, true, 22).unwrap();
        let fits2 = fastglz_fit(&x, &family, &fam2, &config).unwrap();
        let w1 = fits1[0].weights.to_dense();
        let w2 = fits2[0].weights.to_dense();
        assert!((&w1 - &w2).norm() <= 1e-6 * w1.norm().max(1.0));
    }

    #[test]
    fn perturbing_objective_value_matches_independent_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let (p, n) = (8, 6);
        let x = randmat(&mut rng, p, n);
        let d = DVector::from_element(n, 1.0);
        let y = DVector::from_fn(n, |i, _| (i % 2) as f64);
        let family = GlzFamily::Logistic;
        let config = AdmmConfig::new(0.7, 0.3);
        let w = SparseVec::from_pairs(p, vec![(1, 0.4), (5, -0.2)]);
        let got = objective_value(&x, &w, &family, &d, &y, &config).unwrap();
        // independent sum
        let wd = w.to_dense();
        let eta = x.tr_mul(&wd);
        let mut expect = 0.0;
        for i in 0..n {
            expect += (1.0 + eta[i].exp()).ln() - y[i] * eta[i];
        }
        expect += 0.7 * (0.4 + 0.2) + 0.3 * (0.4f64.powi(2) + 0.2f64.powi(2));
        assert_relative_eq!(got, expect, max_relative = 1e-12);

        // zero weights leave only the likelihood term
        let w0 = SparseVec::zeros(p);
        let got0 = objective_value(&x, &w0, &family, &d, &y, &config).unwrap();
        assert_relative_eq!(got0, n as f64 * 2.0f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn kkt_expansion_recovers_truncated_support() {
        // converge a small instance, drop one support feature from the active
        // set, and check the KKT pass flags it
        let (x, _, fam) = small_logistic_setup(12, 8, 1, 13);
        let family = GlzFamily::Logistic;
        let engine = AdmmEngine::new(&x, &family, &fam).unwrap();
        let lmax = engine.lambda1_max(None).unwrap();
        let config = AdmmConfig::new(0.25 * lmax, 0.05);
        let fits = engine.fit(&config).unwrap();
        let support = fits[0].weights.indices.clone();
        assert!(!support.is_empty(), "need a nonzero model for this test");
        let dropped = support[0];

        // rebuild a state whose active set misses the dropped feature and
        // carries the converged weights elsewhere
        let keep: Vec<usize> = support.iter().copied().filter(|&j| j != dropped).collect();
        let mut state = engine.init_state(vec![keep.clone()]).unwrap();
        for (pos, &j) in keep.iter().enumerate() {
            let widx = fits[0].weights.indices.iter().position(|&i| i == j).unwrap();
            state.problems[0].v[pos] = fits[0].weights.values[widx];
        }
        let violations = engine
            .kkt_check_and_expand(&mut state, &config, &[0])
            .unwrap();
        assert!(
            violations[0].contains(&dropped),
            "dropped feature {dropped} not flagged: {violations:?}"
        );
        assert!(state.problems[0].active.contains(&dropped));
    }

    #[test]
    fn permutation_family_fits_are_deterministic() {
        let (x, y, _) = small_logistic_setup(10, 8, 1, 14);
        let fam = permutation_family(&y, 3, 5, true).unwrap();
        let family = GlzFamily::Logistic;
        let config = AdmmConfig::new(0.4, 0.2);
        let a = fastglz_fit(&x, &family, &fam, &config).unwrap();
        let b = fastglz_fit(&x, &family, &fam, &config).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.weights, fb.weights);
            assert_eq!(fa.objective.to_bits(), fb.objective.to_bits());
        }
    }
}
