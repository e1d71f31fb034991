//! Shared-structure linear algebra: thin QR, the element-wise-max template
//! matrix, and the batched stationary-iteration solver.
//!
//! Every problem's Newton step reduces to an `r x r` system
//! `(Z R_k Z' + c I) alpha_k = Z b_k (+ beta_k)` with `r = min(p, n)`.
//! Instead of factorizing `K` such systems, one template
//! `M = Z R Z' + c I` is factorized, with `R` the element-wise maximum of the
//! per-problem curvature diagonals `R_k`. Each system is then solved by the
//! stationary iteration
//!
//! ```text
//! alpha_k <- M^-1 Z [ (R - R_k) .* (Z' alpha_k) ] + M^-1 (Z b_k + beta_k)
//! ```
//!
//! which converges because `R >= R_k` keeps the residual splitting positive
//! semi-definite (spectral radius of `M^-1 N_k` below one whenever
//! `Z R_k Z' + c I` is positive definite). Computing `M^-1 Z` once makes every
//! subsequent iteration `O(n^2)` per problem instead of `O(n^3)`.
//!
//! Column updates are computed independently (fixed accumulation order per
//! column), so a batched solve is bit-identical to solving each column alone
//! and results do not depend on the rayon thread count.

use nalgebra::{DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::admm::FitResult;
use crate::error::{Error, Result};
use crate::glz::GlzFamily;
use crate::problems::ProblemFamily;
use crate::sparse::SparseVec;

/// Minimum number of columns before batch loops go parallel.
const PAR_THRESHOLD: usize = 8;

/// Thin QR factors of the data matrix: `X = Q Z` with `Q` (`p x r`)
/// orthonormal and `Z` (`r x n`), `r = min(p, n)`.
#[derive(Debug, Clone)]
pub struct QrFactors {
    pub q: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

/// Householder thin QR of `X` (`p x n`). Deterministic for fixed input.
///
/// Rank-deficient inputs still return `r = min(p, n)` factors; the
/// reconstruction `Q Z = X` holds regardless, and downstream systems stay
/// positive definite as long as their diagonal shift is positive.
pub fn thin_qr(x: &DMatrix<f64>) -> Result<QrFactors> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "data matrix contains non-finite entries".into(),
        ));
    }
    let qr = x.clone().qr();
    Ok(QrFactors {
        q: qr.q(),
        z: qr.r(),
    })
}

impl QrFactors {
    pub fn p(&self) -> usize {
        self.q.nrows()
    }
    pub fn r(&self) -> usize {
        self.q.ncols()
    }
    pub fn n(&self) -> usize {
        self.z.ncols()
    }
}

/// The factorized template system `M = Z R Z' + c I` shared by all problems
/// of one linearization, with `R` the element-wise max of the per-problem
/// curvature diagonals.
#[derive(Clone)]
pub struct TemplateSystem {
    /// Diagonal of `R`: row-wise maximum over the per-problem columns.
    pub r_template: DVector<f64>,
    /// Precomputed `M^-1 Z` (`r x n`); the one `O(n^3)`-class computation,
    /// done once per template build.
    pub minv_z: DMatrix<f64>,
    /// Diagonal shift (`2 lambda2` for ridge Newton, `2 rho` in ADMM).
    pub c: f64,
    chol: nalgebra::Cholesky<f64, Dyn>,
}

impl std::fmt::Debug for TemplateSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TemplateSystem")
            .field("r", &self.minv_z.nrows())
            .field("n", &self.minv_z.ncols())
            .field("c", &self.c)
            .finish()
    }
}

/// Builds and factorizes the template `M = Z R Z' + c I`.
///
/// `r_cols` holds one non-negative curvature diagonal per column; the
/// template takes their row-wise maximum. Fails if `M` cannot be factorized
/// (for GLZ fits `c > 0` guarantees success; a singular template suggests a
/// ridge penalty is needed).
pub fn build_template(
    z: &DMatrix<f64>,
    r_cols: &DMatrix<f64>,
    c: f64,
) -> Result<TemplateSystem> {
    let (r, n) = z.shape();
    if r_cols.nrows() != n || r_cols.ncols() == 0 {
        return Err(Error::Dimension(format!(
            "curvature columns are {:?}, expected {} rows",
            r_cols.shape(),
            n
        )));
    }
    if !c.is_finite() || c < 0.0 {
        return Err(Error::Validation(format!(
            "diagonal shift must be finite and non-negative, got {c}"
        )));
    }
    let mut r_template = DVector::zeros(n);
    for i in 0..n {
        let mut m = 0.0f64;
        for k in 0..r_cols.ncols() {
            let v = r_cols[(i, k)];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "curvature entry [{i},{k}] = {v} must be finite and non-negative"
                )));
            }
            m = m.max(v);
        }
        r_template[i] = m;
    }
    // M = Z diag(r_template) Z' + c I, symmetrized against rounding
    let mut zs = z.clone();
    for i in 0..n {
        zs.column_mut(i).scale_mut(r_template[i]);
    }
    let mut m = &zs * z.transpose();
    for i in 0..r {
        for j in 0..i {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
        m[(i, i)] += c;
    }
    let not_pd = || {
        Error::Numerical(
            "template matrix is singular or not positive definite; a strictly positive ridge \
             penalty (lambda2 > 0) regularizes it"
                .into(),
        )
    };
    let chol = m.cholesky().ok_or_else(not_pd)?;
    // guard against numerically singular factors (tiny or non-finite pivots):
    // the solver needs residual tolerances near 1e-9, which a condition
    // number beyond ~1e12 cannot support
    let diag = chol.l_dirty();
    let mut pmin = f64::INFINITY;
    let mut pmax = 0.0f64;
    for i in 0..r {
        let p = diag[(i, i)].abs();
        if !p.is_finite() {
            return Err(not_pd());
        }
        pmin = pmin.min(p);
        pmax = pmax.max(p);
    }
    if pmin == 0.0 || (pmin / pmax).powi(2) < 1e-12 {
        return Err(not_pd());
    }
    let minv_z = chol.solve(z);
    if minv_z.iter().any(|v| !v.is_finite()) {
        return Err(not_pd());
    }
    Ok(TemplateSystem {
        r_template,
        minv_z,
        c,
        chol,
    })
}

impl TemplateSystem {
    /// `M^-1 b` for a matrix of right-hand sides.
    pub fn m_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `M^-1 b` for a single right-hand side.
    pub fn m_solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

/// One batch of reduced Newton systems `(Z R_k Z' + c I) alpha_k = Z b_k + extra_k`.
#[derive(Debug, Clone)]
pub struct NewtonBatch {
    /// Current iterates / solutions, one `r`-column per problem.
    pub a: DMatrix<f64>,
    /// Newton right-hand-side vectors `b_k` (`n x K`).
    pub b: DMatrix<f64>,
    /// Per-column `diag(R - R_k)`; non-negative by the element-wise-max
    /// template construction.
    pub rdelta: DMatrix<f64>,
    /// Additive reduced right-hand side (`r x K`), e.g. `Q' l_k` in the ADMM
    /// w-step. Lives in the reduced space, hence stored separately from `b`.
    pub extra: Option<DMatrix<f64>>,
    /// Number of batched update sweeps applied by the last solve.
    pub iterations_used: usize,
}

impl NewtonBatch {
    /// Assembles a batch against a template: `rdelta` is derived as
    /// `r_template - r_k` per column (clamped at zero), and `warm` seeds the
    /// iterates (pass zeros for a cold start).
    pub fn new(
        template: &TemplateSystem,
        r_cols: &DMatrix<f64>,
        b: DMatrix<f64>,
        extra: Option<DMatrix<f64>>,
        warm: DMatrix<f64>,
    ) -> Result<Self> {
        let n = template.minv_z.ncols();
        let r = template.minv_z.nrows();
        let k = r_cols.ncols();
        if b.shape() != (n, k) || warm.shape() != (r, k) || r_cols.nrows() != n {
            return Err(Error::Dimension(format!(
                "batch shapes disagree: r_cols {:?}, b {:?}, warm {:?}",
                r_cols.shape(),
                b.shape(),
                warm.shape()
            )));
        }
        if let Some(e) = &extra {
            if e.shape() != (r, k) {
                return Err(Error::Dimension(format!(
                    "extra right-hand side is {:?}, expected ({r}, {k})",
                    e.shape()
                )));
            }
        }
        let mut rdelta = DMatrix::zeros(n, k);
        for kk in 0..k {
            for i in 0..n {
                rdelta[(i, kk)] = (template.r_template[i] - r_cols[(i, kk)]).max(0.0);
            }
        }
        Ok(NewtonBatch {
            a: warm,
            b,
            rdelta,
            extra,
            iterations_used: 0,
        })
    }
}

struct ColumnSolve {
    alpha: DVector<f64>,
    rhs: DVector<f64>,
    f: DVector<f64>,
    rdelta: DVector<f64>,
    r_col: DVector<f64>,
    denom: f64,
    /// Absolute residual norm at which this column stops.
    threshold: f64,
    rel: f64,
    converged: bool,
    // reusable workspaces
    zt_a: DVector<f64>,
    scaled: DVector<f64>,
    g: DVector<f64>,
}

impl ColumnSolve {
    /// True residual norm `||rhs - G alpha||` of the current iterate.
    fn residual(&mut self, z: &DMatrix<f64>, c: f64) -> f64 {
        self.zt_a.gemv_tr(1.0, z, &self.alpha, 0.0);
        self.scaled.zip_zip_apply(&self.r_col, &self.zt_a, |s, r, t| *s = r * t);
        self.g.gemv(1.0, z, &self.scaled, 0.0);
        self.g.axpy(c, &self.alpha, 1.0);
        let mut sq = 0.0;
        for i in 0..self.g.len() {
            let d = self.rhs[i] - self.g[i];
            sq += d * d;
        }
        sq.sqrt()
    }

    /// One template-splitting update, reusing `zt_a` from the residual pass.
    fn update(&mut self, minv_z: &DMatrix<f64>) {
        self.scaled
            .zip_zip_apply(&self.rdelta, &self.zt_a, |s, rd, t| *s = rd * t);
        self.alpha.gemv(1.0, minv_z, &self.scaled, 0.0);
        self.alpha += &self.f;
    }
}

/// Solves every column of the batch to relative residual `tol` by the
/// template-splitting stationary iteration.
///
/// Each sweep applies `alpha_k <- M^-1 Z [(R - R_k) .* (Z' alpha_k)] + M^-1 rhs_k`
/// to the not-yet-converged columns; converged columns are frozen so the
/// batched run is bit-identical to solving each column alone against the same
/// template. `iterations_used` counts applied sweeps (0 if the warm start
/// already satisfies the tolerance).
pub fn stationary_solve_batch(
    template: &TemplateSystem,
    z: &DMatrix<f64>,
    batch: NewtonBatch,
    tol: f64,
    max_iters: usize,
) -> Result<NewtonBatch> {
    stationary_solve_batch_capped(template, z, batch, tol, None, max_iters)
}

/// [`stationary_solve_batch`] with optional per-column absolute residual
/// caps: column `k` stops at `min(tol * ||rhs_k||, caps[k])`, floored near
/// machine precision. Each column's stopping decision depends only on its own
/// data, preserving batch/solo bit-identity.
pub(crate) fn stationary_solve_batch_capped(
    template: &TemplateSystem,
    z: &DMatrix<f64>,
    mut batch: NewtonBatch,
    tol: f64,
    abs_caps: Option<&[f64]>,
    max_iters: usize,
) -> Result<NewtonBatch> {
    if tol <= 0.0 {
        return Err(Error::Validation(format!("tolerance must be positive, got {tol}")));
    }
    let k = batch.a.ncols();
    let n = batch.b.nrows();
    let r = batch.a.nrows();
    if let Some(caps) = abs_caps {
        if caps.len() != k {
            return Err(Error::Dimension(format!(
                "{} tolerance caps for {k} columns",
                caps.len()
            )));
        }
    }

    // rhs = Z b (+ extra), f = M^-1 rhs. Computed column by column so each
    // right-hand side is bit-identical to a single-column solve.
    let mut rhs = DMatrix::zeros(r, k);
    for kk in 0..k {
        rhs.column_mut(kk).gemv(1.0, z, &batch.b.column(kk), 0.0);
    }
    if let Some(extra) = &batch.extra {
        rhs += extra;
    }
    let f_all = template.m_solve(&rhs);

    let mut cols: Vec<ColumnSolve> = (0..k)
        .map(|kk| {
            let rhs_k: DVector<f64> = rhs.column(kk).into();
            let denom = {
                let nrm = rhs_k.norm();
                if nrm > 0.0 {
                    nrm
                } else {
                    1.0
                }
            };
            let cap = abs_caps.map_or(f64::INFINITY, |c| c[kk]);
            let threshold = (tol * denom).min(cap).max(32.0 * f64::EPSILON * denom);
            let rdelta: DVector<f64> = batch.rdelta.column(kk).into();
            let r_col = DVector::from_fn(n, |i, _| template.r_template[i] - rdelta[i]);
            ColumnSolve {
                alpha: batch.a.column(kk).into(),
                rhs: rhs_k,
                f: f_all.column(kk).into(),
                rdelta,
                r_col,
                denom,
                threshold,
                rel: f64::INFINITY,
                converged: false,
                zt_a: DVector::zeros(n),
                scaled: DVector::zeros(n),
                g: DVector::zeros(r),
            }
        })
        .collect();

    let c = template.c;
    let mut sweeps = 0usize;
    // pass 0 only checks the warm start; each later pass applies one sweep
    for pass in 0..=max_iters {
        let final_pass = pass == max_iters;
        let step = |col: &mut ColumnSolve| {
            if col.converged {
                return;
            }
            let res = col.residual(z, c);
            col.rel = res / col.denom;
            if res <= col.threshold {
                col.converged = true;
            } else if !final_pass {
                col.update(&template.minv_z);
            }
        };
        if k >= PAR_THRESHOLD {
            cols.par_iter_mut().for_each(step);
        } else {
            cols.iter_mut().for_each(step);
        }
        if cols.iter().all(|c| c.converged) {
            break;
        }
        if final_pass {
            let residuals: Vec<f64> = cols.iter().map(|c| c.rel).collect();
            let worst = residuals.iter().cloned().fold(0.0, f64::max);
            return Err(Error::StationaryNonConvergence {
                max_iters,
                worst,
                residuals,
            });
        }
        sweeps += 1;
    }

    for (kk, col) in cols.into_iter().enumerate() {
        batch.a.set_column(kk, &col.alpha);
    }
    batch.iterations_used = sweeps;
    Ok(batch)
}

/// Power-iteration estimate of the spectral radius of `M^-1 N_k`, where
/// `N_k = Z (R - R_k) Z'` is the residual splitting for curvature column
/// `r_k`. Diagnostic: the element-wise-max template guarantees the true
/// radius is below one whenever `r_template >= r_k` and `c > 0`.
pub fn spectral_radius_estimate(
    template: &TemplateSystem,
    z: &DMatrix<f64>,
    r_k: &DVector<f64>,
    iters: usize,
) -> f64 {
    let n = z.ncols();
    let r = z.nrows();
    let rdelta = DVector::from_fn(n, |i, _| (template.r_template[i] - r_k[i]).max(0.0));
    let apply_n = |v: &DVector<f64>| -> DVector<f64> {
        let mut t = DVector::zeros(n);
        t.gemv_tr(1.0, z, v, 0.0);
        t.component_mul_assign(&rdelta);
        z * t
    };
    let apply_m = |v: &DVector<f64>| -> DVector<f64> {
        let mut t = DVector::zeros(n);
        t.gemv_tr(1.0, z, v, 0.0);
        t.component_mul_assign(&template.r_template);
        let mut out = z * t;
        out.axpy(template.c, v, 1.0);
        out
    };
    let mut v = DVector::from_element(r, 1.0 / (r as f64).sqrt());
    for _ in 0..iters {
        let nv = apply_n(&v);
        if nv.norm() == 0.0 {
            return 0.0;
        }
        let mut next = template.m_solve_vec(&nv);
        let nrm = next.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        next /= nrm;
        v = next;
    }
    let num = v.dot(&apply_n(&v));
    let den = v.dot(&apply_m(&v));
    (num / den).abs()
}

/// Per-problem outcome of a batched smooth Newton minimization.
#[derive(Debug, Clone)]
pub(crate) struct SmoothNewtonOutcome {
    /// Newton solves taken per problem (aligned with the `probs` argument).
    pub iterations: Vec<usize>,
    /// Final gradient norms `|| Z e + c a - beta ||`.
    pub grad_norm: Vec<f64>,
    /// Gradient norms at entry, for relative stopping.
    pub grad0_norm: Vec<f64>,
    /// The reduced linearization point whose solve produced the final
    /// iterate (equal to the final iterate itself when no step was needed).
    pub last_lin_alpha: Vec<DVector<f64>>,
    /// Whether any linearization hit the exponential cap.
    pub saturated: Vec<bool>,
}

/// Batched Newton minimization of the smooth objectives
/// `l_k(Z' a) + (c/2) ||a||^2 - beta_k' a` over the listed problems.
///
/// This is the engine behind both the ridge IRLS fit (`beta = None`,
/// `c = 2 lambda2`) and the ADMM w-step (`beta_k = Q' l_k`, `c = 2 rho`).
/// Problems are frozen individually once their gradient norm drops below
/// `tol * max(1, entry gradient norm)` following a full Newton step, so each
/// problem's iterate path depends only on its own data and the shared
/// template. One template is built per relinearization round from the
/// curvature columns of **all** `K` problems (`r_cols` is updated in place
/// for the problems being solved; other columns keep their last values).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_smooth_newton(
    z: &DMatrix<f64>,
    family: &GlzFamily,
    d_cols: &DMatrix<f64>,
    y_cols: &DMatrix<f64>,
    alphas: &mut DMatrix<f64>,
    r_cols: &mut DMatrix<f64>,
    probs: &[usize],
    c: f64,
    betas: Option<&DMatrix<f64>>,
    tol: f64,
    max_newton: usize,
    stat_tol: f64,
    stat_max_iters: usize,
) -> Result<SmoothNewtonOutcome> {
    let n = z.ncols();
    let r = z.nrows();
    let kb = probs.len();

    struct ProbState {
        problem: usize,
        d: DVector<f64>,
        y: DVector<f64>,
        alpha: DVector<f64>,
        beta: Option<DVector<f64>>,
        b: DVector<f64>,
        r: DVector<f64>,
        obj: f64,
        grad_norm: f64,
        grad0: f64,
        iterations: usize,
        saturated: bool,
        last_full: bool,
        last_lin: DVector<f64>,
        done: bool,
        error: Option<Error>,
    }

    let smooth_obj = |family: &GlzFamily,
                      alpha: &DVector<f64>,
                      d: &DVector<f64>,
                      y: &DVector<f64>,
                      beta: Option<&DVector<f64>>|
     -> Result<f64> {
        let eta = z.tr_mul(alpha);
        let mut v = family.negloglik(&eta, d, y)? + 0.5 * c * alpha.norm_squared();
        if let Some(b) = beta {
            v -= b.dot(alpha);
        }
        Ok(v)
    };

    // entry linearization, objective, and gradient per problem
    let mut states: Vec<ProbState> = Vec::with_capacity(kb);
    for &k in probs {
        let d: DVector<f64> = d_cols.column(k).into();
        let y: DVector<f64> = y_cols.column(k).into();
        let alpha: DVector<f64> = alphas.column(k).into();
        let beta: Option<DVector<f64>> = betas.map(|b| b.column(k).into());
        let eta = z.tr_mul(&alpha);
        let lin = family.linearize(&eta, &d, &y)?;
        let mut grad = z * &lin.e;
        grad.axpy(c, &alpha, 1.0);
        if let Some(b) = &beta {
            grad -= b;
        }
        let gn = grad.norm();
        let obj = smooth_obj(family, &alpha, &d, &y, beta.as_ref())?;
        r_cols.set_column(k, &lin.r);
        states.push(ProbState {
            problem: k,
            d,
            y,
            last_lin: alpha.clone(),
            alpha,
            beta,
            b: lin.b,
            r: lin.r,
            obj,
            grad_norm: gn,
            grad0: gn,
            iterations: 0,
            saturated: lin.saturated,
            last_full: true,
            done: false,
            error: None,
        });
    }
    for s in states.iter_mut() {
        s.done = s.grad_norm <= tol * s.grad0.max(1.0);
    }

    let mut round = 0usize;
    while states.iter().any(|s| !s.done) {
        round += 1;
        if round > max_newton {
            let worst = states
                .iter()
                .filter(|s| !s.done)
                .max_by(|a, b| a.grad_norm.total_cmp(&b.grad_norm))
                .unwrap();
            return Err(Error::NonConvergence(format!(
                "Newton step limit {max_newton} reached for problem {} (gradient norm {:.3e}, \
                 relative target {:.3e})",
                worst.problem,
                worst.grad_norm,
                tol * worst.grad0.max(1.0)
            )));
        }
        // template over ALL K columns (frozen problems keep their last
        // curvature), rebuilt once per relinearization round
        let template = build_template(z, r_cols, c)?;

        let active: Vec<usize> = (0..kb).filter(|&i| !states[i].done).collect();
        let mut b_cols = DMatrix::zeros(n, active.len());
        let mut rc = DMatrix::zeros(n, active.len());
        let mut warm = DMatrix::zeros(r, active.len());
        let mut extra = betas.map(|_| DMatrix::zeros(r, active.len()));
        let mut caps = Vec::with_capacity(active.len());
        for (j, &i) in active.iter().enumerate() {
            b_cols.set_column(j, &states[i].b);
            rc.set_column(j, &states[i].r);
            warm.set_column(j, &states[i].alpha);
            if let (Some(e), Some(bv)) = (extra.as_mut(), states[i].beta.as_ref()) {
                e.set_column(j, bv);
            }
            // a full Newton step leaves a gradient of the order of the linear
            // residual, so the solve must land safely inside the Newton target
            caps.push(0.25 * tol * states[i].grad0.max(1.0));
        }
        let batch = NewtonBatch::new(&template, &rc, b_cols, extra, warm)?;
        let solved = stationary_solve_batch_capped(
            &template,
            z,
            batch,
            stat_tol,
            Some(&caps),
            stat_max_iters,
        )?;

        // accept steps and relinearize, each problem independently
        let solved_a = &solved.a;
        let step = |j: usize, s: &mut ProbState| {
            let target: DVector<f64> = solved_a.column(j).into();
            let mut accepted = None;
            let mut full = false;
            // full Newton step first, then halve toward the current iterate
            let mut stepsize = 1.0f64;
            for attempt in 0..60 {
                let cand: DVector<f64> = if attempt == 0 {
                    full = true;
                    target.clone()
                } else {
                    full = false;
                    &s.alpha + (&target - &s.alpha) * stepsize
                };
                match smooth_obj(family, &cand, &s.d, &s.y, s.beta.as_ref()) {
                    Ok(v) if v <= s.obj + 1e-12 * (1.0 + s.obj.abs()) => {
                        accepted = Some((cand, v));
                        break;
                    }
                    Ok(_) => {}
                    Err(e) => {
                        s.error = Some(e);
                        return;
                    }
                }
                if attempt > 0 {
                    stepsize *= 0.5;
                }
            }
            let Some((next, v)) = accepted else {
                s.error = Some(Error::NonConvergence(format!(
                    "line search failed for problem {} (objective {:.6e})",
                    s.problem, s.obj
                )));
                return;
            };
            if full {
                s.last_lin = s.alpha.clone();
            }
            s.last_full = full;
            s.iterations += 1;
            s.alpha = next;
            s.obj = v;
            let eta = z.tr_mul(&s.alpha);
            match family.linearize(&eta, &s.d, &s.y) {
                Ok(lin) => {
                    let mut grad = z * &lin.e;
                    grad.axpy(c, &s.alpha, 1.0);
                    if let Some(b) = &s.beta {
                        grad -= b;
                    }
                    s.grad_norm = grad.norm();
                    s.saturated |= lin.saturated;
                    s.b = lin.b;
                    s.r = lin.r;
                    // converge only off a full step so the final iterate is the
                    // exact solve of its recorded linearization
                    s.done = s.last_full && s.grad_norm <= tol * s.grad0.max(1.0);
                }
                Err(e) => s.error = Some(e),
            }
        };
        {
            // refs is ordered exactly like `active`, so refs[j] owns column j
            // of the solved batch
            let mut refs: Vec<&mut ProbState> = states.iter_mut().filter(|s| !s.done).collect();
            debug_assert_eq!(refs.len(), active.len());
            if refs.len() >= PAR_THRESHOLD {
                refs.par_iter_mut().enumerate().for_each(|(j, s)| step(j, s));
            } else {
                for (j, s) in refs.iter_mut().enumerate() {
                    step(j, s);
                }
            }
        }
        for s in states.iter_mut() {
            if let Some(e) = s.error.take() {
                return Err(e);
            }
            r_cols.set_column(s.problem, &s.r);
        }
    }

    for s in &states {
        alphas.set_column(s.problem, &s.alpha);
    }
    Ok(SmoothNewtonOutcome {
        iterations: states.iter().map(|s| s.iterations).collect(),
        grad_norm: states.iter().map(|s| s.grad_norm).collect(),
        grad0_norm: states.iter().map(|s| s.grad0).collect(),
        last_lin_alpha: states.iter().map(|s| s.last_lin.clone()).collect(),
        saturated: states.iter().map(|s| s.saturated).collect(),
    })
}

/// Ridge-penalized GLZ fit (`lambda1 = 0`) for every problem of the family,
/// by simultaneous IRLS in the reduced space. Returns one result per problem
/// with dense weights `w_k = Q alpha_k`.
///
/// `lambda2` must be strictly positive: the convergence condition of the
/// splitting iteration needs `2 lambda2 > 0` when `Z R_k Z'` is singular.
/// Stops when `||grad J_k|| <= tol * max(1, ||grad J_k(0)||)`.
pub fn ridge_irls_fit(
    x: &DMatrix<f64>,
    family: &GlzFamily,
    problems: &ProblemFamily,
    lambda2: f64,
    tol: f64,
    max_newton: usize,
) -> Result<Vec<FitResult>> {
    if !(lambda2 > 0.0) {
        return Err(Error::Validation(format!(
            "ridge fit requires lambda2 > 0, got {lambda2}"
        )));
    }
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
    let r = qr.r();
    let kk = problems.k();
    let mut alphas = DMatrix::zeros(r, kk);
    let mut r_cols = DMatrix::zeros(problems.n(), kk);
    let probs: Vec<usize> = (0..kk).collect();
    let stat_tol = (tol * 1e-3).clamp(1e-14, 1e-9);
    let outcome = batched_smooth_newton(
        &qr.z,
        family,
        &problems.d,
        &problems.y,
        &mut alphas,
        &mut r_cols,
        &probs,
        2.0 * lambda2,
        None,
        tol,
        max_newton,
        stat_tol,
        200_000,
    )?;
    let mut results = Vec::with_capacity(kk);
    for k in 0..kk {
        let alpha: DVector<f64> = alphas.column(k).into();
        let w = &qr.q * &alpha;
        let eta = qr.z.tr_mul(&alpha);
        let objective = family.negloglik(&eta, &problems.d.column(k).into(), &problems.y.column(k).into())?
            + lambda2 * alpha.norm_squared();
        let weights = SparseVec::from_dense(&w);
        results.push(FitResult {
            active_size: weights.nnz(),
            weights,
            objective,
            iterations: outcome.iterations[k],
            converged: true,
            kkt_residual: outcome.grad_norm[k] / outcome.grad0_norm[k].max(1.0),
            saturated: outcome.saturated[k],
        });
    }
    Ok(results)
}
