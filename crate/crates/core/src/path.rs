//! Regularization paths: grid construction under the `(alpha, lambda)`
//! parameterization and warm-started sweeps over all problems.
//!
//! Penalties at each grid point are `lambda1 = alpha * lambda` and
//! `lambda2 = 0.5 * (1 - alpha) * lambda`. The sweep walks the grid from the
//! largest `lambda` down, carrying the per-problem ADMM state (and
//! re-screening active sets with the sequential strong rule) so later points
//! start warm.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::admm::{AdmmConfig, AdmmEngine, FitResult};
use crate::error::{Error, Result};
use crate::glz::GlzFamily;
use crate::problems::ProblemFamily;

/// Path parameterization.
#[derive(Debug, Clone)]
pub struct PathConfig {
    /// Elastic-net mixing weight in `(0, 1]` (1 = pure lasso).
    pub alpha_mix: f64,
    /// Grid length when no explicit grid is given.
    pub n_lambda: usize,
    /// Ratio of the smallest to the largest grid value.
    pub lambda_min_ratio: f64,
    /// Explicit decreasing grid overriding the generated one.
    pub explicit_grid: Option<Vec<f64>>,
}

impl PathConfig {
    pub fn new(alpha_mix: f64) -> Self {
        PathConfig {
            alpha_mix,
            n_lambda: 100,
            lambda_min_ratio: 0.01,
            explicit_grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_mix > 0.0 && self.alpha_mix <= 1.0) {
            return Err(Error::Validation(format!(
                "alpha_mix must lie in (0, 1], got {}",
                self.alpha_mix
            )));
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio < 1.0) {
            return Err(Error::Validation(format!(
                "lambda_min_ratio must lie in (0, 1), got {}",
                self.lambda_min_ratio
            )));
        }
        if let Some(grid) = &self.explicit_grid {
            if grid.is_empty() {
                return Err(Error::Validation("explicit grid is empty".into()));
            }
            for w in grid.windows(2) {
                if !(w[1] < w[0]) {
                    return Err(Error::Validation(
                        "explicit grid must be strictly decreasing".into(),
                    ));
                }
            }
            if grid.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Validation("grid values must be positive".into()));
            }
        } else if self.n_lambda < 1 {
            return Err(Error::Validation("n_lambda must be at least 1".into()));
        }
        Ok(())
    }

    /// `(lambda1, lambda2)` at one grid value.
    pub fn penalties(&self, lambda: f64) -> (f64, f64) {
        (
            self.alpha_mix * lambda,
            0.5 * (1.0 - self.alpha_mix) * lambda,
        )
    }
}

/// One grid point of a completed sweep.
#[derive(Debug, Clone, Serialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub results: Vec<FitResult>,
    /// Mean support size over the problems.
    pub mean_active: f64,
    pub seconds: f64,
    /// True when this point's fit failed and the sweep moved on.
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathResult {
    pub grid: Vec<f64>,
    pub points: Vec<PathPoint>,
}

/// Smallest `lambda` at which the all-zero solution is optimal for every
/// problem: `max_{k,j} |grad_j l_k(0)| / alpha_mix`.
pub fn lambda_max(
    x: &DMatrix<f64>,
    family: &GlzFamily,
    problems: &ProblemFamily,
    alpha_mix: f64,
) -> Result<f64> {
    if !(alpha_mix > 0.0) {
        return Err(Error::Validation(
            "alpha_mix must be positive (a pure ridge path has no finite head)".into(),
        ));
    }
    let engine = AdmmEngine::new(x, family, problems)?;
    Ok(engine.lambda1_max(None)? / alpha_mix)
}

/// Log-spaced decreasing grid from `lambda_max` to
/// `lambda_max * lambda_min_ratio` (inclusive endpoints).
pub fn lambda_grid(lambda_max: f64, n_lambda: usize, lambda_min_ratio: f64) -> Result<Vec<f64>> {
    if n_lambda < 2 {
        return Err(Error::Validation("lambda_grid needs n_lambda >= 2".into()));
    }
    if !(lambda_max > 0.0) || !(lambda_min_ratio > 0.0 && lambda_min_ratio < 1.0) {
        return Err(Error::Validation(format!(
            "need lambda_max > 0 and ratio in (0, 1), got {lambda_max}, {lambda_min_ratio}"
        )));
    }
    let mut grid = Vec::with_capacity(n_lambda);
    let log_ratio = lambda_min_ratio.ln();
    for i in 0..n_lambda {
        let t = i as f64 / (n_lambda - 1) as f64;
        grid.push(lambda_max * (t * log_ratio).exp());
    }
    grid[0] = lambda_max;
    grid[n_lambda - 1] = lambda_max * lambda_min_ratio;
    Ok(grid)
}

/// Warm-started sweep over the whole grid for all `K` problems.
///
/// `admm_base` supplies everything but the penalties (tolerances, `s_max`,
/// groups, mask, optional `mu` override); `lambda1`/`lambda2` are set per
/// grid point. A failing grid point is recorded with `failed = true` and the
/// sweep continues from the last good state.
pub fn fit_path(
    x: &DMatrix<f64>,
    family: &GlzFamily,
    problems: &ProblemFamily,
    path_config: &PathConfig,
    admm_base: &AdmmConfig,
) -> Result<PathResult> {
    path_config.validate()?;
    let engine = AdmmEngine::new(x, family, problems)?;
    let grid = match &path_config.explicit_grid {
        Some(g) => g.clone(),
        None => {
            let lmax =
                engine.lambda1_max(admm_base.penalty_mask.as_deref())? / path_config.alpha_mix;
            if path_config.n_lambda == 1 {
                vec![lmax]
            } else {
                lambda_grid(lmax, path_config.n_lambda, path_config.lambda_min_ratio)?
            }
        }
    };

    let mut points = Vec::with_capacity(grid.len());
    let mut last_good: Option<(f64, crate::admm::AdmmState)> = None;
    for (gi, &lambda) in grid.iter().enumerate() {
        let (lambda1, lambda2) = path_config.penalties(lambda);
        let mut config = admm_base.clone();
        config.lambda1 = lambda1;
        config.lambda2 = lambda2;
        config.validate(x.nrows())?;

        // prepare state: fresh screen at the head, sequential re-screen after
        let prepared: Result<crate::admm::AdmmState> = (|| match &last_good {
            None => {
                let sets = engine.screen_initial(&config)?;
                engine.init_state(sets)
            }
            Some((prev_l1, good)) => {
                let mut st = good.clone();
                engine.rescreen_state(&mut st, &config, *prev_l1)?;
                Ok(st)
            }
        })();

        let start = Instant::now();
        let outcome = prepared.and_then(|mut st| {
            let results = engine.fit_with_state(&mut st, &config)?;
            Ok((st, results))
        });
        let seconds = start.elapsed().as_secs_f64();
        match outcome {
            Ok((st, results)) => {
                let mean_active = if results.is_empty() {
                    0.0
                } else {
                    results.iter().map(|r| r.active_size as f64).sum::<f64>()
                        / results.len() as f64
                };
                points.push(PathPoint {
                    lambda,
                    lambda1,
                    lambda2,
                    results,
                    mean_active,
                    seconds,
                    failed: false,
                });
                last_good = Some((lambda1, st));
            }
            Err(err) => {
                if gi == 0 {
                    // no warm start to fall back to
                    return Err(err);
                }
                points.push(PathPoint {
                    lambda,
                    lambda1,
                    lambda2,
                    results: Vec::new(),
                    mean_active: 0.0,
                    seconds,
                    failed: true,
                });
                // keep last_good untouched; the next point warm-starts from it
            }
        }
    }
    Ok(PathResult { grid, points })
}
