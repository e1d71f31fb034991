//! Generalized linear model families and per-problem linearization.
//!
//! A GLZ assumes `p(y|x) = exp((y*eta - b(eta))/a(phi) + c(y, phi))` with
//! linear predictor `eta = x'w`. The log-partition `b` determines the
//! conditional mean `mu = b'(eta)` and curvature `b''(eta)`. Dispersion is not
//! a runtime parameter: callers fold `1/a(phi)` into the trial weights `d`,
//! and the constant `c(y, phi)` is dropped (it does not depend on `w`), so
//! reported objective values exclude it.
//!
//! Generic convex losses `L(eta, y)` are supported through [`ConvexLoss`];
//! they must be convex and twice differentiable in `eta`.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Sigmoid saturation bound: means are clamped to `(SIGMOID_EPS, 1 - SIGMOID_EPS)`
/// so separable data cannot drive curvature or residuals to exact 0/NaN.
pub const SIGMOID_EPS: f64 = 1e-15;

/// Linear predictors are capped at this value before exponentiation
/// (just below the f64 overflow bound for `exp`); a capped evaluation marks
/// the linearization as saturated.
pub const ETA_CAP: f64 = 700.0;

/// A generic convex, twice differentiable loss `L(eta, y)`.
///
/// `d2` must be non-negative wherever it is evaluated; the solver checks this
/// at every linearization and reports a convexity violation otherwise.
pub trait ConvexLoss: Send + Sync {
    fn loss(&self, eta: f64, y: f64) -> f64;
    /// First derivative of the loss with respect to `eta`.
    fn d1(&self, eta: f64, y: f64) -> f64;
    /// Second derivative of the loss with respect to `eta`.
    fn d2(&self, eta: f64, y: f64) -> f64;
}

/// An exponential-family model (or a custom convex loss) supplying the
/// quantities the solver needs: log-partition, mean, and curvature.
#[derive(Clone)]
pub enum GlzFamily {
    /// Gaussian response, identity link: `b(eta) = eta^2 / 2`.
    LinearGaussian,
    /// Bernoulli response in {0, 1}, logit link: `b(eta) = log(1 + exp(eta))`.
    Logistic,
    /// Poisson response, log link: `b(eta) = exp(eta)`.
    Poisson,
    /// Generic convex loss; `negloglik` becomes `sum_i d_i L(eta_i, y_i)`.
    Custom(Arc<dyn ConvexLoss>),
}

impl std::fmt::Debug for GlzFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GlzFamily::LinearGaussian => write!(f, "LinearGaussian"),
            GlzFamily::Logistic => write!(f, "Logistic"),
            GlzFamily::Poisson => write!(f, "Poisson"),
            GlzFamily::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Quadratic-approximation quantities for one problem at an expansion point.
///
/// Invariants: `r >= 0` element-wise, `b = r .* eta - e` exactly, and any
/// trial with weight `d_i = 0` has `e_i = r_i = b_i = 0`.
#[derive(Debug, Clone)]
pub struct Linearization {
    /// Linear predictor at the expansion point.
    pub eta: DVector<f64>,
    /// Weighted residual `e_i = d_i * (mu(eta_i) - y_i)`; the gradient of the
    /// negative log-likelihood is `X * e`.
    pub e: DVector<f64>,
    /// Curvature diagonal `r_i = d_i * b''(eta_i)`; the Hessian is `X R X'`.
    pub r: DVector<f64>,
    /// Right-hand side `b = r .* eta - e` of the Newton linear system.
    pub b: DVector<f64>,
    /// True when any predictor hit the exponential cap (Poisson).
    pub saturated: bool,
}

fn sigmoid(eta: f64) -> f64 {
    let s = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let t = eta.exp();
        t / (1.0 + t)
    };
    s.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)
}

/// `log(1 + exp(eta))` without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

impl GlzFamily {
    /// Log-partition `b(eta)` of a built-in family.
    ///
    /// Not defined for `Custom` losses (they are not given in exponential
    /// family form), which yields an unsupported-operation error.
    pub fn b_value(&self, eta: f64) -> Result<f64> {
        match self {
            GlzFamily::LinearGaussian => Ok(0.5 * eta * eta),
            GlzFamily::Logistic => Ok(softplus(eta)),
            GlzFamily::Poisson => Ok(eta.min(ETA_CAP).exp()),
            GlzFamily::Custom(_) => Err(Error::Unsupported(
                "b(eta) is not defined for custom convex losses".into(),
            )),
        }
    }

    /// Mean `b'(eta)` and curvature `b''(eta)` at one point.
    ///
    /// For `Custom`, returns the loss derivatives `dL/deta` and `d2L/deta2`
    /// instead (the generalized residual slope and curvature). Overflowing
    /// exponentials saturate rather than producing non-finite values.
    pub fn mean_and_curvature(&self, eta: f64, y: f64) -> (f64, f64) {
        match self {
            GlzFamily::LinearGaussian => (eta, 1.0),
            GlzFamily::Logistic => {
                let mu = sigmoid(eta);
                (mu, mu * (1.0 - mu))
            }
            GlzFamily::Poisson => {
                let m = eta.min(ETA_CAP).exp();
                (m, m)
            }
            GlzFamily::Custom(loss) => (loss.d1(eta, y), loss.d2(eta, y)),
        }
    }

    /// Whether evaluating at `eta` saturates (hits the exponential cap).
    fn saturates_at(&self, eta: f64) -> bool {
        matches!(self, GlzFamily::Poisson) && eta > ETA_CAP
    }

    /// Trial-weighted negative log-likelihood
    /// `-sum_i d_i * [y_i * eta_i - b(eta_i)]`
    /// (for `Custom`: `sum_i d_i * L(eta_i, y_i)`).
    pub fn negloglik(&self, eta: &DVector<f64>, d: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let n = eta.len();
        if d.len() != n || y.len() != n {
            return Err(Error::Dimension(format!(
                "negloglik: eta has {} entries, d has {}, y has {}",
                n,
                d.len(),
                y.len()
            )));
        }
        let mut acc = 0.0;
        for i in 0..n {
            if d[i] == 0.0 {
                continue; // excluded trial: no influence, independent of y_i
            }
            let term = match self {
                GlzFamily::Custom(loss) => loss.loss(eta[i], y[i]),
                _ => {
                    let b = self.b_value(eta[i])?;
                    b - y[i] * eta[i]
                }
            };
            acc += d[i] * term;
        }
        Ok(acc)
    }

    /// Builds the quadratic-approximation quantities at expansion point
    /// `eta_bar`: `e = d .* (mu - y)`, `r = d .* b''`, `b = r .* eta_bar - e`.
    pub fn linearize(
        &self,
        eta_bar: &DVector<f64>,
        d: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<Linearization> {
        let n = eta_bar.len();
        if d.len() != n || y.len() != n {
            return Err(Error::Dimension(format!(
                "linearize: eta has {} entries, d has {}, y has {}",
                n,
                d.len(),
                y.len()
            )));
        }
        let mut e = DVector::zeros(n);
        let mut r = DVector::zeros(n);
        let mut b = DVector::zeros(n);
        let mut saturated = false;
        for i in 0..n {
            let di = d[i];
            if di < 0.0 {
                return Err(Error::Validation(format!(
                    "trial weight d[{i}] = {di} is negative"
                )));
            }
            if di == 0.0 {
                continue; // e_i = r_i = b_i = 0 exactly
            }
            let (mu, curv) = self.mean_and_curvature(eta_bar[i], y[i]);
            if curv < 0.0 {
                return Err(Error::Convexity {
                    eta: eta_bar[i],
                    curvature: curv,
                });
            }
            saturated |= self.saturates_at(eta_bar[i]);
            e[i] = di * (mu - y[i]);
            r[i] = di * curv;
            b[i] = r[i] * eta_bar[i] - e[i];
        }
        Ok(Linearization {
            eta: eta_bar.clone(),
            e,
            r,
            b,
            saturated,
        })
    }

    /// Validates a response vector for this family (Logistic requires {0,1}
    /// coding; see the crate-level docs).
    pub fn validate_response(&self, y: &DVector<f64>) -> Result<()> {
        if let GlzFamily::Logistic = self {
            for (i, &v) in y.iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Validation(format!(
                        "logistic responses must be coded 0/1, got y[{i}] = {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randvec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(lo..hi))
    }

    #[test]
    fn b_values_match_table() {
        assert_relative_eq!(
            GlzFamily::Logistic.b_value(0.0).unwrap(),
            2.0f64.ln(),
            max_relative = 1e-15
        );
        assert_relative_eq!(GlzFamily::LinearGaussian.b_value(2.0).unwrap(), 2.0);
        assert_relative_eq!(GlzFamily::Poisson.b_value(0.0).unwrap(), 1.0);
    }

    #[test]
    fn b_value_unsupported_for_custom() {
        struct Sq;
        impl ConvexLoss for Sq {
            fn loss(&self, eta: f64, y: f64) -> f64 {
                0.5 * (eta - y).powi(2)
            }
            fn d1(&self, eta: f64, y: f64) -> f64 {
                eta - y
            }
            fn d2(&self, _: f64, _: f64) -> f64 {
                1.0
            }
        }
        let fam = GlzFamily::Custom(Arc::new(Sq));
        assert!(matches!(fam.b_value(1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn mean_and_curvature_known_points() {
        let (mu, c) = GlzFamily::Logistic.mean_and_curvature(0.0, 0.0);
        assert_relative_eq!(mu, 0.5);
        assert_relative_eq!(c, 0.25);
        let (mu, c) = GlzFamily::LinearGaussian.mean_and_curvature(3.5, 0.0);
        assert_relative_eq!(mu, 3.5);
        assert_relative_eq!(c, 1.0);
        let (mu, c) = GlzFamily::Poisson.mean_and_curvature(1.0, 0.0);
        assert_relative_eq!(mu, std::f64::consts::E);
        assert_relative_eq!(c, std::f64::consts::E);
    }

    #[test]
    fn extreme_eta_saturates_without_nan() {
        for fam in [GlzFamily::Logistic, GlzFamily::Poisson] {
            for eta in [-1e8, -800.0, 800.0, 1e8] {
                let (mu, c) = fam.mean_and_curvature(eta, 1.0);
                assert!(mu.is_finite() && c.is_finite(), "{fam:?} at eta={eta}");
                assert!(c >= 0.0);
                assert!(fam.b_value(eta).unwrap().is_finite());
            }
        }
        // logistic mean stays strictly inside (0, 1)
        let (mu, _) = GlzFamily::Logistic.mean_and_curvature(1e8, 1.0);
        assert!(mu < 1.0 && mu > 0.0);
    }

    #[test]
    fn negloglik_logistic_at_zero() {
        let n = 7;
        let eta = DVector::zeros(n);
        let d = DVector::from_element(n, 1.0);
        let y = DVector::from_fn(n, |i, _| (i % 2) as f64);
        let v = GlzFamily::Logistic.negloglik(&eta, &d, &y).unwrap();
        assert_relative_eq!(v, n as f64 * 2.0f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn negloglik_zero_weights_null_objective() {
        let n = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eta = randvec(&mut rng, n, -2.0, 2.0);
        let y = randvec(&mut rng, n, 0.0, 3.0);
        let d = DVector::zeros(n);
        for fam in [
            GlzFamily::LinearGaussian,
            GlzFamily::Logistic,
            GlzFamily::Poisson,
        ] {
            assert_eq!(fam.negloglik(&eta, &d, &y).unwrap(), 0.0);
        }
    }

    #[test]
    fn negloglik_poisson_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 9;
        let eta = randvec(&mut rng, n, -1.5, 1.5);
        let d = randvec(&mut rng, n, 0.0, 2.0);
        let y = DVector::from_fn(n, |_, _| rng.gen_range(0..5) as f64);
        // independent elementwise sum
        let mut expect = 0.0;
        for i in 0..n {
            expect -= d[i] * (y[i] * eta[i] - eta[i].exp());
        }
        let got = GlzFamily::Poisson.negloglik(&eta, &d, &y).unwrap();
        assert_relative_eq!(got, expect, max_relative = 1e-13);
    }

    #[test]
    fn negloglik_length_mismatch_errors() {
        let eta = DVector::zeros(3);
        let d = DVector::zeros(4);
        let y = DVector::zeros(3);
        assert!(matches!(
            GlzFamily::Logistic.negloglik(&eta, &d, &y),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn linearize_logistic_at_zero() {
        let n = 4;
        let eta = DVector::zeros(n);
        let d = DVector::from_element(n, 1.0);
        let y = DVector::from_fn(n, |i, _| (i % 2) as f64);
        let lin = GlzFamily::Logistic.linearize(&eta, &d, &y).unwrap();
        for i in 0..n {
            assert_relative_eq!(lin.e[i], 0.5 - y[i]);
            assert_relative_eq!(lin.r[i], 0.25);
            assert_relative_eq!(lin.b[i], y[i] - 0.5);
        }
        assert!(!lin.saturated);
    }

    #[test]
    fn linearize_excluded_trial_is_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let eta = randvec(&mut rng, n, -2.0, 2.0);
        let mut d = randvec(&mut rng, n, 0.5, 1.5);
        d[2] = 0.0;
        let y = DVector::from_fn(n, |i, _| (i % 2) as f64);
        let lin = GlzFamily::Logistic.linearize(&eta, &d, &y).unwrap();
        assert_eq!(lin.e[2], 0.0);
        assert_eq!(lin.r[2], 0.0);
        assert_eq!(lin.b[2], 0.0);

        // perturbing y and eta at the excluded trial changes nothing
        let mut eta2 = eta.clone();
        let mut y2 = y.clone();
        eta2[2] = 17.0;
        y2[2] = 1.0 - y2[2];
        let lin2 = GlzFamily::Logistic.linearize(&eta2, &d, &y2).unwrap();
        assert_eq!(lin.e, lin2.e);
        assert_eq!(lin.r, lin2.r);
        assert_eq!(lin.b, lin2.b);
        let v1 = GlzFamily::Logistic.negloglik(&eta, &d, &y).unwrap();
        let v2 = GlzFamily::Logistic.negloglik(&eta2, &d, &y2).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn linearize_negative_weight_errors() {
        let eta = DVector::zeros(2);
        let d = DVector::from_vec(vec![1.0, -0.5]);
        let y = DVector::zeros(2);
        assert!(matches!(
            GlzFamily::Logistic.linearize(&eta, &d, &y),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn linearize_nonconvex_custom_errors() {
        struct Bad;
        impl ConvexLoss for Bad {
            fn loss(&self, eta: f64, _: f64) -> f64 {
                -eta * eta
            }
            fn d1(&self, eta: f64, _: f64) -> f64 {
                -2.0 * eta
            }
            fn d2(&self, _: f64, _: f64) -> f64 {
                -2.0
            }
        }
        let fam = GlzFamily::Custom(Arc::new(Bad));
        let eta = DVector::from_element(2, 0.3);
        let d = DVector::from_element(2, 1.0);
        let y = DVector::zeros(2);
        assert!(matches!(
            fam.linearize(&eta, &d, &y),
            Err(Error::Convexity { .. })
        ));
    }

    /// Central finite differences of the negative log-likelihood in eta must
    /// match the analytic residual e (gradient) and curvature r (Hessian
    /// diagonal) for every built-in family.
    #[test]
    fn gradient_and_curvature_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 8;
        let h = 1e-6;
        let h2 = 1e-4; // wider step for the second difference (cancellation)
        for fam in [
            GlzFamily::LinearGaussian,
            GlzFamily::Logistic,
            GlzFamily::Poisson,
        ] {
            for _ in 0..20 {
                let eta = randvec(&mut rng, n, -1.5, 1.5);
                let d = randvec(&mut rng, n, 0.0, 2.0);
                let y = match fam {
                    GlzFamily::Logistic => DVector::from_fn(n, |_, _| rng.gen_range(0..2) as f64),
                    GlzFamily::Poisson => DVector::from_fn(n, |_, _| rng.gen_range(0..6) as f64),
                    _ => randvec(&mut rng, n, -2.0, 2.0),
                };
                let lin = fam.linearize(&eta, &d, &y).unwrap();
                let f0 = fam.negloglik(&eta, &d, &y).unwrap();
                for i in 0..n {
                    let eval = |delta: f64| {
                        let mut e = eta.clone();
                        e[i] += delta;
                        fam.negloglik(&e, &d, &y).unwrap()
                    };
                    let g = (eval(h) - eval(-h)) / (2.0 * h);
                    let c = (eval(h2) - 2.0 * f0 + eval(-h2)) / (h2 * h2);
                    assert_relative_eq!(g, lin.e[i], max_relative = 1e-6, epsilon = 1e-8);
                    assert_relative_eq!(c, lin.r[i], max_relative = 1e-5, epsilon = 1e-6);
                    assert!(lin.r[i] >= 0.0);
                    // b = r .* eta - e exactly
                    assert_eq!(lin.b[i], lin.r[i] * eta[i] - lin.e[i]);
                }
            }
        }
    }
}
