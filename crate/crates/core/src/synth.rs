//! Seeded synthetic data for benchmarks and tests.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Standard normal draw by Box-Muller (keeps the dependency surface small
/// and the stream layout stable).
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `p x n` design with i.i.d. standard normal entries.
pub fn gaussian_design(p: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(p, n, |_, _| standard_normal(&mut rng))
}

/// Sparse ground-truth weights: `nnz` random positions with +-`scale`
/// magnitudes.
pub fn sparse_true_weights(p: usize, nnz: usize, scale: f64, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut idx: Vec<usize> = (0..p).collect();
    idx.shuffle(&mut rng);
    let mut w = DVector::zeros(p);
    for &j in idx.iter().take(nnz.min(p)) {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        w[j] = sign * scale * rng.gen_range(0.5..1.5);
    }
    w
}

/// Bernoulli labels from the logistic model at `eta = X' w`.
pub fn logistic_labels(x: &DMatrix<f64>, w: &DVector<f64>, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2545_f491_4f6c_dd1d);
    let eta = x.tr_mul(w);
    DVector::from_fn(x.ncols(), |i, _| {
        let p = 1.0 / (1.0 + (-eta[i]).exp());
        if rng.gen_range(0.0..1.0) < p {
            1.0
        } else {
            0.0
        }
    })
}

/// A planted logistic instance: normal design plus labels generated from a
/// sparse signal scaled so the classes are separable but not trivially so.
pub fn logistic_instance(p: usize, n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let x = gaussian_design(p, n, seed);
    let nnz = (p / 20).clamp(3, 40);
    let w = sparse_true_weights(p, nnz, 1.0 / (nnz as f64).sqrt(), seed);
    let y = logistic_labels(&x, &w, seed);
    (x, y)
}

/// `T x K` AR(`coeffs.len()`) noise series
/// `u_t = sum_i coeffs[i] * u_{t-1-i} + sigma * eps_t` with a burn-in so the
/// process is near-stationary from the first kept sample.
pub fn ar_noise_series(t: usize, k: usize, coeffs: &[f64], sigma: f64, seed: u64) -> DMatrix<f64> {
    let order = coeffs.len();
    let burn = 50 + 10 * order;
    let mut out = DMatrix::zeros(t, k);
    for col in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(col as u64);
        let mut hist = vec![0.0f64; t + burn];
        for i in 0..t + burn {
            let mut v = sigma * standard_normal(&mut rng);
            for (j, &c) in coeffs.iter().enumerate() {
                if i > j {
                    v += c * hist[i - 1 - j];
                }
            }
            hist[i] = v;
        }
        for i in 0..t {
            out[(i, col)] = hist[burn + i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_by_seed() {
        assert_eq!(gaussian_design(5, 4, 7), gaussian_design(5, 4, 7));
        let (x1, y1) = logistic_instance(20, 10, 3);
        let (x2, y2) = logistic_instance(20, 10, 3);
        assert_eq!(x1, x2);
        assert_eq!(y1, y2);
        assert!(y1.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn normal_moments_are_sane() {
        let x = gaussian_design(100, 100, 11);
        let mean = x.sum() / 10_000.0;
        let var = x.iter().map(|v| v * v).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }
}
