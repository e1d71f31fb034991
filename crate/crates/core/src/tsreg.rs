//! Frequency-domain simultaneous generalized least squares for `K`
//! time-series sharing one design matrix.
//!
//! Model: `y_k = X w_k + eps_k` with AR noise per series. An AR whitening
//! filter, zero-padded until its convolution matrix is circulant, is
//! diagonalized by the DFT: the whitened normal equations become
//! `(Xh^H S_k Xh) w_k = Xh^H S_k yh_k` where `Xh`, `yh_k` are DFT
//! coefficients and `S_k = R_k^H R_k` is the real non-negative diagonal of
//! squared filter magnitudes. Since `X` is real, these systems are real and
//! map onto the template machinery of [`crate::newton`] through the stacked
//! real/imaginary embedding, with the template diagonal taken as the
//! element-wise maximum of the `S_k`.
//!
//! Only circulant (i.e. sufficiently padded) noise structure is represented
//! exactly; for merely Toeplitz truth the padding is an approximation.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::newton::{build_template, stationary_solve_batch, NewtonBatch};

/// A batch of `K` series regressed on one shared design.
#[derive(Debug, Clone)]
pub struct TimeSeriesBatch {
    /// `T x q` design (time by regressors).
    pub design: DMatrix<f64>,
    /// `T x K` responses, one series per column.
    pub series: DMatrix<f64>,
    /// Circulant embedding length (must cover `T` plus the filter order).
    pub pad_length: usize,
}

impl TimeSeriesBatch {
    pub fn new(design: DMatrix<f64>, series: DMatrix<f64>, pad_length: usize) -> Result<Self> {
        if design.nrows() != series.nrows() {
            return Err(Error::Dimension(format!(
                "design covers {} time points, series {}",
                design.nrows(),
                series.nrows()
            )));
        }
        if pad_length < design.nrows() {
            return Err(Error::Validation(format!(
                "pad_length {} is shorter than the series ({})",
                pad_length,
                design.nrows()
            )));
        }
        Ok(TimeSeriesBatch {
            design,
            series,
            pad_length,
        })
    }

    pub fn t(&self) -> usize {
        self.design.nrows()
    }
    pub fn q(&self) -> usize {
        self.design.ncols()
    }
    pub fn k(&self) -> usize {
        self.series.ncols()
    }
}

/// Smallest power of two at or above `m`.
pub fn next_pow2(m: usize) -> usize {
    m.next_power_of_two()
}

fn is_pow2(m: usize) -> bool {
    m.is_power_of_two()
}

/// In-place iterative radix-2 Cooley-Tukey, forward sign convention
/// `exp(-2 pi i f t / m)`. Length must be a power of two.
fn fft_pow2(a: &mut [Complex64]) {
    let m = a.len();
    debug_assert!(is_pow2(m));
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..m {
        let mut bit = m >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            a.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= m {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        let mut i = 0;
        while i < m {
            let mut w = Complex64::new(1.0, 0.0);
            for offset in 0..len / 2 {
                let u = a[i + offset];
                let v = a[i + offset + len / 2] * w;
                a[i + offset] = u + v;
                a[i + offset + len / 2] = u - v;
                w *= wlen;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Direct `O(m^2)` DFT with the same convention; the oracle for the FFT and
/// the fallback for non-power-of-two lengths.
fn dft_naive(x: &[Complex64]) -> Vec<Complex64> {
    let m = x.len();
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    for (f, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (t, &v) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (f as f64) * (t as f64) / m as f64;
            acc += v * Complex64::new(ang.cos(), ang.sin());
        }
        *o = acc;
    }
    out
}

/// Unitary DFT of a real signal: `x_hat(f) = (1/sqrt(m)) sum_t x(t) e^{-2 pi i f t / m}`,
/// so `||x_hat|| = ||x||`. Radix-2 FFT for power-of-two lengths, direct
/// summation otherwise.
pub fn dft(x: &DVector<f64>) -> Vec<Complex64> {
    let m = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut out = if is_pow2(m) {
        fft_pow2(&mut buf);
        buf
    } else {
        dft_naive(&buf)
    };
    let scale = 1.0 / (m as f64).sqrt();
    for v in &mut out {
        *v *= scale;
    }
    out
}

/// Per-series whitening spec: the real non-negative diagonals of
/// `R_k^H R_k` (squared DFT magnitudes of each AR whitening filter),
/// one `pad_length` column per series.
#[derive(Debug, Clone)]
pub struct WhitenSpec {
    pub ar_order: usize,
    /// `pad_length x K` squared filter magnitudes per frequency.
    pub weights: DMatrix<f64>,
}

/// Ordinary least squares per column (the initial `V = I` fit), returning
/// the residual matrix.
pub fn ols_residuals(design: &DMatrix<f64>, series: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if design.nrows() != series.nrows() {
        return Err(Error::Dimension(format!(
            "design covers {} time points, series {}",
            design.nrows(),
            series.nrows()
        )));
    }
    let qr = design.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let mut resid = series.clone();
    for k in 0..series.ncols() {
        let y: DVector<f64> = series.column(k).into();
        let qty = q.tr_mul(&y);
        let w = r
            .clone()
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::Numerical("rank-deficient design in OLS".into()))?;
        let fitted = design * &w;
        resid.set_column(k, &(y - fitted));
    }
    Ok(resid)
}

/// Estimates one AR(order) whitening filter per series from initial-fit
/// residuals by Yule-Walker with the biased autocovariance, and stores the
/// squared DFT magnitudes of each zero-padded filter.
///
/// `ar_order = 0` yields the identity filter (all spec diagonals equal).
pub fn estimate_ar_whitener(
    residuals: &DMatrix<f64>,
    ar_order: usize,
    pad_length: usize,
) -> Result<WhitenSpec> {
    let t = residuals.nrows();
    let k = residuals.ncols();
    if pad_length < t + ar_order {
        return Err(Error::Validation(format!(
            "pad_length {pad_length} too short for T = {t} plus filter order {ar_order}"
        )));
    }
    if ar_order >= t {
        return Err(Error::Validation(format!(
            "AR order {ar_order} needs more than {t} samples"
        )));
    }
    let mut weights = DMatrix::zeros(pad_length, k);
    for col in 0..k {
        let r: DVector<f64> = residuals.column(col).into();
        // biased autocovariance c(h) = (1/T) sum_t r_t r_{t+h}
        let mut cov = vec![0.0f64; ar_order + 1];
        for (h, c) in cov.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..t - h {
                acc += r[i] * r[i + h];
            }
            *c = acc / t as f64;
        }
        if cov[0] <= 0.0 {
            return Err(Error::Numerical(format!(
                "series {col} has degenerate residual variance"
            )));
        }
        // Yule-Walker: Toeplitz(c_0..c_{p-1}) phi = (c_1..c_p)
        let mut filter = vec![1.0f64];
        if ar_order > 0 {
            let toep = DMatrix::from_fn(ar_order, ar_order, |i, j| cov[i.abs_diff(j)]);
            let rhs = DVector::from_fn(ar_order, |i, _| cov[i + 1]);
            let phi = toep.lu().solve(&rhs).ok_or_else(|| {
                Error::Numerical(format!(
                    "series {col}: Yule-Walker system is singular (degenerate residuals)"
                ))
            })?;
            filter.extend(phi.iter().map(|&p| -p));
        }
        // squared magnitudes of the zero-padded filter DFT
        let mut padded = DVector::zeros(pad_length);
        for (i, &f) in filter.iter().enumerate() {
            padded[i] = f;
        }
        let spec = dft(&padded);
        for (f, s) in spec.iter().enumerate() {
            weights[(f, col)] = s.norm_sqr();
        }
    }
    Ok(WhitenSpec { ar_order, weights })
}

/// Applies an AR filter `[1, a_1, ..., a_p]` cyclically over `pad` samples
/// (test/diagnostic helper for building explicit circulant whiteners).
pub fn circulant_filter_matrix(filter: &[f64], pad: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(pad, pad);
    for t in 0..pad {
        for (j, &a) in filter.iter().enumerate() {
            let src = (t + pad - j) % pad;
            c[(t, src)] += a;
        }
    }
    c
}

/// Solves all `K` whitened normal equations
/// `(Xh^H S_k Xh) w_k = Xh^H S_k yh_k` at once via the element-wise-max
/// template and the stationary batch iteration, to per-column relative
/// residual `tol`. Returns the `q x K` coefficient matrix.
pub fn gls_solve_freq_batch(
    batch: &TimeSeriesBatch,
    spec: &WhitenSpec,
    tol: f64,
) -> Result<DMatrix<f64>> {
    let (t, q, k) = (batch.t(), batch.q(), batch.k());
    let pad = batch.pad_length;
    if spec.weights.nrows() != pad || spec.weights.ncols() != k {
        return Err(Error::Dimension(format!(
            "whitening spec is {:?}, expected ({pad}, {k})",
            spec.weights.shape()
        )));
    }
    if q > pad {
        return Err(Error::Validation(format!(
            "more regressors ({q}) than padded samples ({pad})"
        )));
    }
    if spec.weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::Validation(
            "whitening diagonals must be finite and non-negative".into(),
        ));
    }

    // DFT of the zero-padded design columns, stacked as a real (q x 2 pad)
    // factor: G_k = Zr diag([s_k; s_k]) Zr'
    let mut zr = DMatrix::zeros(q, 2 * pad);
    let mut padded = DVector::zeros(pad);
    for a in 0..q {
        padded.fill(0.0);
        for i in 0..t {
            padded[i] = batch.design[(i, a)];
        }
        let xhat = dft(&padded);
        for f in 0..pad {
            zr[(a, f)] = xhat[f].re;
            zr[(a, pad + f)] = xhat[f].im;
        }
    }

    // one weight column per problem, duplicated over the re/im blocks
    let mut r_cols = DMatrix::zeros(2 * pad, k);
    for kk in 0..k {
        for f in 0..pad {
            r_cols[(f, kk)] = spec.weights[(f, kk)];
            r_cols[(pad + f, kk)] = spec.weights[(f, kk)];
        }
    }

    // b_k = [s_k .* Re(yh_k); s_k .* Im(yh_k)] so that Zr b_k = Xh^H S_k yh_k
    let mut b = DMatrix::zeros(2 * pad, k);
    for kk in 0..k {
        padded.fill(0.0);
        for i in 0..t {
            padded[i] = batch.series[(i, kk)];
        }
        let yhat = dft(&padded);
        for f in 0..pad {
            b[(f, kk)] = spec.weights[(f, kk)] * yhat[f].re;
            b[(pad + f, kk)] = spec.weights[(f, kk)] * yhat[f].im;
        }
    }

    let template = build_template(&zr, &r_cols, 0.0).map_err(|e| match e {
        Error::Numerical(_) => Error::Numerical(
            "whitened design is rank deficient; consider a ridge fallback \
             (add a small diagonal to the normal equations)"
                .into(),
        ),
        other => other,
    })?;
    let newton = NewtonBatch::new(&template, &r_cols, b, None, DMatrix::zeros(q, k))?;
    let solved = stationary_solve_batch(&template, &zr, newton, tol, 1000)?;
    Ok(solved.a)
}

/// End-to-end pipeline: OLS residuals, AR whitener estimation, whitened
/// batch solve. `pad` defaults to the next power of two at or above
/// `T + 2 * ar_order`.
pub fn tsreg_pipeline(
    design: &DMatrix<f64>,
    series: &DMatrix<f64>,
    ar_order: usize,
    pad: Option<usize>,
    tol: f64,
) -> Result<DMatrix<f64>> {
    let t = design.nrows();
    let pad = pad.unwrap_or_else(|| next_pow2(t + 2 * ar_order));
    let batch = TimeSeriesBatch::new(design.clone(), series.clone(), pad)?;
    let resid = ols_residuals(design, series)?;
    let spec = estimate_ar_whitener(&resid, ar_order, pad)?;
    gls_solve_freq_batch(&batch, &spec, tol)
}
