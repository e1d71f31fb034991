//! Problem families: the `n x K` trial-weight matrix `D` and response matrix
//! `Y` encoding cross-validation, bootstrap, and permutation problems over a
//! shared dataset.
//!
//! Corresponding columns of `D` and `Y` define one optimization problem: a
//! zero weight excludes a trial entirely, so a cross-validation fold is a
//! column of `D` with zeros on the held-out trials, a bootstrap replicate is
//! a column of multinomial counts, and a permutation-test surrogate is a
//! column of `Y` holding a reordering of the base response.
//!
//! Randomness comes from ChaCha8 with one independent stream per column
//! (stream = column index), so generating more columns never reshuffles
//! earlier ones and output is bit-reproducible across platforms.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stream index reserved for the cross-validation fold shuffle (columns use
/// their own index as stream, so this must stay out of `0..K`).
const SHUFFLE_STREAM: u64 = u64::MAX;

/// Per-problem provenance label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProblemTag {
    /// Training problem of the given cross-validation fold.
    CvFold(usize),
    /// Bootstrap replicate index.
    Bootstrap(usize),
    /// Permutation index (0 = identity when the identity is included).
    Permutation(usize),
    /// Cartesian product: weight structure from the first tag, response from
    /// the second.
    Product(Box<ProblemTag>, Box<ProblemTag>),
    /// Caller-supplied columns.
    Custom,
}

/// A family of `K` related problems over one shared dataset.
#[derive(Debug, Clone)]
pub struct ProblemFamily {
    /// `n x K` non-negative trial weights, one column per problem.
    pub d: DMatrix<f64>,
    /// `n x K` responses, one column per problem.
    pub y: DMatrix<f64>,
    /// Per-problem provenance labels, length `K`.
    pub kind_tags: Vec<ProblemTag>,
    /// RNG seed the family was generated from.
    pub seed: u64,
}

fn column_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ProblemFamily {
    /// Number of trials.
    pub fn n(&self) -> usize {
        self.d.nrows()
    }

    /// Number of problems.
    pub fn k(&self) -> usize {
        self.d.ncols()
    }

    /// Builds a family directly from caller-supplied matrices.
    pub fn from_matrices(d: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if d.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "D is {:?} but Y is {:?}",
                d.shape(),
                y.shape()
            )));
        }
        let tags = vec![ProblemTag::Custom; d.ncols()];
        let fam = ProblemFamily {
            d,
            y,
            kind_tags: tags,
            seed: 0,
        };
        fam.validate()?;
        Ok(fam)
    }

    /// Structural invariant check: shapes agree, `D >= 0` with every column
    /// carrying at least one strictly positive weight, everything finite.
    pub fn validate(&self) -> Result<()> {
        let (n, k) = self.d.shape();
        if self.y.shape() != (n, k) {
            return Err(Error::Dimension(format!(
                "D is {:?} but Y is {:?}",
                self.d.shape(),
                self.y.shape()
            )));
        }
        if self.kind_tags.len() != k {
            return Err(Error::Validation(format!(
                "{} kind tags for {k} problems",
                self.kind_tags.len()
            )));
        }
        for kk in 0..k {
            let col = self.d.column(kk);
            let mut any_positive = false;
            for (i, &v) in col.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Validation(format!(
                        "D[{i},{kk}] = {v} must be finite and non-negative"
                    )));
                }
                any_positive |= v > 0.0;
            }
            if !any_positive {
                return Err(Error::Validation(format!(
                    "column {kk} of D has no positive weight"
                )));
            }
            if self.y.column(kk).iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "column {kk} of Y has non-finite entries"
                )));
            }
        }
        Ok(())
    }

    /// The columns `(d_k, y_k)` of problem `k`.
    pub fn problem(&self, k: usize) -> (DVector<f64>, DVector<f64>) {
        (self.d.column(k).into(), self.y.column(k).into())
    }
}

/// Builds the `K = folds` cross-validation training problems for a shared
/// response `y`.
///
/// Fold assignment shuffles trial indices with the seeded generator and cuts
/// contiguous blocks, distributing the remainder one trial per fold. Held-out
/// trials get weight 0; training trials get `1/(n - holdout_size)` when
/// `normalize` is set (the leave-one-out convention of weighting the training
/// set by `1/(n-1)`), else 1. All response columns equal `y`.
pub fn cv_family(folds: usize, y: &DVector<f64>, normalize: bool, seed: u64) -> Result<ProblemFamily> {
    let n = y.len();
    if folds < 2 || folds > n {
        return Err(Error::Validation(format!(
            "folds must satisfy 2 <= folds <= n, got folds = {folds}, n = {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut column_rng(seed, SHUFFLE_STREAM));

    let base = n / folds;
    let rem = n % folds;
    let mut d = DMatrix::zeros(n, folds);
    let mut ymat = DMatrix::zeros(n, folds);
    let mut start = 0usize;
    for f in 0..folds {
        let size = base + usize::from(f < rem);
        let holdout = &order[start..start + size];
        start += size;
        let w = if normalize {
            1.0 / (n - size) as f64
        } else {
            1.0
        };
        let mut col = d.column_mut(f);
        col.fill(w);
        for &i in holdout {
            col[i] = 0.0;
        }
        ymat.set_column(f, y);
    }
    let fam = ProblemFamily {
        d,
        y: ymat,
        kind_tags: (0..folds).map(ProblemTag::CvFold).collect(),
        seed,
    };
    fam.validate()?;
    Ok(fam)
}

/// Builds `K` bootstrap replicates: each weight column holds the multinomial
/// counts of `n` draws with replacement, so every column sums to `n` exactly.
/// All response columns equal `y`.
pub fn bootstrap_family(k: usize, y: &DVector<f64>, seed: u64) -> Result<ProblemFamily> {
    let n = y.len();
    if k < 1 {
        return Err(Error::Validation("bootstrap family needs K >= 1".into()));
    }
    if n == 0 {
        return Err(Error::Validation("empty response".into()));
    }
    let mut d = DMatrix::zeros(n, k);
    let mut ymat = DMatrix::zeros(n, k);
    for rep in 0..k {
        let mut rng = column_rng(seed, rep as u64);
        let mut col = d.column_mut(rep);
        for _ in 0..n {
            col[rng.gen_range(0..n)] += 1.0;
        }
        ymat.set_column(rep, y);
    }
    let fam = ProblemFamily {
        d,
        y: ymat,
        kind_tags: (0..k).map(ProblemTag::Bootstrap).collect(),
        seed,
    };
    fam.validate()?;
    Ok(fam)
}

/// Builds `K = m` permutation-test problems: every response column is `y`
/// reordered by an independent uniform permutation (Fisher-Yates per column
/// stream), and all weight columns are the all-ones vector. With
/// `include_identity`, column 0 carries the unpermuted `y`; remaining columns
/// are unaffected by the flag (they draw from their own streams).
pub fn permutation_family(
    y: &DVector<f64>,
    m: usize,
    seed: u64,
    include_identity: bool,
) -> Result<ProblemFamily> {
    let n = y.len();
    if m < 1 {
        return Err(Error::Validation("permutation family needs m >= 1".into()));
    }
    if n == 0 {
        return Err(Error::Validation("empty response".into()));
    }
    let d = DMatrix::from_element(n, m, 1.0);
    let mut ymat = DMatrix::zeros(n, m);
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..m {
        if col == 0 && include_identity {
            ymat.set_column(0, y);
            continue;
        }
        perm.iter_mut().enumerate().for_each(|(i, p)| *p = i);
        perm.shuffle(&mut column_rng(seed, col as u64));
        for (i, &src) in perm.iter().enumerate() {
            ymat[(i, col)] = y[src];
        }
    }
    // all-ones D is already valid; keep the shared validation anyway
    let fam = ProblemFamily {
        d,
        y: ymat,
        kind_tags: (0..m).map(ProblemTag::Permutation).collect(),
        seed,
    };
    fam.validate()?;
    Ok(fam)
}

/// Crosses a weight-varying family with a response-varying family: column
/// `(i, j)` of the product takes its weights from column `i` of `a` and its
/// responses from column `j` of `b`. Columns are laid out `a`-major:
/// `col = i * K_b + j`. Mixing leave-one-out with `m` permutations therefore
/// yields `K = m * n` problems.
pub fn compose_product(a: &ProblemFamily, b: &ProblemFamily) -> Result<ProblemFamily> {
    if a.n() != b.n() {
        return Err(Error::Dimension(format!(
            "cannot cross families over {} and {} trials",
            a.n(),
            b.n()
        )));
    }
    let n = a.n();
    let (ka, kb) = (a.k(), b.k());
    let k = ka
        .checked_mul(kb)
        .ok_or_else(|| Error::Overflow(format!("{ka} x {kb} problems")))?;
    let mut d = DMatrix::zeros(n, k);
    let mut y = DMatrix::zeros(n, k);
    let mut tags = Vec::with_capacity(k);
    for i in 0..ka {
        for j in 0..kb {
            let col = i * kb + j;
            d.set_column(col, &a.d.column(i));
            y.set_column(col, &b.y.column(j));
            tags.push(ProblemTag::Product(
                Box::new(a.kind_tags[i].clone()),
                Box::new(b.kind_tags[j].clone()),
            ));
        }
    }
    let fam = ProblemFamily {
        d,
        y,
        kind_tags: tags,
        seed: a.seed ^ b.seed.rotate_left(32),
    };
    fam.validate()?;
    Ok(fam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn base_y(n: usize) -> DVector<f64> {
        DVector::from_fn(n, |i, _| (i % 2) as f64)
    }

    #[test]
    fn loo_weights_match_quarter_convention() {
        let y = base_y(5);
        let fam = cv_family(5, &y, true, 7).unwrap();
        assert_eq!(fam.k(), 5);
        for k in 0..5 {
            let col = fam.d.column(k);
            let zeros = col.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, 1);
            for &v in col.iter().filter(|&&v| v != 0.0) {
                assert_relative_eq!(v, 0.25);
            }
            assert_eq!(DVector::from(fam.y.column(k)), y);
        }
    }

    #[test]
    fn two_folds_unnormalized() {
        let y = base_y(4);
        let fam = cv_family(2, &y, false, 1).unwrap();
        for k in 0..2 {
            let col = fam.d.column(k);
            assert_eq!(col.iter().filter(|&&v| v == 1.0).count(), 2);
            assert_eq!(col.iter().filter(|&&v| v == 0.0).count(), 2);
        }
    }

    #[test]
    fn cv_partition_is_exhaustive_and_disjoint() {
        let y = base_y(6);
        let fam = cv_family(3, &y, false, 99).unwrap();
        // every trial held out exactly once across folds
        for i in 0..6 {
            let holdouts = (0..3).filter(|&k| fam.d[(i, k)] == 0.0).count();
            assert_eq!(holdouts, 1, "trial {i}");
        }
        // support pattern column sums all equal n - n/folds
        for k in 0..3 {
            let support = fam.d.column(k).iter().filter(|&&v| v > 0.0).count();
            assert_eq!(support, 4);
        }
    }

    #[test]
    fn cv_rejects_bad_fold_counts() {
        let y = base_y(4);
        assert!(cv_family(5, &y, true, 0).is_err());
        assert!(cv_family(1, &y, true, 0).is_err());
    }

    #[test]
    fn bootstrap_columns_sum_to_n() {
        let y = base_y(13);
        let fam = bootstrap_family(8, &y, 5).unwrap();
        for k in 0..8 {
            assert_relative_eq!(fam.d.column(k).sum(), 13.0);
            assert_eq!(DVector::from(fam.y.column(k)), y);
        }
    }

    #[test]
    fn bootstrap_deterministic_and_stream_stable() {
        let y = base_y(3);
        let a = bootstrap_family(1, &y, 42).unwrap();
        let b = bootstrap_family(1, &y, 42).unwrap();
        assert_eq!(a.d, b.d);
        // growing K keeps earlier columns bit-identical
        let big = bootstrap_family(4, &y, 42).unwrap();
        assert_eq!(big.d.column(0), a.d.column(0));
    }

    #[test]
    fn bootstrap_mean_weight_is_one() {
        // law of large numbers: E[D[i, .]] = 1, sd of the mean over K
        // replicates is sqrt(1 - 1/n)/sqrt(K)
        let n = 50;
        let k = 2000;
        let y = base_y(n);
        let fam = bootstrap_family(k, &y, 123).unwrap();
        let se = (1.0 - 1.0 / n as f64).sqrt() / (k as f64).sqrt();
        for i in 0..n {
            let mean = fam.d.row(i).sum() / k as f64;
            assert!(
                (mean - 1.0).abs() < 3.0 * se,
                "trial {i}: mean {mean} vs 1 +- {}",
                3.0 * se
            );
        }
    }

    #[test]
    fn permutations_preserve_multiset_and_identity() {
        let y = DVector::from_vec(vec![3.0, 1.0, 4.0, 1.0, 5.0]);
        let fam = permutation_family(&y, 6, 9, true).unwrap();
        assert_eq!(DVector::from(fam.y.column(0)), y);
        let mut sorted_base: Vec<f64> = y.iter().copied().collect();
        sorted_base.sort_by(f64::total_cmp);
        for k in 0..6 {
            let mut col: Vec<f64> = fam.y.column(k).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            assert_eq!(col, sorted_base);
            assert!(fam.d.column(k).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn permutations_are_roughly_uniform() {
        // n = 4 has 24 permutations; chi-square-style sanity: each observed
        // frequency within 3 standard errors of 1/24
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let m = 1000;
        let fam = permutation_family(&y, m, 2024, false).unwrap();
        let mut counts = std::collections::HashMap::new();
        for k in 0..m {
            let key: Vec<u64> = fam.y.column(k).iter().map(|&v| v as u64).collect();
            *counts.entry(key).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 24);
        let p = 1.0 / 24.0;
        let se = (p * (1.0 - p) / m as f64).sqrt();
        for (perm, c) in counts {
            let freq = c as f64 / m as f64;
            assert!(
                (freq - p).abs() < 3.0 * se + 1e-12,
                "permutation {perm:?}: freq {freq}"
            );
        }
    }

    #[test]
    fn product_matches_figure_structure() {
        let y = base_y(5);
        let cv = cv_family(5, &y, true, 3).unwrap();
        let perm = permutation_family(&y, 3, 4, true).unwrap();
        let prod = compose_product(&cv, &perm).unwrap();
        assert_eq!(prod.k(), 15);
        // identity-only permutation is a right identity on D-varying families
        let ident = permutation_family(&y, 1, 0, true).unwrap();
        let same = compose_product(&cv, &ident).unwrap();
        assert_eq!(same.d, cv.d);
        assert_eq!(same.y, cv.y);
    }

    #[test]
    fn product_enumerates_all_pairings_once() {
        let y = base_y(4);
        let cv = cv_family(2, &y, false, 1).unwrap();
        let perm = permutation_family(&y, 2, 2, false).unwrap();
        let prod = compose_product(&cv, &perm).unwrap();
        assert_eq!(prod.k(), 4);
        for i in 0..2 {
            for j in 0..2 {
                let col = i * 2 + j;
                assert_eq!(prod.d.column(col), cv.d.column(i));
                assert_eq!(prod.y.column(col), perm.y.column(j));
            }
        }
    }

    #[test]
    fn product_rejects_mismatched_n() {
        let a = cv_family(2, &base_y(4), false, 1).unwrap();
        let b = permutation_family(&base_y(5), 2, 1, false).unwrap();
        assert!(matches!(compose_product(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn validator_catches_dead_column() {
        let d = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(ProblemFamily::from_matrices(d, y).is_err());
    }
}
