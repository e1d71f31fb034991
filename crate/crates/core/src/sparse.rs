//! Minimal sparse vector used for fitted weights.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// A sparse vector stored as parallel `(index, value)` lists with indices
/// strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    pub dim: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn zeros(dim: usize) -> Self {
        SparseVec {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(index, value)` pairs, dropping exact zeros.
    /// Pairs must be sorted by index.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, v) in pairs {
            debug_assert!(i < dim);
            debug_assert!(indices.last().map_or(true, |&last| last < i));
            if v != 0.0 {
                indices.push(i);
                values.push(v);
            }
        }
        SparseVec {
            dim,
            indices,
            values,
        }
    }

    pub fn from_dense(v: &DVector<f64>) -> Self {
        Self::from_pairs(v.len(), v.iter().enumerate().map(|(i, &x)| (i, x)))
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn norm1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn norm2_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_norms() {
        let d = DVector::from_vec(vec![0.0, 2.0, 0.0, -3.0]);
        let s = SparseVec::from_dense(&d);
        assert_eq!(s.nnz(), 2);
        assert_eq!(s.to_dense(), d);
        assert_eq!(s.norm1(), 5.0);
        assert_eq!(s.norm2_sq(), 13.0);
        assert_eq!(s.norm_inf(), 3.0);
    }
}
