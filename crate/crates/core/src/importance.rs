//! Per-weight importance scores.
//!
//! Two providers are available: squared magnitude (needs no data) and the
//! diagonal empirical-Fisher saliency `w² · E[g²] / 2`, which treats the mean
//! squared gradient as a proxy for the Hessian diagonal.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PgbError, Result};
use crate::tensor::{apply_permutation, Matrix, Permutation};

/// Non-negative finite score per weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMatrix(Matrix);

impl ImportanceMatrix {
    pub fn new(scores: Matrix) -> Result<Self> {
        if let Some(v) = scores.as_slice().iter().find(|v| **v < 0.0) {
            return Err(PgbError::Validation(format!(
                "importance scores must be non-negative, found {v}"
            )));
        }
        Ok(Self(scores))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn scores(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn total(&self) -> f64 {
        self.0.sum()
    }

    /// Number of scores strictly above `tau`.
    pub fn count_above(&self, tau: f64) -> usize {
        self.0.as_slice().iter().filter(|&&s| s > tau).count()
    }

    pub fn permuted(&self, pr: &Permutation, pc: &Permutation) -> Result<Self> {
        Ok(Self(apply_permutation(&self.0, pr, pc)?))
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor >= 0.0 && factor.is_finite()) {
            return Err(PgbError::Validation(format!("invalid scale factor {factor}")));
        }
        Ok(Self(self.0.map(|v| v * factor)))
    }
}

/// Which importance functional to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceKind {
    Magnitude2,
    Fisher,
}

impl ImportanceKind {
    pub fn id(self) -> &'static str {
        match self {
            Self::Magnitude2 => "magnitude2",
            Self::Fisher => "fisher",
        }
    }
}

impl fmt::Display for ImportanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ImportanceKind {
    type Err = PgbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude2" => Ok(Self::Magnitude2),
            "fisher" => Ok(Self::Fisher),
            other => Err(PgbError::Validation(format!(
                "unknown importance provider {other:?} (expected magnitude2 or fisher)"
            ))),
        }
    }
}

pub fn importance_magnitude_sq(w: &Matrix) -> ImportanceMatrix {
    ImportanceMatrix(w.map(|v| v * v))
}

/// `score = w² · mean_k(g_k²) / 2`.
pub fn importance_empirical_fisher(w: &Matrix, samples: &[Matrix]) -> Result<ImportanceMatrix> {
    if samples.is_empty() {
        return Err(PgbError::Validation(
            "empirical Fisher needs at least one gradient sample".into(),
        ));
    }
    if let Some(bad) = samples.iter().find(|g| g.shape() != w.shape()) {
        return Err(PgbError::Shape(format!(
            "gradient shape {:?} does not match weight shape {:?}",
            bad.shape(),
            w.shape()
        )));
    }
    let n = samples.len() as f64;
    let mut sq_mean = vec![0.0; w.len()];
    for g in samples {
        for (acc, v) in sq_mean.iter_mut().zip(g.as_slice()) {
            *acc += v * v;
        }
    }
    let scores = w
        .as_slice()
        .iter()
        .zip(&sq_mean)
        .map(|(wv, g2)| wv * wv * (g2 / n) / 2.0)
        .collect();
    ImportanceMatrix::new(Matrix::from_vec(w.rows(), w.cols(), scores)?)
}

/// Sum of scores over `rows × cols`; an empty range sums to zero.
pub fn region_importance(imp: &ImportanceMatrix, rows: Range<usize>, cols: Range<usize>) -> Result<f64> {
    if rows.start > rows.end || cols.start > cols.end || rows.end > imp.rows() || cols.end > imp.cols() {
        return Err(PgbError::Shape(format!(
            "region {rows:?} x {cols:?} outside {}x{} importance matrix",
            imp.rows(),
            imp.cols()
        )));
    }
    Ok(rows
        .map(|i| imp.scores().row(i)[cols.clone()].iter().sum::<f64>())
        .sum())
}

/// Layer score used to rank FFN sub-layers: the raw sum of both matrices.
pub fn ffn_layer_score(first: &ImportanceMatrix, second: &ImportanceMatrix) -> f64 {
    first.total() + second.total()
}
