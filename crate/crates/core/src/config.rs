use serde::{Deserialize, Serialize};

use crate::error::{PgbError, Result};

/// Hyperparameters of one compression run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of prunable parameters to keep, in `(0, 1]`.
    pub gamma: f64,
    /// Importance threshold; only scores strictly above it count as important.
    pub tau: f64,
    pub g_max: usize,
    /// Number of (column sort, row sort) rounds in the permutation heuristic.
    pub n_perm: usize,
    /// Ridge strength anchoring compensated weights to their pruned values.
    pub lambda: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            tau: 1e-5,
            g_max: 6,
            n_perm: 6,
            lambda: 1e-4,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PgbError::Validation(msg));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be finite and non-negative, got {}", self.tau));
        }
        if self.g_max == 0 {
            return bad("g_max must be at least 1".into());
        }
        if self.n_perm == 0 {
            return bad("n_perm must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            ));
        }
        Ok(())
    }
}
