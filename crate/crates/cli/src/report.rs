//! JSON reports written by `prune` and `eval`.

use pgb_core::compress::CompensationStats;
use pgb_core::PruneConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorOutcome {
    pub name: String,
    /// 0 when dropped.
    pub groups: usize,
    pub params: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub captured_importance: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub layer: usize,
    pub ffn_dropped: bool,
    pub tensors: Vec<TensorOutcome>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Counts {
    pub before: u64,
    pub after: u64,
    pub ratio: f64,
}

impl Counts {
    pub fn new(before: u64, after: u64) -> Self {
        Self {
            before,
            after,
            ratio: after as f64 / before as f64,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Timings {
    pub importance_ms: f64,
    pub prune_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compensate_ms: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NamedStats {
    pub name: String,
    #[serde(flatten)]
    pub stats: CompensationStats,
}

/// Output of `pgb prune`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub command: String,
    pub config: PruneConfig,
    pub importance: String,
    pub budget: f64,
    pub params: Counts,
    pub seq_len: usize,
    pub macs: Counts,
    pub ffn_order: Vec<usize>,
    pub dropped_ffn_layers: Vec<usize>,
    pub layers: Vec<LayerOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compensation: Option<Vec<NamedStats>>,
    pub timings: Timings,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Discrepancy {
    /// Frobenius distance between hidden states after each layer.
    pub per_layer: Vec<f64>,
    pub end_to_end: f64,
}

/// Output of `pgb eval`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub command: String,
    pub samples: usize,
    pub pruned_compensated: bool,
    pub pruned: Discrepancy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compensated: Option<Discrepancy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_baseline: Option<Discrepancy>,
}
