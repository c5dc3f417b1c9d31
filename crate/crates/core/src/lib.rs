//! One-shot semi-structured pruning of transformer weight matrices into
//! permuted block-diagonal form, and grouped inference over the result.
//!
//! The pipeline, bottom-up:
//!
//! - [`tensor`]: dense matrices and gather permutations,
//! - [`archive`]: the `.pgbt` on-disk tensor format,
//! - [`importance`]: per-weight saliency scores,
//! - [`permute`]: permutation search concentrating importance in a block,
//! - [`grouping`]: adaptive group count and block extraction for one matrix,
//! - [`compress`]: budgeted whole-model compression and weight compensation,
//! - [`infer`]: grouped linear operator and a small encoder forward pass.

pub mod archive;
pub mod compress;
pub mod config;
pub mod error;
pub mod grouping;
pub mod importance;
pub mod infer;
pub mod model;
pub mod permute;
pub mod tensor;

pub use config::PruneConfig;
pub use error::{PgbError, Result};
pub use grouping::{GroupedMatrix, PruneOutcome};
pub use importance::{ImportanceKind, ImportanceMatrix};
pub use tensor::{Matrix, Permutation};
