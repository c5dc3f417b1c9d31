//! Adaptive group count, iterative block extraction, and re-permutation back
//! to original coordinates.
//!
//! A [`GroupedMatrix`] stores `G` diagonal blocks of the permuted matrix
//! `W[pr][pc]`. Block `k` covers permuted rows `k·M/G..(k+1)·M/G` and permuted
//! columns `k·N/G..(k+1)·N/G`; every weight outside the blocks is pruned.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::archive::TensorArchive;
use crate::config::PruneConfig;
use crate::error::{PgbError, Result};
use crate::importance::ImportanceMatrix;
use crate::permute::{alternating_sort, compose_residual_permutation, PermutationPlan};
use crate::tensor::{apply_permutation, Matrix, Permutation};

/// Metadata key under which per-tensor grouping records live.
pub const GROUPING_KEY: &str = "grouping";

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedMatrix {
    rows: usize,
    cols: usize,
    blocks: Vec<Matrix>,
    row_perm: Permutation,
    col_perm: Permutation,
}

impl GroupedMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        blocks: Vec<Matrix>,
        row_perm: Permutation,
        col_perm: Permutation,
    ) -> Result<Self> {
        let g = blocks.len();
        if g == 0 || rows == 0 || cols == 0 || !rows.is_multiple_of(g) || !cols.is_multiple_of(g) {
            return Err(PgbError::Shape(format!(
                "{g} groups do not evenly divide a {rows}x{cols} matrix"
            )));
        }
        let (bm, bn) = (rows / g, cols / g);
        if let Some(b) = blocks.iter().find(|b| b.shape() != (bm, bn)) {
            return Err(PgbError::Shape(format!(
                "block of shape {:?}, expected {bm}x{bn}",
                b.shape()
            )));
        }
        if row_perm.len() != rows || col_perm.len() != cols {
            return Err(PgbError::Shape(format!(
                "permutation lengths {}x{} do not match {rows}x{cols}",
                row_perm.len(),
                col_perm.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            blocks,
            row_perm,
            col_perm,
        })
    }

    /// Keeps the `groups` diagonal blocks of `w[pr][pc]`.
    pub fn from_permutations(
        w: &Matrix,
        row_perm: Permutation,
        col_perm: Permutation,
        groups: usize,
    ) -> Result<Self> {
        let (m, n) = w.shape();
        if groups == 0 || m % groups != 0 || n % groups != 0 {
            return Err(PgbError::Shape(format!(
                "{groups} groups do not evenly divide a {m}x{n} matrix"
            )));
        }
        let permuted = apply_permutation(w, &row_perm, &col_perm)?;
        let (bm, bn) = (m / groups, n / groups);
        let blocks = (0..groups)
            .map(|k| permuted.submatrix(k * bm, k * bn, bm, bn))
            .collect::<Result<Vec<_>>>()?;
        Self::new(m, n, blocks, row_perm, col_perm)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn groups(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.rows / self.groups(), self.cols / self.groups())
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn row_perm(&self) -> &Permutation {
        &self.row_perm
    }

    pub fn col_perm(&self) -> &Permutation {
        &self.col_perm
    }

    pub fn param_count(&self) -> u64 {
        (self.rows * self.cols / self.groups()) as u64
    }

    /// Original row indices feeding group `k`.
    pub fn group_rows(&self, k: usize) -> &[usize] {
        let bm = self.block_shape().0;
        &self.row_perm.as_slice()[k * bm..(k + 1) * bm]
    }

    /// Original column indices produced by group `k`.
    pub fn group_cols(&self, k: usize) -> &[usize] {
        let bn = self.block_shape().1;
        &self.col_perm.as_slice()[k * bn..(k + 1) * bn]
    }

    pub fn blocks_mut(&mut self) -> &mut [Matrix] {
        &mut self.blocks
    }

    /// Importance falling inside the retained support.
    pub fn captured_importance(&self, imp: &ImportanceMatrix) -> Result<f64> {
        if imp.shape() != self.shape() {
            return Err(PgbError::Shape(
                "importance shape differs from grouped matrix".into(),
            ));
        }
        Ok((0..self.groups())
            .map(|k| {
                self.group_rows(k)
                    .iter()
                    .map(|&r| self.group_cols(k).iter().map(|&c| imp.get(r, c)).sum::<f64>())
                    .sum::<f64>()
            })
            .sum())
    }
}

/// Boolean support pattern in original coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn apply(&self, w: &Matrix) -> Matrix {
        Matrix::from_fn(
            w.rows(),
            w.cols(),
            |i, j| if self.get(i, j) { w.get(i, j) } else { 0.0 },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PruneOutcome {
    Grouped(GroupedMatrix),
    Dropped,
}

impl PruneOutcome {
    pub fn grouped(&self) -> Option<&GroupedMatrix> {
        match self {
            Self::Grouped(g) => Some(g),
            Self::Dropped => None,
        }
    }

    pub fn is_dropped(&self) -> bool {
        matches!(self, Self::Dropped)
    }

    /// `G`, or 0 when dropped.
    pub fn groups(&self) -> usize {
        self.grouped().map_or(0, GroupedMatrix::groups)
    }
}

/// Adaptive group count; 0 means drop the whole matrix.
///
/// With `n_τ` scores strictly above `tau`, the matrix is dropped when
/// `n_τ = 0` or `M·N / n_τ > g_max`. Otherwise `G` is the largest common
/// divisor of `M` and `N` not exceeding `min(g_max, ⌊M·N / n_τ⌋)`.
pub fn determine_group_count(imp: &ImportanceMatrix, tau: f64, g_max: usize) -> usize {
    let (m, n) = imp.shape();
    let n_tau = imp.count_above(tau);
    let total = m * n;
    if n_tau == 0 || total > g_max.saturating_mul(n_tau) {
        return 0;
    }
    let cap = g_max.min(total / n_tau);
    (1..=cap)
        .rev()
        .find(|g| m % g == 0 && n % g == 0)
        .expect("1 divides every dimension")
}

/// Prunes `w` into `G` diagonal blocks, re-planning the permutation of the
/// shrinking residual before each extraction.
pub fn grouped_weight_pruning(w: &Matrix, imp: &ImportanceMatrix, cfg: &PruneConfig) -> Result<PruneOutcome> {
    if w.shape() != imp.shape() {
        return Err(PgbError::Shape(format!(
            "weight shape {:?} does not match importance shape {:?}",
            w.shape(),
            imp.shape()
        )));
    }
    let groups = determine_group_count(imp, cfg.tau, cfg.g_max);
    if groups == 0 {
        return Ok(PruneOutcome::Dropped);
    }
    let (m, n) = w.shape();
    let (bm, bn) = (m / groups, n / groups);
    let mut plan = PermutationPlan {
        rows: Permutation::identity(m),
        cols: Permutation::identity(n),
        captured: 0.0,
    };
    for k in 0..groups {
        let (off_r, off_c) = (k * bm, k * bn);
        let rest_r = &plan.rows.as_slice()[off_r..];
        let rest_c = &plan.cols.as_slice()[off_c..];
        let residual = ImportanceMatrix::new(Matrix::from_fn(rest_r.len(), rest_c.len(), |i, j| {
            imp.get(rest_r[i], rest_c[j])
        }))?;
        let partial = if k + 1 == groups {
            // Residual is exactly one block; nothing left to arrange.
            PermutationPlan::identity(&residual, bm, bn)
        } else {
            alternating_sort(&residual, bm, bn, cfg.n_perm)?
        };
        plan = compose_residual_permutation(&plan, &partial, off_r, off_c)?;
    }
    // Canonical order inside each group: ascending original index.
    let mut rows = plan.rows.as_slice().to_vec();
    let mut cols = plan.cols.as_slice().to_vec();
    rows.chunks_mut(bm).for_each(<[usize]>::sort_unstable);
    cols.chunks_mut(bn).for_each(<[usize]>::sort_unstable);
    GroupedMatrix::from_permutations(w, Permutation::new(rows)?, Permutation::new(cols)?, groups)
        .map(PruneOutcome::Grouped)
}

/// Scatters the blocks back to original coordinates: the result is zero off
/// the support and equals the block entry on it.
pub fn repermute_dense(gm: &GroupedMatrix) -> (Matrix, Mask) {
    let (m, n) = gm.shape();
    let mut dense = Matrix::zeros(m, n);
    let mut mask = Mask {
        rows: m,
        cols: n,
        bits: vec![false; m * n],
    };
    for (k, block) in gm.blocks().iter().enumerate() {
        for (i, &r) in gm.group_rows(k).iter().enumerate() {
            for (j, &c) in gm.group_cols(k).iter().enumerate() {
                dense.set(r, c, block.get(i, j));
                mask.bits[r * n + c] = true;
            }
        }
    }
    (dense, mask)
}

pub fn param_count(outcome: &PruneOutcome) -> u64 {
    outcome.grouped().map_or(0, GroupedMatrix::param_count)
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupRecord {
    #[serde(rename = "G")]
    groups: usize,
    block_shape: [usize; 2],
    shape: [usize; 2],
    pr: Permutation,
    pc: Permutation,
}

fn block_name(name: &str, k: usize) -> String {
    format!("{name}.block.{k}")
}

/// Writes `outcome` under `name`: block payloads as `<name>.block.<k>` and a
/// grouping record in the archive metadata.
pub fn write_outcome(archive: &mut TensorArchive, name: &str, outcome: &PruneOutcome) -> Result<()> {
    let record = match outcome {
        PruneOutcome::Dropped => json!({ "dropped": true }),
        PruneOutcome::Grouped(gm) => {
            for (k, block) in gm.blocks().iter().enumerate() {
                archive.insert_matrix(&block_name(name, k), block)?;
            }
            let (bm, bn) = gm.block_shape();
            serde_json::to_value(GroupRecord {
                groups: gm.groups(),
                block_shape: [bm, bn],
                shape: [gm.rows, gm.cols],
                pr: gm.row_perm.clone(),
                pc: gm.col_perm.clone(),
            })?
        }
    };
    let table = archive
        .metadata
        .entry(GROUPING_KEY)
        .or_insert_with(|| Value::Object(Map::new()));
    let Value::Object(table) = table else {
        return Err(PgbError::Format(format!(
            "metadata {GROUPING_KEY:?} is not an object"
        )));
    };
    table.insert(name.to_owned(), record);
    Ok(())
}

/// Names of every tensor that carries a grouping record.
pub fn grouped_names(archive: &TensorArchive) -> Vec<String> {
    match archive.metadata.get(GROUPING_KEY) {
        Some(Value::Object(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Reads the outcome stored under `name`, validating permutations and block
/// shapes. `Ok(None)` means the tensor has no grouping record.
pub fn read_outcome(archive: &TensorArchive, name: &str) -> Result<Option<PruneOutcome>> {
    let Some(record) = archive.metadata.get(GROUPING_KEY).and_then(|t| t.get(name)) else {
        return Ok(None);
    };
    if record.get("dropped").and_then(Value::as_bool) == Some(true) {
        return Ok(Some(PruneOutcome::Dropped));
    }
    let rec: GroupRecord = serde_json::from_value(record.clone())
        .map_err(|e| PgbError::Validation(format!("tensor {name:?}: bad grouping record: {e}")))?;
    let blocks = (0..rec.groups)
        .map(|k| archive.matrix(&block_name(name, k)))
        .collect::<Result<Vec<_>>>()?;
    let gm = GroupedMatrix::new(rec.shape[0], rec.shape[1], blocks, rec.pr, rec.pc)
        .map_err(|e| PgbError::Validation(format!("tensor {name:?}: {e}")))?;
    if gm.block_shape() != (rec.block_shape[0], rec.block_shape[1]) {
        return Err(PgbError::Validation(format!(
            "tensor {name:?}: declared block shape {:?} disagrees with G={}",
            rec.block_shape, rec.groups
        )));
    }
    Ok(Some(PruneOutcome::Grouped(gm)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::importance_magnitude_sq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example_w() -> Matrix {
        Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 2.0],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![2.0, 0.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0, 0.0],
        ])
        .unwrap()
    }

    fn example_imp() -> ImportanceMatrix {
        ImportanceMatrix::new(example_w()).unwrap()
    }

    fn cfg(tau: f64, g_max: usize) -> PruneConfig {
        PruneConfig {
            tau,
            g_max,
            ..PruneConfig::default()
        }
    }

    fn random_w(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
        Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn group_count_examples() {
        assert_eq!(determine_group_count(&example_imp(), 0.5, 6), 2);
        let dense = ImportanceMatrix::new(Matrix::from_fn(6, 4, |_, _| 0.3)).unwrap();
        assert_eq!(determine_group_count(&dense, 0.0, 6), 1);
        assert_eq!(determine_group_count(&dense, 0.3, 6), 0);
    }

    #[test]
    fn group_count_boundary_768() {
        let make = |n_tau: usize| {
            let mut v = vec![0.0; 768 * 768];
            v[..n_tau].iter_mut().for_each(|x| *x = 1.0);
            ImportanceMatrix::new(Matrix::from_vec(768, 768, v).unwrap()).unwrap()
        };
        assert_eq!(determine_group_count(&make(98_303), 1e-5, 6), 0);
        assert_eq!(determine_group_count(&make(98_304), 1e-5, 6), 6);
        // 589824 / 110000 = 5.36 → cap 5, which does not divide 768 → 4.
        assert_eq!(determine_group_count(&make(110_000), 1e-5, 6), 4);
    }

    #[test]
    fn group_count_respects_common_divisors() {
        // 6x9: ratio cap 6 but only 1 and 3 divide both.
        let imp = ImportanceMatrix::new(Matrix::from_fn(
            6,
            9,
            |i, j| if i == 0 && j < 9 { 1.0 } else { 0.0 },
        ))
        .unwrap();
        assert_eq!(determine_group_count(&imp, 0.5, 6), 3);
    }

    #[test]
    fn example_blocks_and_capture() {
        let out = grouped_weight_pruning(&example_w(), &example_imp(), &cfg(0.5, 6)).unwrap();
        let gm = out.grouped().unwrap();
        assert_eq!(gm.groups(), 2);
        assert_eq!(gm.row_perm().as_slice(), &[0, 2, 1, 3]);
        assert_eq!(gm.col_perm().as_slice(), &[0, 3, 1, 2]);
        assert_eq!(
            gm.blocks()[0],
            Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap()
        );
        assert_eq!(
            gm.blocks()[1],
            Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap()
        );
        assert_eq!(gm.captured_importance(&example_imp()).unwrap(), 10.0);
    }

    #[test]
    fn example_repermutes_to_original_positions() {
        let out = grouped_weight_pruning(&example_w(), &example_imp(), &cfg(0.5, 6)).unwrap();
        let (dense, mask) = repermute_dense(out.grouped().unwrap());
        assert_eq!(dense, example_w());
        assert_eq!(mask.count(), 8);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(mask.get(i, j), example_w().get(i, j) != 0.0);
            }
        }
    }

    #[test]
    fn single_group_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = random_w(&mut rng, 5, 7);
        let out = grouped_weight_pruning(&w, &importance_magnitude_sq(&w), &cfg(0.0, 6)).unwrap();
        let gm = out.grouped().unwrap();
        assert_eq!(gm.groups(), 1);
        assert_eq!(gm.blocks()[0], w);
        assert!(gm.row_perm().is_identity() && gm.col_perm().is_identity());
        let (dense, mask) = repermute_dense(gm);
        assert_eq!(dense, w);
        assert_eq!(mask, Mask::full(5, 7));
        assert_eq!(param_count(&out), 35);
    }

    #[test]
    fn dropped_when_nothing_important() {
        let w = Matrix::from_fn(4, 4, |_, _| 1e-4);
        let out = grouped_weight_pruning(&w, &importance_magnitude_sq(&w), &cfg(1e-5, 6)).unwrap();
        assert!(out.is_dropped());
        assert_eq!(param_count(&out), 0);
    }

    #[test]
    fn beats_unpermuted_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let w = random_w(&mut rng, 6, 6);
            let imp = importance_magnitude_sq(&w);
            // Force G=3 through the threshold: keep 12 of 36 above tau.
            let mut sorted: Vec<f64> = imp.scores().as_slice().to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let tau = sorted[12];
            let out = grouped_weight_pruning(&w, &imp, &cfg(tau, 6)).unwrap();
            let gm = out.grouped().unwrap();
            assert_eq!(gm.groups(), 3);
            let naive =
                GroupedMatrix::from_permutations(&w, Permutation::identity(6), Permutation::identity(6), 3)
                    .unwrap();
            let lead = |g: &GroupedMatrix| -> f64 {
                let mut s = 0.0;
                for &r in g.group_rows(0) {
                    for &c in g.group_cols(0) {
                        s += imp.get(r, c);
                    }
                }
                s
            };
            assert!(lead(gm) >= lead(&naive) - 1e-12);
        }
    }

    #[test]
    fn param_counts() {
        let gm = GroupedMatrix::from_permutations(
            &Matrix::zeros(768, 768),
            Permutation::identity(768),
            Permutation::identity(768),
            6,
        )
        .unwrap();
        assert_eq!(param_count(&PruneOutcome::Grouped(gm)), 98_304);
    }

    #[test]
    fn archive_round_trip_and_tamper_detection() {
        let out = grouped_weight_pruning(&example_w(), &example_imp(), &cfg(0.5, 6)).unwrap();
        let mut a = TensorArchive::new();
        write_outcome(&mut a, "layer0.Wq", &out).unwrap();
        write_outcome(&mut a, "layer0.W1", &PruneOutcome::Dropped).unwrap();
        let a = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(read_outcome(&a, "layer0.Wq").unwrap().unwrap(), out);
        assert!(read_outcome(&a, "layer0.W1").unwrap().unwrap().is_dropped());
        assert!(read_outcome(&a, "layer0.Wk").unwrap().is_none());

        let mut bad = a.clone();
        bad.metadata[GROUPING_KEY]["layer0.Wq"]["pr"] = json!([0, 0, 1, 2]);
        let err = read_outcome(&bad, "layer0.Wq").unwrap_err().to_string();
        assert!(err.contains("layer0.Wq"), "{err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn retained_values_land_at_original_indices(
                seed in any::<u64>(), g in 1usize..5, bm in 1usize..5, bn in 1usize..5,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (m, n) = (g * bm, g * bn);
                let w = random_w(&mut rng, m, n);
                let imp = importance_magnitude_sq(&w);
                // Threshold just below the top M·N/g scores forces G = g.
                let mut sorted = imp.scores().as_slice().to_vec();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let tau = if g == 1 { 0.0 } else { sorted[m * n / g] };
                let gm = grouped_weight_pruning(&w, &imp, &PruneConfig { tau, g_max: 6, ..PruneConfig::default() })
                    .unwrap();
                let gm = gm.grouped().unwrap();
                prop_assert_eq!(gm.groups(), g);
                let (dense, mask) = repermute_dense(gm);
                prop_assert_eq!(mask.count() as u64, gm.param_count());
                for i in 0..m {
                    for j in 0..n {
                        let expect = if mask.get(i, j) { w.get(i, j) } else { 0.0 };
                        prop_assert_eq!(dense.get(i, j), expect);
                    }
                }
            }
        }
    }
}
