//! Row/column permutation search that concentrates importance in the
//! top-left `block_rows × block_cols` window.

use itertools::Itertools;

use crate::error::{PgbError, Result};
use crate::importance::ImportanceMatrix;
use crate::tensor::Permutation;

/// Upper bound on candidate (row subset, column subset) pairs for
/// [`bruteforce_block_selection`].
pub const BRUTEFORCE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationPlan {
    pub rows: Permutation,
    pub cols: Permutation,
    /// Importance inside the top-left block after applying the plan.
    pub captured: f64,
}

impl PermutationPlan {
    pub fn identity(imp: &ImportanceMatrix, block_rows: usize, block_cols: usize) -> Self {
        let rows = Permutation::identity(imp.rows());
        let cols = Permutation::identity(imp.cols());
        let captured = block_capture(
            imp,
            &rows.as_slice()[..block_rows],
            &cols.as_slice()[..block_cols],
        );
        Self { rows, cols, captured }
    }
}

/// Sum of `imp[r][c]` for `r ∈ rows`, `c ∈ cols`, accumulated in ascending
/// index order so that the value depends only on the two sets.
pub fn block_capture(imp: &ImportanceMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    let mut rows = rows.to_vec();
    let mut cols = cols.to_vec();
    rows.sort_unstable();
    cols.sort_unstable();
    rows.iter()
        .map(|&r| {
            let row = imp.scores().row(r);
            cols.iter().map(|&c| row[c]).sum::<f64>()
        })
        .sum()
}

fn check_block(imp: &ImportanceMatrix, block_rows: usize, block_cols: usize) -> Result<()> {
    if block_rows == 0 || block_cols == 0 {
        return Err(PgbError::Validation(
            "block must have at least one row and column".into(),
        ));
    }
    if block_rows > imp.rows() || block_cols > imp.cols() {
        return Err(PgbError::Shape(format!(
            "block {block_rows}x{block_cols} larger than {}x{} matrix",
            imp.rows(),
            imp.cols()
        )));
    }
    Ok(())
}

/// Alternating descending sorts.
///
/// Each round first stably sorts columns by their score sum over the current
/// top `block_rows` rows, then stably sorts rows by their sum over the current
/// left `block_cols` columns. Either sort alone maximizes the block sum with
/// the other axis held fixed, so the captured importance never decreases.
pub fn alternating_sort(
    imp: &ImportanceMatrix,
    block_rows: usize,
    block_cols: usize,
    n_perm: usize,
) -> Result<PermutationPlan> {
    alternating_sort_traced(imp, block_rows, block_cols, n_perm).map(|(plan, _)| plan)
}

/// Like [`alternating_sort`], also returning the captured importance of the
/// identity start followed by the value after every individual sort.
pub fn alternating_sort_traced(
    imp: &ImportanceMatrix,
    block_rows: usize,
    block_cols: usize,
    n_perm: usize,
) -> Result<(PermutationPlan, Vec<f64>)> {
    check_block(imp, block_rows, block_cols)?;
    if n_perm == 0 {
        return Err(PgbError::Validation("n_perm must be at least 1".into()));
    }
    let (m, n) = imp.shape();
    let scores = imp.scores();
    let mut pr: Vec<usize> = (0..m).collect();
    let mut pc: Vec<usize> = (0..n).collect();
    let capture = |pr: &[usize], pc: &[usize]| block_capture(imp, &pr[..block_rows], &pc[..block_cols]);
    let mut trace = vec![capture(&pr, &pc)];

    let mut col_keys = vec![0.0; n];
    let mut row_keys = vec![0.0; m];
    for _ in 0..n_perm {
        col_keys.iter_mut().for_each(|k| *k = 0.0);
        for &r in &pr[..block_rows] {
            for (k, v) in col_keys.iter_mut().zip(scores.row(r)) {
                *k += v;
            }
        }
        let before = (pr.clone(), pc.clone());
        pc.sort_by(|&a, &b| col_keys[b].total_cmp(&col_keys[a]));
        trace.push(capture(&pr, &pc));

        for (r, key) in row_keys.iter_mut().enumerate() {
            let row = scores.row(r);
            *key = pc[..block_cols].iter().map(|&c| row[c]).sum();
        }
        pr.sort_by(|&a, &b| row_keys[b].total_cmp(&row_keys[a]));
        trace.push(capture(&pr, &pc));

        if (&pr, &pc) == (&before.0, &before.1) {
            // Fixed point: every further round reproduces the same order.
            break;
        }
    }
    let plan = PermutationPlan {
        captured: *trace.last().expect("trace starts non-empty"),
        rows: Permutation::new(pr)?,
        cols: Permutation::new(pc)?,
    };
    Ok((plan, trace))
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k) as u128;
    let n = n as u128;
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Exact maximizer of the top-left block sum by enumerating every row subset
/// and column subset. Chosen indices come first in ascending order, followed
/// by the rest in ascending order.
pub fn bruteforce_block_selection(
    imp: &ImportanceMatrix,
    block_rows: usize,
    block_cols: usize,
) -> Result<PermutationPlan> {
    check_block(imp, block_rows, block_cols)?;
    let (m, n) = imp.shape();
    let candidates = binomial(m, block_rows).saturating_mul(binomial(n, block_cols));
    if candidates > BRUTEFORCE_LIMIT {
        return Err(PgbError::TooLarge(candidates));
    }
    let col_subsets: Vec<Vec<usize>> = (0..n).combinations(block_cols).collect();
    let mut best: Option<(f64, Vec<usize>, Vec<usize>)> = None;
    let mut col_sums = vec![0.0; n];
    for rows in (0..m).combinations(block_rows) {
        col_sums.iter_mut().for_each(|s| *s = 0.0);
        for &r in &rows {
            for (s, v) in col_sums.iter_mut().zip(imp.scores().row(r)) {
                *s += v;
            }
        }
        for cols in &col_subsets {
            let total: f64 = cols.iter().map(|&c| col_sums[c]).sum();
            if best.as_ref().is_none_or(|(b, _, _)| total > *b) {
                best = Some((total, rows.clone(), cols.clone()));
            }
        }
    }
    let (_, rows, cols) = best.expect("at least one subset pair");
    let order = |chosen: &[usize], len: usize| -> Vec<usize> {
        let rest = (0..len).filter(|i| !chosen.contains(i));
        chosen.iter().copied().chain(rest).collect()
    };
    Ok(PermutationPlan {
        captured: block_capture(imp, &rows, &cols),
        rows: Permutation::new(order(&rows, m))?,
        cols: Permutation::new(order(&cols, n))?,
    })
}

/// Folds a plan computed on the residual `[offset_r.., offset_c..]` into the
/// global plan. Positions before the offsets stay fixed; the captured values
/// accumulate.
pub fn compose_residual_permutation(
    global: &PermutationPlan,
    partial: &PermutationPlan,
    offset_r: usize,
    offset_c: usize,
) -> Result<PermutationPlan> {
    let (m, n) = (global.rows.len(), global.cols.len());
    if offset_r > m
        || offset_c > n
        || partial.rows.len() != m - offset_r
        || partial.cols.len() != n - offset_c
    {
        return Err(PgbError::Validation(format!(
            "residual plan of {}x{} at offset ({offset_r},{offset_c}) does not fit the unfixed part of a {m}x{n} plan",
            partial.rows.len(),
            partial.cols.len()
        )));
    }
    let compose = |g: &Permutation, p: &Permutation, off: usize| -> Result<Permutation> {
        let g = g.as_slice();
        let tail = p.as_slice().iter().map(|&i| g[off + i]);
        Permutation::new(g[..off].iter().copied().chain(tail).collect())
    };
    Ok(PermutationPlan {
        rows: compose(&global.rows, &partial.rows, offset_r)?,
        cols: compose(&global.cols, &partial.cols, offset_c)?,
        captured: global.captured + partial.captured,
    })
}
