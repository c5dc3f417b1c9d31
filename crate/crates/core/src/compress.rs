//! Whole-model budgeted compression and least-squares weight compensation.
//!
//! Attention matrices are pruned first, each with its own threshold-driven
//! group count. The remaining budget is then spent greedily on FFN layers in
//! descending order of layer importance; FFN layers that never get picked are
//! dropped outright.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::config::PruneConfig;
use crate::error::{PgbError, Result};
use crate::grouping::{grouped_weight_pruning, param_count, repermute_dense, GroupedMatrix, PruneOutcome};
use crate::importance::{
    ffn_layer_score, importance_empirical_fisher, importance_magnitude_sq, ImportanceKind, ImportanceMatrix,
};
use crate::infer::{encoder_trace, linear_macs};
use crate::model::{ModelDims, ModelSpec, Provenance, PrunedLayer, PrunedModel, Slot};
use crate::tensor::{matmul, Matrix, Permutation};

/// Importance scores for every prunable matrix of a model.
#[derive(Debug, Clone)]
pub struct ModelImportance {
    provider: String,
    /// Per layer, indexed by [`Slot::index`].
    layers: Vec<[ImportanceMatrix; 6]>,
}

impl ModelImportance {
    pub fn new(
        provider: impl Into<String>,
        dims: &ModelDims,
        layers: Vec<[ImportanceMatrix; 6]>,
    ) -> Result<Self> {
        if layers.len() != dims.layers {
            return Err(PgbError::Shape(format!(
                "importance given for {} layers, model has {}",
                layers.len(),
                dims.layers
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            for s in Slot::ALL {
                if l[s.index()].shape() != s.shape(dims) {
                    return Err(PgbError::Shape(format!(
                        "importance for {} has shape {:?}",
                        s.tensor_name(i),
                        l[s.index()].shape()
                    )));
                }
            }
        }
        Ok(Self {
            provider: provider.into(),
            layers,
        })
    }

    pub fn magnitude(model: &ModelSpec) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| Slot::ALL.map(|s| importance_magnitude_sq(l.matrix(s))))
            .collect();
        Self {
            provider: ImportanceKind::Magnitude2.id().into(),
            layers,
        }
    }

    /// Diagonal empirical Fisher from gradients stored as `<tensor>.grad.<k>`
    /// for `k = 0, 1, …`.
    pub fn fisher(model: &ModelSpec, grads: &TensorArchive) -> Result<Self> {
        let layers = model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let scores = Slot::ALL
                    .iter()
                    .map(|&s| {
                        let name = s.tensor_name(i);
                        let samples = (0..)
                            .map(|k| format!("{name}.grad.{k}"))
                            .take_while(|g| grads.contains(g))
                            .map(|g| grads.matrix(&g))
                            .collect::<Result<Vec<_>>>()?;
                        if samples.is_empty() {
                            return Err(PgbError::Format(format!("no gradients for {name:?}")));
                        }
                        importance_empirical_fisher(l.matrix(s), &samples)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(scores.try_into().expect("six slots"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            provider: ImportanceKind::Fisher.id().into(),
            layers,
        })
    }

    pub fn compute(model: &ModelSpec, kind: ImportanceKind, grads: Option<&TensorArchive>) -> Result<Self> {
        match (kind, grads) {
            (ImportanceKind::Magnitude2, _) => Ok(Self::magnitude(model)),
            (ImportanceKind::Fisher, Some(g)) => Self::fisher(model, g),
            (ImportanceKind::Fisher, None) => Err(PgbError::Validation(
                "the fisher provider needs a gradient archive".into(),
            )),
        }
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn get(&self, layer: usize, slot: Slot) -> &ImportanceMatrix {
        &self.layers[layer][slot.index()]
    }

    pub fn ffn_score(&self, layer: usize) -> f64 {
        ffn_layer_score(self.get(layer, Slot::FfnIn), self.get(layer, Slot::FfnOut))
    }
}

/// Layer indices by descending FFN score, ties to the lower index.
pub fn ffn_selection_order(imp: &ModelImportance) -> Vec<usize> {
    let scores: Vec<f64> = (0..imp.layers.len()).map(|i| imp.ffn_score(i)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

pub fn pgb_compress(model: &ModelSpec, imp: &ModelImportance, cfg: &PruneConfig) -> Result<PrunedModel> {
    cfg.validate()?;
    let dims = model.dims;
    if imp.layers.len() != dims.layers {
        return Err(PgbError::Shape("importance does not cover every layer".into()));
    }
    let budget = cfg.gamma * model.param_count() as f64;

    let mha: Vec<[PruneOutcome; 4]> = model
        .layers
        .par_iter()
        .enumerate()
        .map(|(i, l)| -> Result<[PruneOutcome; 4]> {
            let outs = Slot::MHA
                .iter()
                .map(|&s| grouped_weight_pruning(l.matrix(s), imp.get(i, s), cfg))
                .collect::<Result<Vec<_>>>()?;
            Ok(outs.try_into().expect("four attention slots"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mha_retained: u64 = mha.iter().flatten().map(param_count).sum();
    let mut remaining = budget - mha_retained as f64;
    if remaining < 0.0 {
        return Err(PgbError::BudgetInfeasible {
            budget,
            retained: mha_retained,
            overshoot: -remaining,
        });
    }

    let mut ffn: Vec<[PruneOutcome; 2]> = vec![[PruneOutcome::Dropped, PruneOutcome::Dropped]; dims.layers];
    let mut ffn_order = Vec::new();
    let mut candidates = ffn_selection_order(imp).into_iter();
    while remaining > 0.0 {
        let Some(j) = candidates.next() else { break };
        for (k, &s) in Slot::FFN.iter().enumerate() {
            let out = grouped_weight_pruning(model.layers[j].matrix(s), imp.get(j, s), cfg)?;
            remaining -= param_count(&out) as f64;
            ffn[j][k] = out;
        }
        ffn_order.push(j);
    }

    let layers = model
        .layers
        .iter()
        .zip(mha)
        .zip(ffn)
        .map(|((l, [q, k, v, o]), [f1, f2])| PrunedLayer {
            outcomes: [q, k, v, o, f1, f2],
            b1: l.b1.clone(),
            b2: l.b2.clone(),
            ln_attn: l.ln_attn.clone(),
            ln_ffn: l.ln_ffn.clone(),
        })
        .collect();
    Ok(PrunedModel {
        dims,
        layers,
        provenance: Provenance {
            config: *cfg,
            importance: imp.provider().to_owned(),
            budget,
            ffn_order,
            compensated: false,
        },
    })
}

/// Squared reconstruction errors `‖X·Ŵ* − X·W‖²` before and after compensation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CompensationStats {
    pub error_before: f64,
    pub error_after: f64,
    /// Groups whose normal matrix was singular and fell back to a small
    /// trace-scaled ridge.
    pub fallbacks: usize,
    /// Columns where the solve would have increased the error and the
    /// original entries were kept.
    pub kept_columns: usize,
}

fn column_errors(x: &Matrix, approx: &Matrix, target: &Matrix) -> Vec<f64> {
    let diff = Matrix::from_fn(approx.rows(), approx.cols(), |i, j| {
        approx.get(i, j) - target.get(i, j)
    });
    let r = matmul(x, &diff).expect("shapes checked by caller");
    (0..r.cols())
        .map(|j| (0..r.rows()).map(|t| r.get(t, j) * r.get(t, j)).sum())
        .collect()
}

/// Re-fits the retained weights of each output column by ridge-regularized
/// least squares,
/// `argmin_z ‖X[:,R]·z − X·w[:,c]‖² + λ‖z − z₀‖²`,
/// where `R` are the retained input rows of column `c` and `z₀` the current
/// entries. All columns of one group share `R`, so each group needs a single
/// Cholesky factorization.
pub fn weight_compensation(
    gm: &GroupedMatrix,
    w_orig: &Matrix,
    x: &Matrix,
    lambda: f64,
) -> Result<(GroupedMatrix, CompensationStats)> {
    let (m, n) = gm.shape();
    if w_orig.shape() != (m, n) {
        return Err(PgbError::Shape(format!(
            "original weight {:?} does not match grouped {m}x{n}",
            w_orig.shape()
        )));
    }
    if x.cols() != m || x.rows() == 0 {
        return Err(PgbError::Shape(format!(
            "calibration input {:?} does not feed a matrix with {m} rows",
            x.shape()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(PgbError::Validation(format!("invalid ridge strength {lambda}")));
    }

    let xn = DMatrix::from_row_slice(x.rows(), m, x.as_slice());
    let gram = xn.transpose() * &xn;
    let wn = DMatrix::from_row_slice(m, n, w_orig.as_slice());
    let gram_w = &gram * &wn;

    let (before_dense, _) = repermute_dense(gm);
    let errors_before = column_errors(x, &before_dense, w_orig);

    let (bm, bn) = gm.block_shape();
    let solved: Vec<(Matrix, bool)> = (0..gm.groups())
        .into_par_iter()
        .map(|k| {
            let rows = gm.group_rows(k);
            let cols = gm.group_cols(k);
            let block = &gm.blocks()[k];
            let a0 = DMatrix::from_fn(bm, bm, |i, j| gram[(rows[i], rows[j])]);
            let rhs0 = DMatrix::from_fn(bm, bn, |i, j| gram_w[(rows[i], cols[j])]);
            let z0 = DMatrix::from_row_slice(bm, bn, block.as_slice());
            let solve = |lam: f64| {
                let a = &a0 + DMatrix::identity(bm, bm) * lam;
                a.cholesky().map(|ch| ch.solve(&(&rhs0 + &z0 * lam)))
            };
            let (z, fell_back) = match solve(lambda) {
                Some(z) if z.iter().all(|v| v.is_finite()) => (z, false),
                _ => {
                    let trace = a0.trace();
                    let lam = 1e-6 * if trace > 0.0 { trace / bm as f64 } else { 1.0 };
                    let z = solve(lambda + lam).unwrap_or(z0);
                    (z, true)
                }
            };
            (Matrix::from_fn(bm, bn, |i, j| z[(i, j)]), fell_back)
        })
        .collect();

    let fallbacks = solved.iter().filter(|(_, f)| *f).count();
    let blocks: Vec<Matrix> = solved.into_iter().map(|(b, _)| b).collect();
    let mut out = GroupedMatrix::new(m, n, blocks, gm.row_perm().clone(), gm.col_perm().clone())?;

    // Keep the previous entries for any column whose error did not improve.
    let errors_after = column_errors(x, &repermute_dense(&out).0, w_orig);
    let inv_cols = gm.col_perm().inverse();
    let mut kept_columns = 0;
    let mut final_errors = errors_after.clone();
    for c in 0..n {
        if errors_after[c] > errors_before[c] {
            kept_columns += 1;
            final_errors[c] = errors_before[c];
            let pos = inv_cols.get(c);
            let (k, j) = (pos / bn, pos % bn);
            let old = &gm.blocks()[k];
            let new = &mut out.blocks_mut()[k];
            for i in 0..bm {
                new.set(i, j, old.get(i, j));
            }
        }
    }
    Ok((
        out,
        CompensationStats {
            error_before: errors_before.iter().sum(),
            error_after: final_errors.iter().sum(),
            fallbacks,
            kept_columns,
        },
    ))
}

/// Compensates every grouped matrix against the dense model's own layer
/// inputs. Each calibration sample is run as its own sequence; the layer
/// inputs of all samples are stacked into one regression.
pub fn compensate_model(
    pruned: &PrunedModel,
    dense: &ModelSpec,
    calib: &[Matrix],
    lambda: f64,
) -> Result<(PrunedModel, Vec<(String, CompensationStats)>)> {
    if pruned.dims != dense.dims {
        return Err(PgbError::Shape("pruned and dense model dimensions differ".into()));
    }
    if calib.is_empty() {
        return Err(PgbError::Validation(
            "compensation needs at least one calibration sample".into(),
        ));
    }
    let traces = calib
        .iter()
        .map(|x| encoder_trace(x, dense))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Slot)> = (0..pruned.dims.layers)
        .flat_map(|i| Slot::ALL.into_iter().map(move |s| (i, s)))
        .filter(|&(i, s)| !pruned.layers[i].outcome(s).is_dropped())
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, s)| {
            let gm = pruned.layers[i]
                .outcome(s)
                .grouped()
                .expect("filtered to grouped");
            let parts: Vec<Matrix> = traces
                .iter()
                .map(|t| t[i].input_of(s).expect("dense traces cover every linear").clone())
                .collect();
            let x = Matrix::vstack(&parts)?;
            weight_compensation(gm, dense.layers[i].matrix(s), &x, lambda).map(|r| (i, s, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = pruned.clone();
    let mut stats = Vec::with_capacity(results.len());
    for (i, s, (gm, st)) in results {
        out.layers[i].outcomes[s.index()] = PruneOutcome::Grouped(gm);
        stats.push((s.tensor_name(i), st));
    }
    out.provenance.compensated = true;
    Ok((out, stats))
}

/// Baseline with the same layer structure and group counts as `pruned`, but
/// with blocks cut from `dense` under permutations drawn from `draw(len)`.
pub fn regroup_with(
    pruned: &PrunedModel,
    dense: &ModelSpec,
    mut draw: impl FnMut(usize) -> Permutation,
) -> Result<PrunedModel> {
    if pruned.dims != dense.dims {
        return Err(PgbError::Shape("pruned and dense model dimensions differ".into()));
    }
    let mut out = pruned.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        for s in Slot::ALL {
            let g = layer.outcome(s).groups();
            if g == 0 {
                continue;
            }
            let w = dense.layers[i].matrix(s);
            let gm = GroupedMatrix::from_permutations(w, draw(w.rows()), draw(w.cols()), g)?;
            layer.outcomes[s.index()] = PruneOutcome::Grouped(gm);
        }
    }
    out.provenance.compensated = false;
    Ok(out)
}

/// Parameter and multiply-add accounting over prunable weight matrices.
pub trait Accounting {
    fn param_count(&self) -> u64;
    /// Multiply-adds of all linear layers for an `S`-row input.
    fn linear_macs(&self, seq_len: usize) -> u64;
}

impl Accounting for ModelSpec {
    fn param_count(&self) -> u64 {
        ModelSpec::param_count(self)
    }

    fn linear_macs(&self, seq_len: usize) -> u64 {
        seq_len as u64 * self.param_count()
    }
}

impl Accounting for PrunedModel {
    fn param_count(&self) -> u64 {
        PrunedModel::param_count(self)
    }

    fn linear_macs(&self, seq_len: usize) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| Slot::ALL.map(|s| (s, l.outcome(s))))
            .map(|(s, o)| {
                let (r, c) = s.shape(&self.dims);
                linear_macs(seq_len, r, c, o.groups())
            })
            .sum()
    }
}

pub fn model_param_count(m: &impl Accounting) -> u64 {
    m.param_count()
}

pub fn model_flops(m: &impl Accounting, seq_len: usize) -> u64 {
    m.linear_macs(seq_len)
}
