//! End-to-end runs over small models: gradients by finite differences,
//! Fisher importance, compression, archive round trips and inference.

use pgb_core::archive::TensorArchive;
use pgb_core::compress::{compensate_model, pgb_compress, Accounting, ModelImportance};
use pgb_core::grouping::repermute_dense;
use pgb_core::infer::{discrepancy, encoder_forward, encoder_trace};
use pgb_core::model::{ModelDims, ModelSpec, PrunedModel, Slot};
use pgb_core::tensor::matmul;
use pgb_core::{Matrix, PruneConfig, PruneOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FD_LIMIT: usize = 64;

/// Central-difference gradient of `loss` with respect to every entry of `w`.
/// Only for matrices of at most 8×8 entries.
fn fd_gradient(w: &Matrix, mut loss: impl FnMut(&Matrix) -> f64) -> Matrix {
    assert!(
        w.len() <= FD_LIMIT,
        "finite differences are for tiny matrices only"
    );
    let h = 1e-5;
    let mut g = Matrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let mut plus = w.clone();
            plus.set(i, j, w.get(i, j) + h);
            let mut minus = w.clone();
            minus.set(i, j, w.get(i, j) - h);
            g.set(i, j, (loss(&plus) - loss(&minus)) / (2.0 * h));
        }
    }
    g
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn tiny_model(seed: u64) -> ModelSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        layers: 2,
        d: 4,
        d_ffn: 8,
        heads: 2,
    };
    ModelSpec::generate(dims, || rng.sample(StandardNormal)).unwrap()
}

#[test]
fn fd_gradient_matches_least_squares_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian(&mut rng, 5, 4);
    let w = gaussian(&mut rng, 4, 3);
    let y = gaussian(&mut rng, 5, 3);
    let loss = |w: &Matrix| {
        let r = matmul(&x, w).unwrap();
        0.5 * r
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let fd = fd_gradient(&w, loss);
    // X^T (XW - Y)
    let resid = matmul(&x, &w).unwrap();
    let resid = Matrix::from_fn(5, 3, |i, j| resid.get(i, j) - y.get(i, j));
    let exact = matmul(&x.transpose(), &resid).unwrap();
    assert!(fd.max_abs_diff(&exact).unwrap() < 1e-6);
}

/// Gradients of `½‖f(x_k)‖²` for each sample, stored as `<tensor>.grad.<k>`.
fn gradient_archive(model: &ModelSpec, samples: &[Matrix]) -> TensorArchive {
    let mut a = TensorArchive::new();
    for (k, x) in samples.iter().enumerate() {
        for i in 0..model.dims.layers {
            for s in Slot::ALL {
                let g = fd_gradient(model.layers[i].matrix(s), |w| {
                    let mut m = model.clone();
                    m.layers[i].matrices[s.index()] = w.clone();
                    let out = encoder_forward(x, &m).unwrap();
                    0.5 * out.as_slice().iter().map(|v| v * v).sum::<f64>()
                });
                a.insert_matrix(&format!("{}.grad.{k}", s.tensor_name(i)), &g)
                    .unwrap();
            }
        }
    }
    a
}

#[test]
fn fisher_pipeline_from_finite_differences() {
    let model = tiny_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<Matrix> = (0..3).map(|_| gaussian(&mut rng, 3, 4)).collect();
    let grads = TensorArchive::from_bytes(&gradient_archive(&model, &samples).to_bytes().unwrap()).unwrap();

    let imp = ModelImportance::fisher(&model, &grads).unwrap();
    assert_eq!(imp.provider(), "fisher");
    // Oracle: w² · mean(g²) / 2 entry by entry.
    for i in 0..2 {
        for s in Slot::ALL {
            let w = model.layers[i].matrix(s);
            let gs: Vec<Matrix> = (0..3)
                .map(|k| grads.matrix(&format!("{}.grad.{k}", s.tensor_name(i))).unwrap())
                .collect();
            for r in 0..w.rows() {
                for c in 0..w.cols() {
                    let g2 = gs.iter().map(|g| g.get(r, c).powi(2)).sum::<f64>() / 3.0;
                    let expect = w.get(r, c).powi(2) * g2 / 2.0;
                    let got = imp.get(i, s).get(r, c);
                    assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0));
                }
            }
        }
    }

    // tau picked so that roughly half of each matrix counts as important.
    let mut all: Vec<f64> = (0..2)
        .flat_map(|i| Slot::ALL.map(|s| imp.get(i, s).scores().as_slice().to_vec()))
        .flatten()
        .collect();
    all.sort_by(f64::total_cmp);
    let cfg = PruneConfig {
        tau: all[all.len() / 2],
        ..PruneConfig::default()
    };
    match pgb_compress(&model, &imp, &cfg) {
        Ok(pruned) => {
            pruned.validate().unwrap();
            assert_eq!(pruned.provenance.importance, "fisher");
            assert!(pruned.param_count() <= model.param_count());
        }
        Err(pgb_core::PgbError::BudgetInfeasible { retained, budget, .. }) => {
            assert!(retained as f64 > budget);
        }
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn pruned_archive_round_trip_preserves_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dims = ModelDims {
        layers: 3,
        d: 12,
        d_ffn: 24,
        heads: 3,
    };
    let model = ModelSpec::generate(dims, || rng.sample(StandardNormal)).unwrap();
    let dense_back = ModelSpec::from_archive(
        &TensorArchive::from_bytes(&model.to_archive().unwrap().to_bytes().unwrap()).unwrap(),
    )
    .unwrap();

    let imp = ModelImportance::magnitude(&dense_back);
    let cfg = PruneConfig {
        tau: 0.06,
        ..PruneConfig::default()
    };
    let pruned = pgb_compress(&dense_back, &imp, &cfg).unwrap();
    let bytes = pruned.to_archive().unwrap().to_bytes().unwrap();
    let back = PrunedModel::from_archive(&TensorArchive::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, pruned);

    let x = gaussian(&mut rng, 5, 12);
    assert_eq!(
        encoder_forward(&x, &back).unwrap(),
        encoder_forward(&x, &pruned).unwrap()
    );
    assert_eq!(back.linear_macs(5), pruned.linear_macs(5));
    assert!(discrepancy(&x, &dense_back, &back).unwrap().is_finite());
}

#[test]
fn pruned_model_matches_masked_dense_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = ModelDims {
        layers: 2,
        d: 12,
        d_ffn: 36,
        heads: 2,
    };
    let model = ModelSpec::generate(dims, || rng.sample(StandardNormal)).unwrap();
    let cfg = PruneConfig {
        tau: 0.05,
        gamma: 0.7,
        ..PruneConfig::default()
    };
    let pruned = pgb_compress(&model, &ModelImportance::magnitude(&model), &cfg).unwrap();

    // Dense model whose matrices are the re-permuted grouped ones (zeros for
    // dropped); a dropped FFN is emulated by zero weights and biases, which
    // is not the same as skipping it, so only compare layers that kept it.
    let mut masked = model.clone();
    for (i, l) in pruned.layers.iter().enumerate() {
        for s in Slot::ALL {
            masked.layers[i].matrices[s.index()] = match l.outcome(s) {
                PruneOutcome::Grouped(gm) => repermute_dense(gm).0,
                PruneOutcome::Dropped => Matrix::zeros(s.shape(&dims).0, s.shape(&dims).1),
            };
        }
    }
    let x = gaussian(&mut rng, 6, 12);
    let a = encoder_trace(&x, &pruned).unwrap();
    let b = encoder_trace(&x, &masked).unwrap();
    for (i, (ta, tb)) in a.iter().zip(&b).enumerate() {
        if pruned.layers[i].ffn_dropped() {
            break;
        }
        assert!(ta.output.max_abs_diff(&tb.output).unwrap() < 1e-9, "layer {i}");
    }
}

#[test]
fn compensation_lowers_layer_reconstruction_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dims = ModelDims {
        layers: 2,
        d: 12,
        d_ffn: 24,
        heads: 2,
    };
    let model = ModelSpec::generate(dims, || rng.sample(StandardNormal)).unwrap();
    let cfg = PruneConfig {
        tau: 0.05,
        ..PruneConfig::default()
    };
    let pruned = pgb_compress(&model, &ModelImportance::magnitude(&model), &cfg).unwrap();
    let calib: Vec<Matrix> = (0..8).map(|_| gaussian(&mut rng, 8, 12)).collect();
    let (comp, stats) = compensate_model(&pruned, &model, &calib, 1e-4).unwrap();
    assert!(comp.provenance.compensated);
    assert!(!stats.is_empty());
    for (name, st) in &stats {
        assert!(st.error_after <= st.error_before, "{name}");
    }
    assert_eq!(comp.param_count(), pruned.param_count());
}
