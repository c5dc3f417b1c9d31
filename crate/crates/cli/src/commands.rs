use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pgb_core::archive::TensorArchive;
use pgb_core::compress::{compensate_model, pgb_compress, regroup_with, Accounting, ModelImportance};
use pgb_core::grouping::{grouped_names, read_outcome, PruneOutcome};
use pgb_core::infer::{encoder_trace, pgb_linear_counted, Encoder};
use pgb_core::model::{is_pruned_archive, ModelDims, ModelSpec, PrunedModel, Slot};
use pgb_core::tensor::matmul;
use pgb_core::{GroupedMatrix, Matrix, Permutation, PgbError, PruneConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::report::{
    Counts, Discrepancy, EvalReport, LayerOutcome, NamedStats, RunReport, TensorOutcome, Timings,
    SCHEMA_VERSION,
};
use crate::{BenchArgs, EvalArgs, InspectArgs, PruneArgs, SynthArgs};

fn load(path: &Path) -> Result<TensorArchive> {
    TensorArchive::load(path).with_context(|| format!("reading {}", path.display()))
}

fn seed_from_env() -> Result<u64> {
    match std::env::var("PGB_SEED") {
        Ok(s) => s.parse().map_err(|_| {
            PgbError::Validation(format!("PGB_SEED must be an unsigned integer, got {s:?}")).into()
        }),
        Err(_) => Ok(0),
    }
}

/// Every 2-D tensor of an activation archive, in manifest order.
fn activation_samples(a: &TensorArchive, width: usize) -> Result<Vec<Matrix>> {
    let samples = a
        .entries()
        .iter()
        .filter(|e| e.shape.len() == 2)
        .map(|e| a.matrix(&e.name))
        .collect::<pgb_core::Result<Vec<_>>>()?;
    if samples.is_empty() {
        bail!(PgbError::Format("activation archive holds no 2-D tensors".into()));
    }
    if let Some(bad) = samples.iter().find(|m| m.cols() != width) {
        bail!(PgbError::Shape(format!(
            "activation width {} does not match model width {width}",
            bad.cols()
        )));
    }
    Ok(samples)
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

pub fn prune(args: &PruneArgs) -> Result<()> {
    let cfg = PruneConfig {
        gamma: args.gamma,
        tau: args.tau,
        g_max: args.gmax,
        n_perm: args.nperm,
        lambda: args.lambda,
    };
    cfg.validate()?;
    let model = ModelSpec::from_archive(&load(&args.model)?)?;
    let grads = args.grads.as_deref().map(load).transpose()?;
    let calib = args
        .calib
        .as_deref()
        .map(|p| activation_samples(&load(p)?, model.dims.d))
        .transpose()?;

    let t = Instant::now();
    let imp = ModelImportance::compute(&model, args.importance, grads.as_ref())?;
    let importance_ms = ms(t);

    let t = Instant::now();
    let mut pruned = pgb_compress(&model, &imp, &cfg)?;
    let prune_ms = ms(t);

    let mut compensation = None;
    let mut compensate_ms = None;
    if let Some(x) = &calib {
        let t = Instant::now();
        let (comp, stats) = compensate_model(&pruned, &model, x, cfg.lambda)?;
        compensate_ms = Some(ms(t));
        pruned = comp;
        compensation = Some(
            stats
                .into_iter()
                .map(|(name, stats)| NamedStats { name, stats })
                .collect(),
        );
    }

    pruned
        .to_archive()?
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;

    let layers = pruned
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerOutcome {
            layer: i,
            ffn_dropped: l.ffn_dropped(),
            tensors: Slot::ALL
                .iter()
                .map(|&s| {
                    let o = l.outcome(s);
                    TensorOutcome {
                        name: s.tensor_name(i),
                        groups: o.groups(),
                        params: pgb_core::grouping::param_count(o),
                        captured_importance: match o {
                            PruneOutcome::Grouped(g) => Some(g.captured_importance(imp.get(i, s)))
                                .transpose()
                                .ok()
                                .flatten(),
                            PruneOutcome::Dropped => None,
                        },
                    }
                })
                .collect(),
        })
        .collect();
    let report = RunReport {
        schema: SCHEMA_VERSION,
        command: "prune".into(),
        config: cfg,
        importance: imp.provider().into(),
        budget: pruned.provenance.budget,
        params: Counts::new(model.param_count(), pruned.param_count()),
        seq_len: args.seq_len,
        macs: Counts::new(model.linear_macs(args.seq_len), pruned.linear_macs(args.seq_len)),
        ffn_order: pruned.provenance.ffn_order.clone(),
        dropped_ffn_layers: (0..pruned.dims.layers)
            .filter(|&i| pruned.layers[i].ffn_dropped())
            .collect(),
        layers,
        compensation,
        timings: Timings {
            importance_ms,
            prune_ms,
            compensate_ms,
        },
    };
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!(
        "kept {} of {} prunable parameters ({:.1}%), {} FFN layers dropped; wrote {}",
        report.params.after,
        report.params.before,
        100.0 * report.params.ratio,
        report.dropped_ffn_layers.len(),
        args.out.display()
    );
    Ok(())
}

fn layer_discrepancy(samples: &[Matrix], dense: &ModelSpec, other: &impl Encoder) -> Result<Discrepancy> {
    let mut sq = vec![0.0; dense.dims.layers];
    for x in samples {
        let a = encoder_trace(x, dense)?;
        let b = encoder_trace(x, other)?;
        for (acc, (ta, tb)) in sq.iter_mut().zip(a.iter().zip(&b)) {
            *acc += ta.output.distance(&tb.output)?.powi(2);
        }
    }
    let per_layer: Vec<f64> = sq.iter().map(|v| v.sqrt()).collect();
    Ok(Discrepancy {
        end_to_end: *per_layer.last().expect("at least one layer"),
        per_layer,
    })
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Permutation {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    Permutation::new(v).expect("shuffle of 0..n")
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let dense = ModelSpec::from_archive(&load(&args.dense)?)?;
    let pruned = PrunedModel::from_archive(&load(&args.pruned)?)?;
    if pruned.dims != dense.dims {
        bail!(PgbError::Shape(format!(
            "pruned model {:?} does not match dense model {:?}",
            pruned.dims, dense.dims
        )));
    }
    let samples = activation_samples(&load(&args.inputs)?, dense.dims.d)?;

    let compensated = match &args.calib {
        Some(p) if !pruned.provenance.compensated => {
            let calib = activation_samples(&load(p)?, dense.dims.d)?;
            let (comp, _) = compensate_model(&pruned, &dense, &calib, args.lambda)?;
            Some(layer_discrepancy(&samples, &dense, &comp)?)
        }
        _ => None,
    };
    let random_baseline = match args.random_baseline {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let baseline = regroup_with(&pruned, &dense, |n| shuffled(&mut rng, n))?;
            Some(layer_discrepancy(&samples, &dense, &baseline)?)
        }
        None => None,
    };
    let report = EvalReport {
        schema: SCHEMA_VERSION,
        command: "eval".into(),
        samples: samples.len(),
        pruned_compensated: pruned.provenance.compensated,
        pruned: layer_discrepancy(&samples, &dense, &pruned)?,
        compensated,
        random_baseline,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &args.report {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn median_ns(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    if times.len().is_multiple_of(2) {
        (times[mid - 1] + times[mid]) / 2.0
    } else {
        times[mid]
    }
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    if args.reps < 30 {
        bail!(PgbError::Validation(format!(
            "--reps must be at least 30, got {}",
            args.reps
        )));
    }
    if args.seq_len == 0 || args.rows == 0 || args.cols == 0 {
        bail!(PgbError::Validation("shapes must be positive".into()));
    }
    if let Some(&g) = args
        .groups
        .iter()
        .find(|&&g| g == 0 || !args.rows.is_multiple_of(g) || !args.cols.is_multiple_of(g))
    {
        bail!(PgbError::Validation(format!(
            "group count {g} does not divide {}x{}",
            args.rows, args.cols
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from_env()?);
    let w = Matrix::from_fn(args.rows, args.cols, |_, _| rng.sample(StandardNormal));
    let x = Matrix::from_fn(args.seq_len, args.rows, |_, _| rng.sample(StandardNormal));
    let dense_macs = (args.seq_len * args.rows * args.cols) as u64;

    let mut csv =
        String::from("seq_len,rows,cols,groups,macs,dense_macs,dense_median_ns,grouped_median_ns,speedup\n");
    for &g in &args.groups {
        let gm = GroupedMatrix::from_permutations(
            &w,
            shuffled(&mut rng, args.rows),
            shuffled(&mut rng, args.cols),
            g,
        )?;
        let (_, macs) = pgb_linear_counted(&x, &gm)?;
        let dense_ns = median_ns(args.reps, || {
            std::hint::black_box(matmul(&x, &w).expect("shapes agree"));
        });
        let grouped_ns = median_ns(args.reps, || {
            std::hint::black_box(pgb_linear_counted(&x, &gm).expect("shapes agree"));
        });
        csv.push_str(&format!(
            "{},{},{},{g},{macs},{dense_macs},{dense_ns:.0},{grouped_ns:.0},{:.3}\n",
            args.seq_len,
            args.rows,
            args.cols,
            dense_ns / grouped_ns
        ));
    }
    match &args.out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn checksum(p: &Permutation) -> String {
    let mut h = Sha256::new();
    for &i in p.as_slice() {
        h.update((i as u32).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let a = load(&args.archive)?;
    let mut out = String::new();
    out.push_str(&format!(
        "archive {}: {} tensors, {} payload bytes\n",
        args.archive.display(),
        a.entries().len(),
        a.payload().len()
    ));
    if let Some(dims) = a.metadata.get(pgb_core::model::MODEL_KEY) {
        let dims: ModelDims = serde_json::from_value(dims.clone()).map_err(PgbError::Json)?;
        out.push_str(&format!(
            "model: layers={} d={} d_ffn={} heads={}\n",
            dims.layers, dims.d, dims.d_ffn, dims.heads
        ));
    }
    if let Some(p) = a.metadata.get(pgb_core::model::PROVENANCE_KEY) {
        out.push_str(&format!("provenance: {p}\n"));
    }
    out.push_str("tensors:\n");
    for e in a.entries() {
        out.push_str(&format!(
            "  {:<28} {:?} {} @{}\n",
            e.name, e.shape, e.dtype, e.offset
        ));
    }
    let names = grouped_names(&a);
    if names.is_empty() {
        out.push_str("grouping: none (all tensors ungrouped)\n");
    } else {
        out.push_str("grouping:\n");
        let mut dropped = Vec::new();
        for name in &names {
            match read_outcome(&a, name)? {
                Some(PruneOutcome::Grouped(gm)) => {
                    let (bm, bn) = gm.block_shape();
                    let (m, n) = gm.shape();
                    out.push_str(&format!(
                        "  {name:<20} G={} blocks={}x{}x{} shape={m}x{n} params={} pr={} pc={}\n",
                        gm.groups(),
                        gm.groups(),
                        bm,
                        bn,
                        gm.param_count(),
                        checksum(gm.row_perm()),
                        checksum(gm.col_perm()),
                    ));
                }
                Some(PruneOutcome::Dropped) => {
                    out.push_str(&format!("  {name:<20} dropped\n"));
                    dropped.push(name.as_str());
                }
                None => unreachable!("name listed in grouping table"),
            }
        }
        if is_pruned_archive(&a) && a.metadata.contains_key(pgb_core::model::MODEL_KEY) {
            let model = PrunedModel::from_archive(&a)?;
            let layers: Vec<String> = (0..model.dims.layers)
                .filter(|&i| model.layers[i].ffn_dropped())
                .map(|i| i.to_string())
                .collect();
            out.push_str(&format!("dropped FFN layers: [{}]\n", layers.join(", ")));
        }
    }
    print!("{out}");
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let dims = ModelDims {
        layers: args.layers,
        d: args.d,
        d_ffn: args.dffn,
        heads: args.heads,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from_env()?);
    let model = ModelSpec::generate(dims, || rng.sample(StandardNormal))?;
    model
        .to_archive()?
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.inputs_out {
        let mut a = TensorArchive::new();
        for k in 0..args.samples {
            let x = Matrix::from_fn(args.seq_len, args.d, |_, _| rng.sample(StandardNormal));
            a.insert_matrix(&format!("input.{k}"), &x)?;
        }
        a.save(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "wrote {} ({} prunable parameters)",
        args.out.display(),
        model.param_count()
    );
    Ok(())
}
