//! Encoder weight containers, dense and pruned, and their archive layout.
//!
//! Tensor names follow `layer{i}.{Wq,Wk,Wv,Wo,W1,W2,b1,b2}` with optional
//! layer-norm parameters `layer{i}.ln_attn.{gamma,beta}` and
//! `layer{i}.ln_ffn.{gamma,beta}` (defaults: ones and zeros). Model
//! dimensions live in the archive metadata under `"model"`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::TensorArchive;
use crate::config::PruneConfig;
use crate::error::{PgbError, Result};
use crate::grouping::{read_outcome, write_outcome, PruneOutcome};
use crate::tensor::Matrix;

pub const MODEL_KEY: &str = "model";
pub const PROVENANCE_KEY: &str = "provenance";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub d: usize,
    pub d_ffn: usize,
    pub heads: usize,
}

impl ModelDims {
    /// 12 layers, width 768, FFN width 3072, 12 heads.
    pub const BERT_BASE: Self = Self {
        layers: 12,
        d: 768,
        d_ffn: 3072,
        heads: 12,
    };

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d == 0 || self.d_ffn == 0 || self.heads == 0 {
            return Err(PgbError::Validation(format!(
                "degenerate model dimensions {self:?}"
            )));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(PgbError::Validation(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Weight-matrix parameters per layer; biases and norms are excluded.
    pub fn layer_params(&self) -> u64 {
        Slot::ALL.iter().map(|s| s.param_count(self)).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.layers as u64 * self.layer_params()
    }
}

/// Prunable weight matrix position within one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot::Query,
        Slot::Key,
        Slot::Value,
        Slot::Output,
        Slot::FfnIn,
        Slot::FfnOut,
    ];
    pub const MHA: [Slot; 4] = [Slot::Query, Slot::Key, Slot::Value, Slot::Output];
    pub const FFN: [Slot; 2] = [Slot::FfnIn, Slot::FfnOut];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Slot::Query => "Wq",
            Slot::Key => "Wk",
            Slot::Value => "Wv",
            Slot::Output => "Wo",
            Slot::FfnIn => "W1",
            Slot::FfnOut => "W2",
        }
    }

    pub fn tensor_name(self, layer: usize) -> String {
        format!("layer{layer}.{}", self.short_name())
    }

    pub fn shape(self, dims: &ModelDims) -> (usize, usize) {
        match self {
            Slot::Query | Slot::Key | Slot::Value | Slot::Output => (dims.d, dims.d),
            Slot::FfnIn => (dims.d, dims.d_ffn),
            Slot::FfnOut => (dims.d_ffn, dims.d),
        }
    }

    pub fn param_count(self, dims: &ModelDims) -> u64 {
        let (r, c) = self.shape(dims);
        (r * c) as u64
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, Slot::FfnIn | Slot::FfnOut)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Indexed by [`Slot::index`].
    pub matrices: [Matrix; 6],
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub ln_attn: LayerNorm,
    pub ln_ffn: LayerNorm,
}

impl LayerWeights {
    pub fn matrix(&self, slot: Slot) -> &Matrix {
        &self.matrices[slot.index()]
    }
}

/// Dense encoder stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dims: ModelDims,
    pub layers: Vec<LayerWeights>,
}

fn check_layer_shapes(
    dims: &ModelDims,
    layer: usize,
    shape_of: impl Fn(Slot) -> Option<(usize, usize)>,
    b1: &[f64],
    b2: &[f64],
    norms: [&LayerNorm; 2],
) -> Result<()> {
    for slot in Slot::ALL {
        if let Some(shape) = shape_of(slot) {
            if shape != slot.shape(dims) {
                return Err(PgbError::Shape(format!(
                    "{} has shape {shape:?}, expected {:?}",
                    slot.tensor_name(layer),
                    slot.shape(dims)
                )));
            }
        }
    }
    if b1.len() != dims.d_ffn || b2.len() != dims.d {
        return Err(PgbError::Shape(format!(
            "layer {layer}: bias lengths do not match model widths"
        )));
    }
    if norms
        .iter()
        .any(|n| n.gamma.len() != dims.d || n.beta.len() != dims.d)
    {
        return Err(PgbError::Shape(format!(
            "layer {layer}: layer-norm width mismatch"
        )));
    }
    Ok(())
}

impl ModelSpec {
    pub fn new(dims: ModelDims, layers: Vec<LayerWeights>) -> Result<Self> {
        dims.validate()?;
        if layers.len() != dims.layers {
            return Err(PgbError::Shape(format!(
                "expected {} layers, got {}",
                dims.layers,
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            check_layer_shapes(
                &dims,
                i,
                |s| Some(l.matrix(s).shape()),
                &l.b1,
                &l.b2,
                [&l.ln_attn, &l.ln_ffn],
            )?;
        }
        Ok(Self { dims, layers })
    }

    /// Fills every weight from `sample` (expected roughly unit variance),
    /// scaled by `1/sqrt(fan_in)`; biases get `0.1·sample`, norms are identity.
    pub fn generate(dims: ModelDims, mut sample: impl FnMut() -> f64) -> Result<Self> {
        dims.validate()?;
        let layers = (0..dims.layers)
            .map(|_| {
                let matrices = Slot::ALL.map(|slot| {
                    let (r, c) = slot.shape(&dims);
                    let scale = 1.0 / (r as f64).sqrt();
                    Matrix::from_fn(r, c, |_, _| sample() * scale)
                });
                LayerWeights {
                    matrices,
                    b1: (0..dims.d_ffn).map(|_| 0.1 * sample()).collect(),
                    b2: (0..dims.d).map(|_| 0.1 * sample()).collect(),
                    ln_attn: LayerNorm::identity(dims.d),
                    ln_ffn: LayerNorm::identity(dims.d),
                }
            })
            .collect();
        Self::new(dims, layers)
    }

    pub fn param_count(&self) -> u64 {
        self.dims.total_params()
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.metadata
            .insert(MODEL_KEY.into(), serde_json::to_value(self.dims)?);
        for (i, l) in self.layers.iter().enumerate() {
            for slot in Slot::ALL {
                a.insert_matrix(&slot.tensor_name(i), l.matrix(slot))?;
            }
            write_layer_extras(&mut a, i, &l.b1, &l.b2, &l.ln_attn, &l.ln_ffn)?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let dims = read_dims(a)?;
        let layers = (0..dims.layers)
            .map(|i| {
                let matrices = Slot::ALL
                    .iter()
                    .map(|s| a.matrix(&s.tensor_name(i)))
                    .collect::<Result<Vec<_>>>()?;
                let (b1, b2, ln_attn, ln_ffn) = read_layer_extras(a, i, &dims)?;
                Ok(LayerWeights {
                    matrices: matrices.try_into().expect("six slots"),
                    b1,
                    b2,
                    ln_attn,
                    ln_ffn,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims, layers)
    }
}

fn read_dims(a: &TensorArchive) -> Result<ModelDims> {
    let v = a
        .metadata
        .get(MODEL_KEY)
        .ok_or_else(|| PgbError::Format("archive has no model dimensions".into()))?;
    let dims: ModelDims = serde_json::from_value(v.clone())
        .map_err(|e| PgbError::Format(format!("bad model dimensions: {e}")))?;
    dims.validate()?;
    Ok(dims)
}

fn write_layer_extras(
    a: &mut TensorArchive,
    i: usize,
    b1: &[f64],
    b2: &[f64],
    ln_attn: &LayerNorm,
    ln_ffn: &LayerNorm,
) -> Result<()> {
    a.insert_vector(&format!("layer{i}.b1"), b1)?;
    a.insert_vector(&format!("layer{i}.b2"), b2)?;
    for (tag, ln) in [("ln_attn", ln_attn), ("ln_ffn", ln_ffn)] {
        a.insert_vector(&format!("layer{i}.{tag}.gamma"), &ln.gamma)?;
        a.insert_vector(&format!("layer{i}.{tag}.beta"), &ln.beta)?;
    }
    Ok(())
}

fn read_layer_extras(
    a: &TensorArchive,
    i: usize,
    dims: &ModelDims,
) -> Result<(Vec<f64>, Vec<f64>, LayerNorm, LayerNorm)> {
    let b1 = a.vector(&format!("layer{i}.b1"))?;
    let b2 = a.vector(&format!("layer{i}.b2"))?;
    let norm = |tag: &str| -> Result<LayerNorm> {
        let g = format!("layer{i}.{tag}.gamma");
        let b = format!("layer{i}.{tag}.beta");
        Ok(LayerNorm {
            gamma: if a.contains(&g) {
                a.vector(&g)?
            } else {
                vec![1.0; dims.d]
            },
            beta: if a.contains(&b) {
                a.vector(&b)?
            } else {
                vec![0.0; dims.d]
            },
        })
    };
    Ok((b1, b2, norm("ln_attn")?, norm("ln_ffn")?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedLayer {
    /// Indexed by [`Slot::index`].
    pub outcomes: [PruneOutcome; 6],
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub ln_attn: LayerNorm,
    pub ln_ffn: LayerNorm,
}

impl PrunedLayer {
    pub fn outcome(&self, slot: Slot) -> &PruneOutcome {
        &self.outcomes[slot.index()]
    }

    /// The whole FFN sub-layer is skipped when both of its matrices are gone.
    pub fn ffn_dropped(&self) -> bool {
        Slot::FFN.iter().all(|&s| self.outcome(s).is_dropped())
    }
}

/// Where a pruned model came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: PruneConfig,
    pub importance: String,
    /// Parameter budget `γ · total`.
    pub budget: f64,
    /// FFN layers in the order the greedy pass selected them.
    pub ffn_order: Vec<usize>,
    #[serde(default)]
    pub compensated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    pub dims: ModelDims,
    pub layers: Vec<PrunedLayer>,
    pub provenance: Provenance,
}

impl PrunedModel {
    pub fn param_count(&self) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| l.outcomes.iter())
            .map(crate::grouping::param_count)
            .sum()
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.metadata
            .insert(MODEL_KEY.into(), serde_json::to_value(self.dims)?);
        a.metadata
            .insert(PROVENANCE_KEY.into(), serde_json::to_value(&self.provenance)?);
        for (i, l) in self.layers.iter().enumerate() {
            for slot in Slot::ALL {
                write_outcome(&mut a, &slot.tensor_name(i), l.outcome(slot))?;
            }
            write_layer_extras(&mut a, i, &l.b1, &l.b2, &l.ln_attn, &l.ln_ffn)?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let dims = read_dims(a)?;
        let provenance: Provenance =
            serde_json::from_value(a.metadata.get(PROVENANCE_KEY).cloned().unwrap_or(Value::Null))
                .map_err(|e| PgbError::Format(format!("pruned archive provenance: {e}")))?;
        let layers = (0..dims.layers)
            .map(|i| {
                let outcomes = Slot::ALL
                    .iter()
                    .map(|s| {
                        let name = s.tensor_name(i);
                        read_outcome(a, &name)?.ok_or_else(|| {
                            PgbError::Format(format!("pruned archive has no record for {name:?}"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (b1, b2, ln_attn, ln_ffn) = read_layer_extras(a, i, &dims)?;
                Ok(PrunedLayer {
                    outcomes: outcomes.try_into().expect("six slots"),
                    b1,
                    b2,
                    ln_attn,
                    ln_ffn,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            dims,
            layers,
            provenance,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.layers.len() != self.dims.layers {
            return Err(PgbError::Shape(
                "pruned layer count differs from model dimensions".into(),
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            check_layer_shapes(
                &self.dims,
                i,
                |s| l.outcome(s).grouped().map(|g| g.shape()),
                &l.b1,
                &l.b2,
                [&l.ln_attn, &l.ln_ffn],
            )?;
        }
        Ok(())
    }
}

/// Whether an archive holds a pruned model (has grouping records).
pub fn is_pruned_archive(a: &TensorArchive) -> bool {
    a.metadata.contains_key(crate::grouping::GROUPING_KEY)
}
