//! Grouped linear operator and an encoder forward pass over dense or pruned
//! weights.
//!
//! For a grouped matrix with row permutation `pr` (input features) and
//! column permutation `pc` (output features), `X · Ŵ*` is computed as
//! `o_k = X[:, pr[k-th slice]] · g_k`, with `o_k` scattered straight into
//! output columns `pc[k-th slice]`. Only `S·M·N/G` multiply-adds are issued.

use crate::error::{PgbError, Result};
use crate::grouping::{GroupedMatrix, PruneOutcome};
use crate::model::{LayerNorm, ModelDims, ModelSpec, PrunedModel, Slot};
use crate::tensor::{matmul, Matrix};

const LAYER_NORM_EPS: f64 = 1e-12;

/// `X · repermute_dense(gm)` through the blocks only.
pub fn pgb_linear(x: &Matrix, gm: &GroupedMatrix) -> Result<Matrix> {
    pgb_linear_counted(x, gm).map(|(out, _)| out)
}

/// [`pgb_linear`] plus the number of multiply-adds issued.
pub fn pgb_linear_counted(x: &Matrix, gm: &GroupedMatrix) -> Result<(Matrix, u64)> {
    let (m, n) = gm.shape();
    if x.cols() != m {
        return Err(PgbError::Shape(format!(
            "input width {} does not match grouped matrix with {m} rows",
            x.cols()
        )));
    }
    let s = x.rows();
    let (bm, bn) = gm.block_shape();
    let mut out = Matrix::zeros(s, n);
    let mut gathered = vec![0.0; s * bm];
    let mut partial = vec![0.0; bn];
    let mut macs = 0u64;
    for (k, block) in gm.blocks().iter().enumerate() {
        let in_idx = gm.group_rows(k);
        let out_idx = gm.group_cols(k);
        for (t, dst) in gathered.chunks_mut(bm).enumerate() {
            let src = x.row(t);
            for (d, &i) in dst.iter_mut().zip(in_idx) {
                *d = src[i];
            }
        }
        for (t, xg) in gathered.chunks(bm).enumerate() {
            partial.iter_mut().for_each(|p| *p = 0.0);
            for (i, &xv) in xg.iter().enumerate() {
                for (p, &wv) in partial.iter_mut().zip(block.row(i)) {
                    *p += xv * wv;
                }
            }
            let row = out.row_mut(t);
            for (&c, &p) in out_idx.iter().zip(&partial) {
                row[c] = p;
            }
        }
        macs += (s * bm * bn) as u64;
    }
    Ok((out, macs))
}

/// Multiply-adds of one linear layer on an `S`-row input.
pub fn linear_macs(seq_len: usize, rows: usize, cols: usize, groups: usize) -> u64 {
    if groups == 0 {
        return 0;
    }
    (seq_len * rows * cols / groups) as u64
}

/// A linear operator in whatever form the model stores it.
#[derive(Debug, Clone, Copy)]
pub enum Linear<'a> {
    Dense(&'a Matrix),
    Grouped(&'a GroupedMatrix),
    /// Fully pruned matrix of the given shape; contributes zeros.
    Zero(usize, usize),
}

impl<'a> Linear<'a> {
    pub fn from_outcome(outcome: &'a PruneOutcome, shape: (usize, usize)) -> Self {
        match outcome {
            PruneOutcome::Grouped(g) => Linear::Grouped(g),
            PruneOutcome::Dropped => Linear::Zero(shape.0, shape.1),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Linear::Dense(m) => m.shape(),
            Linear::Grouped(g) => g.shape(),
            Linear::Zero(r, c) => (*r, *c),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Linear::Dense(w) => matmul(x, w),
            Linear::Grouped(g) => pgb_linear(x, g),
            Linear::Zero(r, c) => {
                if x.cols() != *r {
                    return Err(PgbError::Shape(format!(
                        "input width {} does not match dropped {r}x{c} matrix",
                        x.cols()
                    )));
                }
                Ok(Matrix::zeros(x.rows(), *c))
            }
        }
    }
}

/// Borrowed view of one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerOps<'a> {
    pub linears: [Linear<'a>; 6],
    pub b1: &'a [f64],
    pub b2: &'a [f64],
    pub ln_attn: &'a LayerNorm,
    pub ln_ffn: &'a LayerNorm,
    pub ffn_dropped: bool,
}

impl<'a> LayerOps<'a> {
    pub fn linear(&self, slot: Slot) -> Linear<'a> {
        self.linears[slot.index()]
    }
}

/// Anything that can be run through [`encoder_forward`].
pub trait Encoder {
    fn dims(&self) -> ModelDims;
    fn layer(&self, i: usize) -> LayerOps<'_>;
}

impl Encoder for ModelSpec {
    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn layer(&self, i: usize) -> LayerOps<'_> {
        let l = &self.layers[i];
        LayerOps {
            linears: Slot::ALL.map(|s| Linear::Dense(l.matrix(s))),
            b1: &l.b1,
            b2: &l.b2,
            ln_attn: &l.ln_attn,
            ln_ffn: &l.ln_ffn,
            ffn_dropped: false,
        }
    }
}

impl Encoder for PrunedModel {
    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn layer(&self, i: usize) -> LayerOps<'_> {
        let l = &self.layers[i];
        LayerOps {
            linears: Slot::ALL.map(|s| Linear::from_outcome(l.outcome(s), s.shape(&self.dims))),
            b1: &l.b1,
            b2: &l.b2,
            ln_attn: &l.ln_attn,
            ln_ffn: &l.ln_ffn,
            ffn_dropped: l.ffn_dropped(),
        }
    }
}

/// Exact GeLU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn layer_norm(x: &Matrix, ln: &LayerNorm) -> Matrix {
    let mut out = x.clone();
    let w = x.cols() as f64;
    for t in 0..x.rows() {
        let row = out.row_mut(t);
        let mean = row.iter().sum::<f64>() / w;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&ln.gamma).zip(&ln.beta) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn check_width(x: &Matrix, d: usize) -> Result<()> {
    if x.cols() != d {
        return Err(PgbError::Shape(format!(
            "activation width {} does not match model width {d}",
            x.cols()
        )));
    }
    Ok(())
}

/// Concatenated per-head attention outputs, before the output projection.
pub fn attention_context(x: &Matrix, layer: &LayerOps<'_>, heads: usize) -> Result<Matrix> {
    let d = layer.linear(Slot::Query).shape().1;
    check_width(x, layer.linear(Slot::Query).shape().0)?;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(PgbError::Shape(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    let q = layer.linear(Slot::Query).apply(x)?;
    let k = layer.linear(Slot::Key).apply(x)?;
    let v = layer.linear(Slot::Value).apply(x)?;
    let s = x.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(s, d);
    let mut scores = vec![0.0; s];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for t in 0..s {
            let qt = &q.row(t)[cols.clone()];
            for (u, sc) in scores.iter_mut().enumerate() {
                let ku = &k.row(u)[cols.clone()];
                *sc = qt.iter().zip(ku).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut scores);
            let out = &mut ctx.row_mut(t)[cols.clone()];
            for (u, &p) in scores.iter().enumerate() {
                for (o, vv) in out.iter_mut().zip(&v.row(u)[cols.clone()]) {
                    *o += p * vv;
                }
            }
        }
    }
    Ok(ctx)
}

/// Sum over heads of `softmax(Q_h K_hᵀ / √d_h) V_h W_hᴼ`.
pub fn mha_forward(x: &Matrix, layer: &LayerOps<'_>, heads: usize) -> Result<Matrix> {
    let ctx = attention_context(x, layer, heads)?;
    layer.linear(Slot::Output).apply(&ctx)
}

fn add_bias(m: &mut Matrix, bias: &[f64]) -> Result<()> {
    if bias.len() != m.cols() {
        return Err(PgbError::Shape(format!(
            "bias of length {} for width {}",
            bias.len(),
            m.cols()
        )));
    }
    for t in 0..m.rows() {
        for (v, b) in m.row_mut(t).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(())
}

/// Pre-activation hidden state `GeLU(A·W1 + b1)`.
pub fn ffn_hidden(a: &Matrix, layer: &LayerOps<'_>) -> Result<Matrix> {
    let mut h = layer.linear(Slot::FfnIn).apply(a)?;
    add_bias(&mut h, layer.b1)?;
    Ok(h.map(gelu))
}

/// `GeLU(A·W1 + b1)·W2 + b2`; a dropped FFN passes `A` through unchanged.
pub fn ffn_forward(a: &Matrix, layer: &LayerOps<'_>) -> Result<Matrix> {
    if layer.ffn_dropped {
        return Ok(a.clone());
    }
    let h = ffn_hidden(a, layer)?;
    let mut out = layer.linear(Slot::FfnOut).apply(&h)?;
    add_bias(&mut out, layer.b2)?;
    Ok(out)
}

/// Inputs seen by each linear of one layer during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Input of `Wq`, `Wk`, `Wv`.
    pub attn_in: Matrix,
    /// Input of `Wo`.
    pub context: Matrix,
    /// Input of `W1`.
    pub ffn_in: Matrix,
    /// Input of `W2`; `None` when the FFN is skipped.
    pub ffn_hidden: Option<Matrix>,
    pub output: Matrix,
}

impl LayerTrace {
    pub fn input_of(&self, slot: Slot) -> Option<&Matrix> {
        match slot {
            Slot::Query | Slot::Key | Slot::Value => Some(&self.attn_in),
            Slot::Output => Some(&self.context),
            Slot::FfnIn => Some(&self.ffn_in),
            Slot::FfnOut => self.ffn_hidden.as_ref(),
        }
    }
}

fn layer_forward(x: &Matrix, layer: &LayerOps<'_>, heads: usize) -> Result<LayerTrace> {
    let context = attention_context(x, layer, heads)?;
    let mut attn = layer.linear(Slot::Output).apply(&context)?;
    attn.add_assign(x);
    let ffn_in = layer_norm(&attn, layer.ln_attn);
    if layer.ffn_dropped {
        return Ok(LayerTrace {
            attn_in: x.clone(),
            context,
            output: ffn_in.clone(),
            ffn_in,
            ffn_hidden: None,
        });
    }
    let hidden = ffn_hidden(&ffn_in, layer)?;
    let mut out = layer.linear(Slot::FfnOut).apply(&hidden)?;
    add_bias(&mut out, layer.b2)?;
    out.add_assign(&ffn_in);
    Ok(LayerTrace {
        attn_in: x.clone(),
        context,
        output: layer_norm(&out, layer.ln_ffn),
        ffn_in,
        ffn_hidden: Some(hidden),
    })
}

/// Per-layer traces of a full forward pass.
pub fn encoder_trace(x: &Matrix, model: &impl Encoder) -> Result<Vec<LayerTrace>> {
    let dims = model.dims();
    check_width(x, dims.d)?;
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(dims.layers);
    for i in 0..dims.layers {
        let input = traces.last().map_or(x, |t| &t.output);
        let t = layer_forward(input, &model.layer(i), dims.heads)?;
        traces.push(t);
    }
    Ok(traces)
}

/// Post-LN encoder: `H = LN(X + MHA(X))`, then `LN(H + FFN(H))` unless the
/// FFN was dropped, in which case the layer emits `H`.
pub fn encoder_forward(x: &Matrix, model: &impl Encoder) -> Result<Matrix> {
    let dims = model.dims();
    check_width(x, dims.d)?;
    let mut h = x.clone();
    for i in 0..dims.layers {
        h = layer_forward(&h, &model.layer(i), dims.heads)?.output;
    }
    Ok(h)
}

/// Frobenius distance between two models' outputs on the same input.
pub fn discrepancy(x: &Matrix, a: &impl Encoder, b: &impl Encoder) -> Result<f64> {
    encoder_forward(x, a)?.distance(&encoder_forward(x, b)?)
}
