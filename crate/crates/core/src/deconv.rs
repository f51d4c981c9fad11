//! Deconvolution-based decoder: expands the two final encoder states into a
//! `T x dim` matrix of target-side word embeddings.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::EncoderStates;
use crate::error::{Error, Result};
use crate::layers::EmbeddingTable;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{conv_transpose_len, Tensor};

/// Rows of the deconvolution input: forward final state and backward final state.
pub const INPUT_ROWS: usize = 2;

/// Norm floor used by the cosine word predictor.
pub const COSINE_EPS: f64 = 1e-8;

/// One transposed-convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub filters: usize,
}

impl DeconvLayerSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize, filters: usize) -> Self {
        DeconvLayerSpec {
            kernel,
            stride,
            padding,
            filters,
        }
    }

    /// Length produced from an input of length `len`, if at least one.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        conv_transpose_len(len, self.kernel, self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeconvConfig {
    pub layers: Vec<DeconvLayerSpec>,
    /// Rows of the target-context matrix.
    pub target_len: usize,
}

impl DeconvConfig {
    /// Three `k=4, s=2, p=1` layers with `dim` filters each: `2 -> 4 -> 8 -> 16`, cropped to `target_len`.
    pub fn standard(dim: usize, target_len: usize) -> Self {
        DeconvConfig {
            layers: vec![DeconvLayerSpec::new(4, 2, 1, dim); 3],
            target_len,
        }
    }

    /// Lengths after each layer starting from `INPUT_ROWS`.
    pub fn layer_lengths(&self) -> Result<Vec<usize>> {
        let mut len = INPUT_ROWS;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            len = spec.output_len(len).ok_or_else(|| {
                Error::Config(format!("deconv layer {i} ({spec:?}) yields length < 1 from {len}"))
            })?;
            out.push(len);
        }
        Ok(out)
    }

    /// Checks every static constraint and returns the pre-crop length.
    pub fn validate(&self, dim: usize) -> Result<usize> {
        if self.layers.is_empty() {
            return Err(Error::Config("deconv needs at least one layer".into()));
        }
        if self.target_len == 0 {
            return Err(Error::Config("deconv.target_len must be at least 1".into()));
        }
        for (i, s) in self.layers.iter().enumerate() {
            if s.kernel == 0 || s.stride == 0 || s.filters == 0 {
                return Err(Error::Config(format!("deconv layer {i}: kernel, stride and filters must be >= 1")));
            }
        }
        let last = self.layers.last().unwrap();
        if last.filters != dim {
            return Err(Error::Config(format!(
                "last deconv layer has {} filters, embedding dim is {dim}",
                last.filters
            )));
        }
        let t_pre = *self.layer_lengths()?.last().unwrap();
        if t_pre < self.target_len {
            return Err(Error::Config(format!(
                "deconv stack yields length {t_pre}, shorter than target_len {}",
                self.target_len
            )));
        }
        Ok(t_pre)
    }

    /// Left offset of the centre crop (the extra row, if any, is dropped on the right).
    pub fn crop_start(&self, t_pre: usize) -> usize {
        (t_pre - self.target_len) / 2
    }
}

/// The generated matrix `E` for a batch: `[B x T x dim]`.
#[derive(Clone, Copy, Debug)]
pub struct TargetContextMatrix {
    pub e: Var,
    pub target_len: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
struct Layer {
    spec: DeconvLayerSpec,
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct DeconvDecoder {
    layers: Vec<Layer>,
    pub config: DeconvConfig,
    t_pre: usize,
    pub dim: usize,
}

impl DeconvDecoder {
    /// Builds the layer stack over `hidden`-wide input rows. Fails on any invalid spec.
    pub fn new(store: &mut ParamStore, config: DeconvConfig, hidden: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let t_pre = config.validate(dim)?;
        let mut channels = hidden;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, spec) in config.layers.iter().enumerate() {
            let kernel = store.add_glorot(
                &format!("deconv.{i}.kernel"),
                "deconv",
                &[spec.kernel, channels, spec.filters],
                rng,
            );
            let bias = store.add(&format!("deconv.{i}.bias"), "deconv", Tensor::zeros(&[spec.filters]));
            layers.push(Layer { spec: *spec, kernel, bias });
            channels = spec.filters;
        }
        Ok(DeconvDecoder {
            layers,
            config,
            t_pre,
            dim,
        })
    }

    pub fn target_len(&self) -> usize {
        self.config.target_len
    }

    /// `I = [fwd_final; bwd_final]` per sentence: `[B x 2 x d]`.
    pub fn build_input_matrix(&self, tape: &mut Tape, states: &EncoderStates) -> Result<Var> {
        let both = tape.concat_cols(&[states.fwd_final, states.bwd_final])?;
        let [batch, width] = *tape.shape(both) else {
            unreachable!("final states are matrices")
        };
        tape.reshape(both, &[batch, INPUT_ROWS, width / INPUT_ROWS])
    }

    /// Transposed convolutions with ReLU between layers (none after the last),
    /// then a centre crop of the length axis to exactly `T`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<TargetContextMatrix> {
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = tape.conv_transpose1d(x, bound.get(layer.kernel), layer.spec.stride, layer.spec.padding)?;
            let y = tape.add_bias(y, bound.get(layer.bias))?;
            x = if i + 1 < self.layers.len() { tape.relu(y) } else { y };
        }
        debug_assert_eq!(tape.shape(x)[tape.shape(x).len() - 2], self.t_pre);
        let e = if self.t_pre == self.config.target_len {
            x
        } else {
            tape.crop_seq(x, self.config.crop_start(self.t_pre), self.config.target_len)?
        };
        Ok(TargetContextMatrix {
            e,
            target_len: self.config.target_len,
            dim: self.dim,
        })
    }
}

/// Word distribution per row of `E`: softmax over the cosine similarity with every
/// embedding in `table`. Returns `[(B * T) x V]`.
pub fn deconv_predict(tape: &mut Tape, bound: &Bound, ctx: &TargetContextMatrix, table: &EmbeddingTable) -> Result<Var> {
    if ctx.dim != table.dim {
        return Err(Error::dim("deconv_predict", &[ctx.target_len, ctx.dim], &[table.vocab_size, table.dim]));
    }
    let rows = tape.value(ctx.e).numel() / ctx.dim;
    let flat = tape.reshape(ctx.e, &[rows, ctx.dim])?;
    let sims = tape.cosine(flat, bound.get(table.id), COSINE_EPS)?;
    tape.softmax(sims, None)
}
