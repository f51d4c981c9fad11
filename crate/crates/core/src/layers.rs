//! Parameterised building blocks shared by the encoder and both decoders.

use rand::{Rng, RngCore};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Word embedding matrix, one row per vocabulary entry (reserved tokens included).
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub id: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let id = store.add_glorot(name, group, &[vocab_size, dim], rng);
        EmbeddingTable { id, vocab_size, dim }
    }

    /// `[len x dim]` matrix whose row `t` is the embedding of `ids[t]`.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, ids: &[usize]) -> Result<Var> {
        tape.embedding(bound.get(self.id), ids)
    }
}

/// Single-layer LSTM cell with gates stacked as `[input; forget; candidate; output]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    /// `[4h x (input + h)]`, applied to `[x; h_prev]`.
    pub w: ParamId,
    /// `[4h]`; the forget slice starts at 1.0.
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, prefix: &str, group: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_glorot(&format!("{prefix}.w"), group, &[4 * hidden, input_dim + hidden], rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = store.add(&format!("{prefix}.b"), group, bias);
        LstmCell {
            w,
            b,
            input_dim,
            hidden,
        }
    }

    /// One step over a batch: `x` is `[B x input]`, states are `[B x hidden]`.
    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let (xs, hs, cs) = (tape.shape(x).to_vec(), tape.shape(h_prev).to_vec(), tape.shape(c_prev).to_vec());
        if xs.len() != 2 || xs[1] != self.input_dim {
            return Err(Error::dim("lstm input", &xs, &[self.input_dim]));
        }
        if hs != [xs[0], self.hidden] || cs != hs {
            return Err(Error::dim("lstm state", &hs, &cs));
        }
        let h = self.hidden;
        let joined = tape.concat_cols(&[x, h_prev])?;
        let gates = tape.linear(joined, bound.get(self.w), Some(bound.get(self.b)))?;
        let i_pre = tape.slice_cols(gates, 0, h)?;
        let f_pre = tape.slice_cols(gates, h, h)?;
        let g_pre = tape.slice_cols(gates, 2 * h, h)?;
        let o_pre = tape.slice_cols(gates, 3 * h, h)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        let h_new = tape.mul(o, squashed)?;
        Ok((h_new, c))
    }
}

/// `W x + b` with `W` stored `[out x in]`; applies to every row of `x`.
pub fn linear(tape: &mut Tape, w: Var, b: Option<Var>, x: Var) -> Result<Var> {
    tape.linear(x, w, b)
}

/// Inverted dropout: in training each element is zeroed with probability `rate`
/// and survivors are scaled by `1 / (1 - rate)`. Outside training it returns `x` itself.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.shape(x).to_vec();
    let mask: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, m)
}

/// Whether a forward pass trains (with dropout) or evaluates.
pub enum Mode<'a> {
    Eval,
    Train { rate: f64, rng: &'a mut dyn RngCore },
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { rate, rng } => dropout(tape, x, *rate, true, *rng),
        }
    }
}
