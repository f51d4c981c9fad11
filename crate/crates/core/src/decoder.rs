//! Attentional LSTM decoder reading both the source annotations and the
//! target-context matrix.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::deconv::TargetContextMatrix;
use crate::encoder::EncoderStates;
use crate::error::{Error, Result};
use crate::layers::{EmbeddingTable, LstmCell, Mode};
use crate::params::{Bound, ParamId, ParamStore};

/// Hidden and cell state of the decoder after `step` tokens.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub s: Var,
    pub c: Var,
    pub step: usize,
}

/// Bilinear attention maps, the output combiner and the vocabulary projection.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// `[d x 2d]`: energy `s^T W x_i` against source annotations.
    pub w_src: ParamId,
    /// `[d x dim]`: energy against rows of the target-context matrix.
    pub w_ctx: ParamId,
    /// `[d x (d + 2d + dim)]`: `v_t = tanh(W_v [s_t; c_t; c~_t])`.
    pub w_v: ParamId,
    /// `[V x d]`: logits `W_o v_t`.
    pub w_o: ParamId,
}

pub struct StepOutput {
    /// `[B x V]`.
    pub logits: Var,
    pub state: DecoderState,
    /// `[B x n]` weights over source positions.
    pub alpha: Var,
    /// `[B x T]` weights over rows of the target-context matrix.
    pub alpha_ctx: Var,
}

/// Global attention with a bilinear score.
///
/// `query` is `[B x d]`, `keys` `[B x n x w]`, `w_a` `[d x w]`. Entries where
/// `mask` is false get zero weight. Returns `(context [B x w], weights [B x n])`.
pub fn attend(tape: &mut Tape, query: Var, keys: Var, w_a: Var, mask: Option<&[bool]>) -> Result<(Var, Var)> {
    let projected = tape.matmul(query, w_a)?;
    let energies = tape.batch_scores(projected, keys)?;
    let weights = tape.softmax(energies, mask)?;
    let context = tape.batch_weighted_sum(weights, keys)?;
    Ok((context, weights))
}

#[derive(Clone, Debug)]
pub struct RnnDecoder {
    pub embed: EmbeddingTable,
    pub cell: LstmCell,
    pub attn: AttentionParams,
    pub hidden: usize,
    pub dim: usize,
}

impl RnnDecoder {
    pub fn new(store: &mut ParamStore, embed: EmbeddingTable, hidden: usize, rng: &mut impl Rng) -> Self {
        let dim = embed.dim;
        let cell = LstmCell::new(store, "decoder.lstm", "decoder", dim, hidden, rng);
        let attn = AttentionParams {
            w_src: store.add_glorot("decoder.attn_src", "decoder", &[hidden, 2 * hidden], rng),
            w_ctx: store.add_glorot("decoder.attn_ctx", "decoder", &[hidden, dim], rng),
            w_v: store.add_glorot("decoder.combine", "decoder", &[hidden, 3 * hidden + dim], rng),
            w_o: store.add_glorot("decoder.out", "decoder", &[embed.vocab_size, hidden], rng),
        };
        RnnDecoder {
            embed,
            cell,
            attn,
            hidden,
            dim,
        }
    }

    /// Advances every sentence in the batch by one token.
    ///
    /// Both attentions are queried with the previous state `s_{t-1}`; the
    /// target-context matrix is never masked.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        state: DecoderState,
        y_prev: &[usize],
        enc: &EncoderStates,
        ctx: &TargetContextMatrix,
        mode: &mut Mode<'_>,
    ) -> Result<StepOutput> {
        if y_prev.len() != enc.batch() {
            return Err(Error::dim("decode_step", &[y_prev.len()], &[enc.batch()]));
        }
        let x = self.embed.embed(tape, bound, y_prev)?;
        let x = mode.dropout(tape, x)?;
        let (s, c) = self.cell.step(tape, bound, x, state.s, state.c)?;
        let (src_ctx, alpha) = attend(tape, state.s, enc.annotations, bound.get(self.attn.w_src), Some(&enc.mask))?;
        let (tgt_ctx, alpha_ctx) = attend(tape, state.s, ctx.e, bound.get(self.attn.w_ctx), None)?;
        let joined = tape.concat_cols(&[s, src_ctx, tgt_ctx])?;
        let pre = tape.linear(joined, bound.get(self.attn.w_v), None)?;
        let v = tape.tanh(pre);
        let v = mode.dropout(tape, v)?;
        let logits = tape.linear(v, bound.get(self.attn.w_o), None)?;
        Ok(StepOutput {
            logits,
            state: DecoderState {
                s,
                c,
                step: state.step + 1,
            },
            alpha,
            alpha_ctx,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn single_key() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(&[1, 2], vec![0.3, -1.0]).unwrap());
        let keys = tape.constant(Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.constant(Tensor::ones(&[2, 3]));
        let (ctx, a) = attend(&mut tape, q, keys, w, None).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0]);
        assert_eq!(tape.value(ctx).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_map_gives_uniform_weights() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(&[1, 2], vec![0.3, -1.0]).unwrap());
        let keys = tape.constant(Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 9.0]).unwrap());
        let w = tape.constant(Tensor::zeros(&[2, 1]));
        let (ctx, a) = attend(&mut tape, q, keys, w, Some(&[true, true, false])).unwrap();
        assert_eq!(tape.value(a).data(), &[0.5, 0.5, 0.0]);
        assert_eq!(tape.value(ctx).data(), &[1.5]);
        assert!(matches!(attend(&mut tape, q, keys, w, Some(&[false; 3])), Err(Error::Domain(_))));
    }

    #[test]
    fn closed_form_weights() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let keys = tape.constant(Tensor::new(&[1, 2, 1], vec![0.0, 3f64.ln()]).unwrap());
        let w = tape.constant(Tensor::ones(&[1, 1]));
        let (ctx, a) = attend(&mut tape, q, keys, w, None).unwrap();
        let av = tape.value(a).data();
        assert!((av[0] - 0.25).abs() < 1e-15 && (av[1] - 0.75).abs() < 1e-15);
        assert!((tape.value(ctx).data()[0] - 0.75 * 3f64.ln()).abs() < 1e-15);
    }
}
