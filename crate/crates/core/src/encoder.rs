//! Bidirectional LSTM encoder.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{EmbeddingTable, LstmCell, Mode};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-position annotations plus the final state of each direction.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    /// `[B x n x 2d]`, row `i` is `[fwd_i; bwd_i]`.
    pub annotations: Var,
    /// `[B x d]`, forward state after the last real token.
    pub fwd_final: Var,
    /// `[B x d]`, backward state after reading position 0.
    pub bwd_final: Var,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    /// `B * n` flags, false at padding.
    pub mask: Vec<bool>,
}

impl EncoderStates {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: EmbeddingTable,
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    /// `[d x 2d]` projection of both final states onto the decoder's first state.
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub hidden: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, vocab: usize, emb_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let embed = EmbeddingTable::new(store, "src_embed", "src_embed", vocab, emb_dim, rng);
        let fwd = LstmCell::new(store, "encoder.fwd", "encoder", emb_dim, hidden, rng);
        let bwd = LstmCell::new(store, "encoder.bwd", "encoder", emb_dim, hidden, rng);
        let init_w = store.add_glorot("encoder.init.w", "encoder", &[hidden, 2 * hidden], rng);
        let init_b = store.add("encoder.init.b", "encoder", Tensor::zeros(&[hidden]));
        Encoder {
            embed,
            fwd,
            bwd,
            init_w,
            init_b,
            hidden,
        }
    }

    /// Encodes a padded batch. `src[b]` holds `lengths[b]` real ids followed by padding.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        src: &[Vec<usize>],
        lengths: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<EncoderStates> {
        let batch = src.len();
        if batch == 0 || lengths.len() != batch {
            return Err(Error::Domain("empty source batch".into()));
        }
        let n = src[0].len();
        if n == 0 || lengths.iter().any(|&l| l == 0 || l > n) || src.iter().any(|r| r.len() != n) {
            return Err(Error::Domain("source sentences must be non-empty and padded to one length".into()));
        }
        let d = self.hidden;
        let zeros = tape.constant(Tensor::zeros(&[batch, d]));

        let mut inputs = Vec::with_capacity(n);
        for t in 0..n {
            let column: Vec<usize> = src.iter().map(|row| row[t]).collect();
            let x = self.embed.embed(tape, bound, &column)?;
            inputs.push(mode.dropout(tape, x)?);
        }

        let live: Vec<Vec<bool>> = (0..n)
            .map(|t| lengths.iter().map(|&l| t < l).collect())
            .collect();
        let advance = |tape: &mut Tape, cell: &LstmCell, t: usize, h: Var, c: Var| -> Result<(Var, Var)> {
            let (h2, c2) = cell.step(tape, bound, inputs[t], h, c)?;
            if live[t].iter().all(|&m| m) {
                Ok((h2, c2))
            } else {
                Ok((tape.row_select(&live[t], h2, h)?, tape.row_select(&live[t], c2, c)?))
            }
        };

        let (mut h, mut c) = (zeros, zeros);
        let mut fwd_states = Vec::with_capacity(n);
        for t in 0..n {
            (h, c) = advance(tape, &self.fwd, t, h, c)?;
            fwd_states.push(h);
        }
        let fwd_final = h;

        let (mut h, mut c) = (zeros, zeros);
        let mut bwd_states = vec![zeros; n];
        for t in (0..n).rev() {
            (h, c) = advance(tape, &self.bwd, t, h, c)?;
            bwd_states[t] = h;
        }
        let bwd_final = h;

        let per_position = fwd_states
            .iter()
            .zip(&bwd_states)
            .map(|(&f, &b)| tape.concat_cols(&[f, b]))
            .collect::<Result<Vec<_>>>()?;
        let annotations = tape.stack_seq(&per_position)?;
        Ok(EncoderStates {
            annotations,
            fwd_final,
            bwd_final,
            lengths: lengths.to_vec(),
            max_len: n,
            mask: live_mask(lengths, n),
        })
    }

    /// Encodes a single unpadded sentence.
    pub fn encode_one(&self, tape: &mut Tape, bound: &Bound, ids: &[usize], mode: &mut Mode<'_>) -> Result<EncoderStates> {
        if ids.is_empty() {
            return Err(Error::Domain("empty source sentence".into()));
        }
        self.encode(tape, bound, &[ids.to_vec()], &[ids.len()], mode)
    }

    /// `s_0 = tanh(W_init [fwd_final; bwd_final] + b_init)`, `C_0 = 0`.
    pub fn init_decoder_state(&self, tape: &mut Tape, bound: &Bound, states: &EncoderStates) -> Result<(Var, Var)> {
        let both = tape.concat_cols(&[states.fwd_final, states.bwd_final])?;
        let pre = tape.linear(both, bound.get(self.init_w), Some(bound.get(self.init_b)))?;
        let s0 = tape.tanh(pre);
        let c0 = tape.constant(Tensor::zeros(&[states.batch(), self.hidden]));
        Ok((s0, c0))
    }
}

fn live_mask(lengths: &[usize], n: usize) -> Vec<bool> {
    lengths.iter().flat_map(|&l| (0..n).map(move |t| t < l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize) -> (ParamStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, 10, 5, d, &mut rng);
        (store, enc)
    }

    #[test]
    fn single_token() {
        let (store, enc) = setup(3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let st = enc.encode_one(&mut tape, &bound, &[5], &mut Mode::Eval).unwrap();
        assert_eq!(tape.shape(st.annotations), &[1, 1, 6]);
        let ann = tape.value(st.annotations).data().to_vec();
        assert_eq!(&ann[..3], tape.value(st.fwd_final).data());
        assert_eq!(&ann[3..], tape.value(st.bwd_final).data());
    }

    #[test]
    fn empty_input_rejected() {
        let (store, enc) = setup(3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        assert!(matches!(enc.encode_one(&mut tape, &bound, &[], &mut Mode::Eval), Err(Error::Domain(_))));
    }

    #[test]
    fn palindrome_with_tied_directions() {
        let (mut store, enc) = setup(4);
        let w = store.value(enc.fwd.w).clone();
        let b = store.value(enc.fwd.b).clone();
        store.get_mut(enc.bwd.w).value = w;
        store.get_mut(enc.bwd.b).value = b;
        let ids = [4, 7, 2, 7, 4];
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let st = enc.encode_one(&mut tape, &bound, &ids, &mut Mode::Eval).unwrap();
        let ann = tape.value(st.annotations);
        let d = 4;
        for i in 0..5 {
            let row = ann.row(i);
            let mirror = ann.row(4 - i);
            for k in 0..d {
                assert!((row[k] - mirror[d + k]).abs() < 1e-12);
                assert!((row[d + k] - mirror[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_does_not_leak() {
        let (store, enc) = setup(4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let alone = enc.encode_one(&mut tape, &bound, &[5, 6, 3], &mut Mode::Eval).unwrap();
        let padded = enc
            .encode(&mut tape, &bound, &[vec![5, 6, 3, 0, 0], vec![1, 2, 3, 4, 5]], &[3, 5], &mut Mode::Eval)
            .unwrap();
        let (a, p) = (tape.value(alone.annotations), tape.value(padded.annotations));
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(a, b)| (a - b).abs() < 1e-12);
        for i in 0..3 {
            assert!(close(a.row(i), p.row(i)));
        }
        assert!(close(tape.value(alone.fwd_final).row(0), tape.value(padded.fwd_final).row(0)));
        assert!(close(tape.value(alone.bwd_final).row(0), tape.value(padded.bwd_final).row(0)));
        assert_eq!(padded.mask, vec![true, true, true, false, false, true, true, true, true, true]);
    }

    #[test]
    fn deterministic() {
        let (store, enc) = setup(4);
        let run = || {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let st = enc.encode_one(&mut tape, &bound, &[1, 2, 3], &mut Mode::Eval).unwrap();
            tape.value(st.annotations).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn init_state_values() {
        let (mut store, enc) = setup(1);
        store.get_mut(enc.init_w).value = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let st = EncoderStates {
            annotations: tape.constant(Tensor::zeros(&[1, 1, 2])),
            fwd_final: tape.constant(Tensor::new(&[1, 1], vec![0.5]).unwrap()),
            bwd_final: tape.constant(Tensor::new(&[1, 1], vec![-0.5]).unwrap()),
            lengths: vec![1],
            max_len: 1,
            mask: vec![true],
        };
        let (s0, c0) = enc.init_decoder_state(&mut tape, &bound, &st).unwrap();
        assert_eq!(tape.value(s0).data(), &[0.0]);
        assert_eq!(tape.value(c0).data(), &[0.0]);

        store.get_mut(enc.init_w).value = Tensor::zeros(&[1, 2]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let st = enc.encode_one(&mut tape, &bound, &[3, 4], &mut Mode::Eval).unwrap();
        let (s0, _) = enc.init_decoder_state(&mut tape, &bound, &st).unwrap();
        assert_eq!(tape.value(s0).data(), &[0.0]);
    }

    #[test]
    fn init_state_gradient_reaches_both_directions() {
        let (store, enc) = setup(3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let st = enc.encode_one(&mut tape, &bound, &[3, 4, 5], &mut Mode::Eval).unwrap();
        let (s0, _) = enc.init_decoder_state(&mut tape, &bound, &st).unwrap();
        let loss = tape.sum(s0);
        let grads = tape.backward(loss).unwrap();
        for v in [st.fwd_final, st.bwd_final] {
            assert!(grads.wrt(v).unwrap().data().iter().any(|&g| g != 0.0));
        }
    }
}
