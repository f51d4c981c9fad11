//! The full translation model: encoder, deconvolution decoder and attentional
//! RNN decoder over a single parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Regression, Tape, Var};
use crate::data::ParallelBatch;
use crate::deconv::{deconv_predict, DeconvConfig, DeconvDecoder, TargetContextMatrix};
use crate::decoder::{DecoderState, RnnDecoder};
use crate::encoder::{Encoder, EncoderStates};
use crate::error::Result;
use crate::layers::{EmbeddingTable, Mode};
use crate::objective::{self, LossBreakdown};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub deconv: DeconvConfig,
    /// When false the decoder attends over an all-zero context matrix and the
    /// auxiliary losses are dropped.
    pub use_deconv: bool,
    pub regression: Regression,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.deconv.validate(self.emb_dim).map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub deconv: Option<DeconvDecoder>,
    pub decoder: RnnDecoder,
}

/// Teacher-forced outputs of one batch.
pub struct Forward {
    /// `[(B * S) x V]` with `S` decoder steps per sentence, row `b * S + t`.
    pub logits: Var,
    pub refs: Vec<usize>,
    pub mask: Vec<bool>,
    /// Regression and cross-entropy terms of the deconvolution decoder.
    pub aux: Option<(Var, Var)>,
}

impl Model {
    /// Initialises every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.src_vocab, config.emb_dim, config.hidden, &mut rng);
        let tgt_embed = EmbeddingTable::new(&mut store, "tgt_embed", "tgt_embed", config.tgt_vocab, config.emb_dim, &mut rng);
        let deconv = if config.use_deconv {
            Some(DeconvDecoder::new(&mut store, config.deconv.clone(), config.hidden, config.emb_dim, &mut rng)?)
        } else {
            None
        };
        let decoder = RnnDecoder::new(&mut store, tgt_embed, config.hidden, &mut rng);
        Ok(Model {
            config,
            store,
            encoder,
            deconv,
            decoder,
        })
    }

    pub fn tgt_embed(&self) -> &EmbeddingTable {
        &self.decoder.embed
    }

    /// The target-context matrix for encoded sentences; zeros without a deconvolution decoder.
    pub fn context(&self, tape: &mut Tape, bound: &Bound, enc: &EncoderStates) -> Result<TargetContextMatrix> {
        match &self.deconv {
            Some(d) => {
                let input = d.build_input_matrix(tape, enc)?;
                d.forward(tape, bound, input)
            }
            None => {
                let (t, dim) = (self.config.deconv.target_len, self.config.emb_dim);
                Ok(TargetContextMatrix {
                    e: tape.constant(Tensor::zeros(&[enc.batch(), t, dim])),
                    target_len: t,
                    dim,
                })
            }
        }
    }

    /// Encoder pass, context matrix and initial decoder state.
    pub fn prepare(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        src: &[Vec<usize>],
        lengths: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<(EncoderStates, TargetContextMatrix, DecoderState)> {
        let enc = self.encoder.encode(tape, bound, src, lengths, mode)?;
        let ctx = self.context(tape, bound, &enc)?;
        let (s, c) = self.encoder.init_decoder_state(tape, bound, &enc)?;
        Ok((enc, ctx, DecoderState { s, c, step: 0 }))
    }

    /// Teacher-forced pass over a batch.
    ///
    /// The regression reference is built from `frozen_table` when given, and
    /// otherwise from the current target embeddings.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &ParallelBatch,
        mode: &mut Mode<'_>,
        frozen_table: Option<&Tensor>,
    ) -> Result<Forward> {
        let (enc, ctx, mut state) = self.prepare(tape, bound, &batch.src, &batch.src_lengths, mode)?;

        let aux = match self.deconv {
            Some(_) => {
                let t = self.config.deconv.target_len;
                let refs: Vec<&[usize]> = (0..batch.len()).map(|b| batch.reference(b)).collect();
                let table = frozen_table.unwrap_or_else(|| tape.value(bound.get(self.tgt_embed().id)));
                let reference = objective::target_matrix_reference(table, &refs, t)?;
                let reg = objective::regression_loss(tape, ctx.e, &reference, self.config.regression)?;
                let pred = deconv_predict(tape, bound, &ctx, self.tgt_embed())?;
                let targets: Vec<usize> = refs.iter().flat_map(|r| objective::deconv_targets(r, t)).collect();
                let ce = objective::deconv_ce(tape, pred, &targets)?;
                Some((reg, ce))
            }
            None => None,
        };

        let steps = batch.decode_steps();
        let mut logits = Vec::with_capacity(steps);
        for t in 0..steps {
            let y_prev: Vec<usize> = batch.tgt.iter().map(|row| row[t]).collect();
            let out = self.decoder.decode_step(tape, bound, state, &y_prev, &enc, &ctx, mode)?;
            logits.push(out.logits);
            state = out.state;
        }
        let stacked = tape.stack_seq(&logits)?;
        let logits = tape.reshape(stacked, &[batch.len() * steps, self.config.tgt_vocab])?;
        let mut refs = Vec::with_capacity(batch.len() * steps);
        let mut mask = Vec::with_capacity(batch.len() * steps);
        for b in 0..batch.len() {
            refs.extend(&batch.tgt[b][1..]);
            mask.extend(&batch.tgt_mask[b][1..]);
        }
        Ok(Forward { logits, refs, mask, aux })
    }

    /// Training objective of a batch and its breakdown.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &ParallelBatch,
        mode: &mut Mode<'_>,
        frozen_table: Option<&Tensor>,
    ) -> Result<(Var, LossBreakdown)> {
        let fwd = self.forward(tape, bound, batch, mode, frozen_table)?;
        let nll = objective::nll_loss(tape, fwd.logits, &fwd.refs, &fwd.mask)?;
        let tokens = fwd.mask.iter().filter(|&&m| m).count();
        let (reg, ce) = fwd.aux.unzip();
        objective::total_loss(tape, nll, reg, ce, tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EncodedPair, ParallelBatch};
    use crate::optim::Adam;

    pub(crate) fn tiny(use_deconv: bool) -> Model {
        let config = ModelConfig {
            src_vocab: 12,
            tgt_vocab: 12,
            emb_dim: 8,
            hidden: 8,
            deconv: DeconvConfig::standard(8, 4),
            use_deconv,
            regression: Regression::SmoothL1,
        };
        Model::new(config, 5).unwrap()
    }

    fn batch() -> ParallelBatch {
        let pairs = [
            EncodedPair { src: vec![4, 5, 6], tgt: vec![7, 8] },
            EncodedPair { src: vec![9, 10], tgt: vec![11, 4, 5] },
        ];
        ParallelBatch::from_pairs(&pairs.iter().collect::<Vec<_>>())
    }

    fn group_grad_norms(model: &Model) -> Vec<(String, f64)> {
        model
            .store
            .groups()
            .into_iter()
            .map(|g| {
                let n = model
                    .store
                    .iter()
                    .filter(|(_, p)| p.group == g)
                    .map(|(_, p)| p.grad.norm_sq())
                    .sum::<f64>();
                (g, n)
            })
            .collect()
    }

    #[test]
    fn total_reaches_every_group() {
        let mut model = tiny(true);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let (loss, br) = model.loss(&mut tape, &bound, &batch(), &mut Mode::Eval, None).unwrap();
        assert!((br.total - (br.nll + br.smooth_l1 + br.deconv_ce)).abs() < 1e-9);
        assert!(br.nll > 0.0 && br.smooth_l1 > 0.0 && br.deconv_ce > 0.0);
        assert_eq!(br.token_count, 7);
        model.store.backward(&tape, loss).unwrap();
        for (g, n) in group_grad_norms(&model) {
            assert!(n > 0.0, "group {g} got no gradient");
        }
    }

    #[test]
    fn auxiliary_terms_skip_decoder() {
        let mut model = tiny(true);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let fwd = model.forward(&mut tape, &bound, &batch(), &mut Mode::Eval, None).unwrap();
        let (reg, ce) = fwd.aux.unwrap();
        for term in [reg, ce] {
            model.store.zero_grad();
            model.store.backward(&tape, term).unwrap();
            let norms = group_grad_norms(&model);
            let get = |g: &str| norms.iter().find(|(n, _)| n == g).unwrap().1;
            assert_eq!(get("decoder"), 0.0);
            assert!(get("deconv") > 0.0 && get("encoder") > 0.0);
        }
        // the regression reference is constant
        model.store.zero_grad();
        model.store.backward(&tape, reg).unwrap();
        let table = model.tgt_embed().id;
        assert!(model.store.get(table).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn baseline_has_no_deconv() {
        let model = tiny(false);
        assert!(model.deconv.is_none());
        assert!(!model.store.groups().contains(&"deconv".to_string()));
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let (_, br) = model.loss(&mut tape, &bound, &batch(), &mut Mode::Eval, None).unwrap();
        assert_eq!((br.smooth_l1, br.deconv_ce), (0.0, 0.0));
        assert_eq!(br.total, br.nll);
    }

    #[test]
    fn teacher_forcing_step_count() {
        let model = tiny(true);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let b = batch();
        let fwd = model.forward(&mut tape, &bound, &b, &mut Mode::Eval, None).unwrap();
        assert_eq!(tape.shape(fwd.logits), &[2 * 4, 12]);
        assert_eq!(fwd.refs[..4], [7, 8, crate::data::EOS, crate::data::PAD]);
    }

    #[test]
    fn overfits_one_batch() {
        let mut model = tiny(true);
        let mut adam = Adam::new(&model.store, 1e-2, 0.9, 0.98, 1e-9);
        let b = batch();
        let mut last = f64::INFINITY;
        let mut last_nll = f64::INFINITY;
        for step in 0..50 {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let (loss, br) = model.loss(&mut tape, &bound, &b, &mut Mode::Eval, None).unwrap();
            model.store.backward(&tape, loss).unwrap();
            adam.step(&mut model.store);
            if step < 20 {
                assert!(br.total < last, "step {step}: {} !< {last}", br.total);
            }
            assert!(br.nll < last_nll, "step {step}: nll {} !< {last_nll}", br.nll);
            last = br.total;
            last_nll = br.nll;
        }
        assert!(last < 0.5 * 5.0);
    }
}
