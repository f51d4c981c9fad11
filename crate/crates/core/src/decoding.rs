//! Greedy and beam-search inference with length-normalised scores.

use std::cmp::Ordering;

use crate::autodiff::Tape;
use crate::data::{BOS, EOS, PAD};
use crate::deconv::TargetContextMatrix;
use crate::decoder::DecoderState;
use crate::encoder::EncoderStates;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Model;
use crate::params::Bound;
use crate::tensor::log_softmax_slice;

/// Attention weights of one output token, stored in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct StepAttention {
    /// Over source positions.
    pub source: Vec<f32>,
    /// Over rows of the target-context matrix.
    pub context: Vec<f32>,
}

/// Next-token distribution of a left-to-right model.
pub trait StepScorer {
    type State: Clone;

    fn initial(&mut self) -> Result<Self::State>;

    /// Log-probabilities over the vocabulary after `prev`, the advanced state,
    /// and the attention used for this step if the scorer tracks it.
    fn step(&mut self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State, Option<StepAttention>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens without BOS or EOS.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of the tokens, EOS included when emitted.
    pub log_prob: f64,
    /// Whether the hypothesis ended with EOS rather than at the length cap.
    pub ended: bool,
    /// One entry per scored token, EOS included.
    pub trace: Vec<StepAttention>,
}

impl Hypothesis {
    /// Scored positions: the tokens plus EOS if emitted.
    pub fn length(&self) -> usize {
        self.tokens.len() + usize::from(self.ended)
    }

    /// `log_prob / length`.
    pub fn score(&self) -> f64 {
        self.log_prob / self.length().max(1) as f64
    }
}

/// Default length cap for a source of `src_len` tokens.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 10
}

fn emittable(tok: usize) -> bool {
    tok != PAD && tok != BOS
}

/// Highest-scoring emittable token; the lowest id wins ties.
fn best_token(logp: &[f64]) -> usize {
    let mut best = None;
    for (tok, &lp) in logp.iter().enumerate() {
        if emittable(tok) && best.is_none_or(|(_, b)| lp > b) {
            best = Some((tok, lp));
        }
    }
    best.expect("vocabulary has an emittable token").0
}

/// Picks the argmax token until EOS or `max_len` tokens.
pub fn greedy_decode<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Hypothesis> {
    let mut state = scorer.initial()?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        ended: false,
        trace: Vec::new(),
    };
    let mut prev = BOS;
    while hyp.tokens.len() < max_len {
        let (logp, next, attn) = scorer.step(&state, prev)?;
        let tok = best_token(&logp);
        hyp.log_prob += logp[tok];
        hyp.trace.extend(attn);
        if tok == EOS {
            hyp.ended = true;
            break;
        }
        hyp.tokens.push(tok);
        state = next;
        prev = tok;
    }
    Ok(hyp)
}

struct Live<St> {
    hyp: Hypothesis,
    state: St,
}

/// Orders by normalised score, then shorter, then lexicographically smaller tokens.
fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    match a.score().partial_cmp(&b.score()) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => (a.length(), &a.tokens) < (b.length(), &b.tokens),
    }
}

/// Beam search. At every step the `width` best expansions by cumulative
/// log-probability are kept; those ending in EOS move to the finished pool and
/// the rest continue. Hypotheses still open at `max_len` tokens are pooled as
/// they are. The pool entry with the best normalised score is returned.
pub fn beam_decode<S: StepScorer>(scorer: &mut S, width: usize, max_len: usize) -> Result<Hypothesis> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut beam = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            ended: false,
            trace: Vec::new(),
        },
        state: scorer.initial()?,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for len in 0..max_len {
        if beam.is_empty() {
            break;
        }
        let mut expansions = Vec::with_capacity(beam.len());
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (h, live) in beam.iter().enumerate() {
            let prev = live.hyp.tokens.last().copied().unwrap_or(BOS);
            let (logp, next, attn) = scorer.step(&live.state, prev)?;
            for (tok, &lp) in logp.iter().enumerate() {
                let total = live.hyp.log_prob + lp;
                if emittable(tok) && total.is_finite() {
                    candidates.push((total, h, tok));
                }
            }
            expansions.push((next, attn));
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(width);

        let mut next_beam = Vec::with_capacity(candidates.len());
        for (total, h, tok) in candidates {
            let (state, attn) = &expansions[h];
            let mut hyp = beam[h].hyp.clone();
            hyp.log_prob = total;
            hyp.trace.extend(attn.clone());
            if tok == EOS {
                hyp.ended = true;
                pool.push(hyp);
            } else {
                hyp.tokens.push(tok);
                if len + 1 == max_len {
                    pool.push(hyp);
                } else {
                    next_beam.push(Live {
                        hyp,
                        state: state.clone(),
                    });
                }
            }
        }
        beam = next_beam;
    }
    let mut best: Option<Hypothesis> = None;
    for hyp in pool {
        if best.as_ref().is_none_or(|b| better(&hyp, b)) {
            best = Some(hyp);
        }
    }
    // an empty pool only happens with max_len == 0 or a vocabulary of -inf scores
    Ok(best.unwrap_or(Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        ended: false,
        trace: Vec::new(),
    }))
}

/// Scores next tokens with a trained model for one source sentence.
pub struct ModelScorer<'m> {
    model: &'m Model,
    tape: Tape,
    bound: Bound,
    enc: EncoderStates,
    ctx: TargetContextMatrix,
    init: DecoderState,
    trace: bool,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, src: &[usize], trace: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let (enc, ctx, init) = model.prepare(&mut tape, &bound, &[src.to_vec()], &[src.len()], &mut Mode::Eval)?;
        Ok(ModelScorer {
            model,
            tape,
            bound,
            enc,
            ctx,
            init,
            trace,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn initial(&mut self) -> Result<DecoderState> {
        Ok(self.init)
    }

    fn step(&mut self, state: &DecoderState, prev: usize) -> Result<(Vec<f64>, DecoderState, Option<StepAttention>)> {
        let out = self
            .model
            .decoder
            .decode_step(&mut self.tape, &self.bound, *state, &[prev], &self.enc, &self.ctx, &mut Mode::Eval)?;
        let logits = self.tape.value(out.logits);
        logits.check_finite("decoder logits")?;
        let logp = log_softmax_slice(logits.data());
        let attn = self.trace.then(|| StepAttention {
            source: self.tape.value(out.alpha).data().iter().map(|&x| x as f32).collect(),
            context: self.tape.value(out.alpha_ctx).data().iter().map(|&x| x as f32).collect(),
        });
        Ok((logp, out.state, attn))
    }
}

/// Translates one source sentence; `width == 1` runs greedy search.
pub fn translate(model: &Model, src: &[usize], width: usize, max_len: Option<usize>, trace: bool) -> Result<Hypothesis> {
    if src.is_empty() {
        return Ok(Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            ended: false,
            trace: Vec::new(),
        });
    }
    let max_len = max_len.unwrap_or_else(|| default_max_len(src.len()));
    let mut scorer = ModelScorer::new(model, src, trace)?;
    if width == 1 {
        greedy_decode(&mut scorer, max_len)
    } else {
        beam_decode(&mut scorer, width, max_len)
    }
}
