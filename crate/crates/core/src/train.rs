//! Training loop: seeded minibatches, Adam with clipping, per-epoch greedy
//! validation BLEU, best-checkpoint selection and early stopping.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{make_batches, EncodedPair, SentencePair, Vocabulary};
use crate::decoding::translate;
use crate::error::{Error, Result};
use crate::eval::bleu;
use crate::layers::Mode;
use crate::model::Model;
use crate::objective::LossBreakdown;
use crate::optim::{clip_gradients, Adam};

pub const METRICS_HEADER: &str = "step\tnll\tsmooth_l1\tdeconv_ce\ttotal\tgrad_norm";

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn to_tsv(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
            self.step, l.nll, l.smooth_l1, l.deconv_ce, l.total, self.grad_norm
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EpochBudget,
    Patience,
    TargetReached,
}

pub struct TrainOutcome {
    /// Model restored from the best validation epoch.
    pub model: Model,
    pub best: Checkpoint,
    pub best_bleu: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<f64>,
    pub metrics: Vec<StepMetrics>,
    pub stop: StopReason,
}

/// Where training writes its artefacts.
pub struct OutputPaths {
    pub metrics: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        OutputPaths {
            metrics: dir.join("metrics.tsv"),
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
        }
    }
}

pub struct Corpus<'a> {
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
    pub train: &'a [EncodedPair],
    pub valid: &'a [SentencePair],
}

/// Greedy-decoding corpus BLEU of `model` on `valid`.
pub fn validation_bleu(model: &Model, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary, valid: &[SentencePair]) -> Result<f64> {
    if valid.is_empty() {
        return Ok(0.0);
    }
    let mut hyps = Vec::with_capacity(valid.len());
    for pair in valid {
        let out = translate(model, &src_vocab.encode(&pair.src), 1, None, false)?;
        hyps.push(tgt_vocab.decode(&out.tokens));
    }
    let refs: Vec<Vec<Vec<String>>> = valid.iter().map(|p| vec![p.tgt.clone()]).collect();
    Ok(bleu(&hyps, &refs)?.bleu)
}

/// Trains from scratch. `out`, when given, receives the metrics log and checkpoints.
pub fn train(config: &RunConfig, corpus: &Corpus<'_>, out: Option<&OutputPaths>) -> Result<TrainOutcome> {
    if corpus.train.is_empty() {
        return Err(Error::Domain("no training pairs".into()));
    }
    let mc = config.model_config(corpus.src_vocab.len(), corpus.tgt_vocab.len());
    let mut model = Model::new(mc, config.seed)?;
    let mut adam = Adam::new(&model.store, config.lr, config.beta1, config.beta2, config.adam_eps);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);

    let mut log = match out {
        Some(o) => {
            let f = File::create(&o.metrics).map_err(|e| Error::io(&o.metrics, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&o.metrics, e))?;
            Some(w)
        }
        None => None,
    };

    let mut metrics = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut since_best = 0;
    let mut stop = StopReason::EpochBudget;
    let mut epochs_run = 0;

    for epoch in 1..=config.epochs {
        epochs_run = epoch;
        let batches = make_batches(corpus.train, config.batch_size, config.seed.wrapping_add(epoch as u64));
        for (i, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let mut mode = if config.dropout > 0.0 {
                Mode::Train {
                    rate: config.dropout,
                    rng: &mut dropout_rng,
                }
            } else {
                Mode::Eval
            };
            let (loss, breakdown) = model.loss(&mut tape, &bound, batch, &mut mode, None)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {:?} at epoch {epoch}, batch {i} (step {}, {} sentences, first source {:?})",
                    breakdown,
                    adam.step + 1,
                    batch.len(),
                    batch.src[0]
                )));
            }
            model.store.backward(&tape, loss)?;
            let grad_norm = clip_gradients(&mut model.store, config.clip);
            adam.step(&mut model.store);
            let m = StepMetrics {
                step: adam.step,
                loss: breakdown,
                grad_norm,
            };
            if let (Some(w), Some(o)) = (log.as_mut(), out) {
                writeln!(w, "{}", m.to_tsv()).map_err(|e| Error::io(&o.metrics, e))?;
            }
            metrics.push(m);
        }
        if let (Some(w), Some(o)) = (log.as_mut(), out) {
            w.flush().map_err(|e| Error::io(&o.metrics, e))?;
        }

        let score = validation_bleu(&model, corpus.src_vocab, corpus.tgt_vocab, corpus.valid)?;
        history.push(score);
        let last = metrics.last().map(|m| m.loss.total).unwrap_or(f64::NAN);
        info!("epoch {epoch}: step {} loss {last:.4} valid BLEU {score:.2}", adam.step);

        let ck = Checkpoint::capture(&model, Some(&adam), config, corpus.src_vocab, corpus.tgt_vocab, epoch, &history);
        if let Some(o) = out {
            ck.save(&o.last)?;
        }
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            if let Some(o) = out {
                ck.save(&o.best)?;
            }
            best = Some((score, epoch, ck));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.target_bleu.is_some_and(|t| score >= t) {
            stop = StopReason::TargetReached;
            break;
        }
        if config.patience > 0 && since_best >= config.patience {
            stop = StopReason::Patience;
            break;
        }
    }

    let (best_bleu, best_epoch, best) = match best {
        Some(b) => b,
        None => {
            let ck = Checkpoint::capture(&model, Some(&adam), config, corpus.src_vocab, corpus.tgt_vocab, 0, &history);
            (0.0, 0, ck)
        }
    };
    Ok(TrainOutcome {
        model: best.model()?,
        best,
        best_bleu,
        best_epoch,
        epochs_run,
        history,
        metrics,
        stop,
    })
}
