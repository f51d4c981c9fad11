//! Command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, EncodedPair, ParallelBatch, SentencePair, SynthKind, Vocabulary, RESERVED};
use crate::decoding::translate;
use crate::error::{Error, Result};
use crate::eval::{bleu, bleu_by_length, duplicate_report, write_heatmaps, LENGTH_THRESHOLDS};
use crate::gradcheck::{check_params, GradCheckReport};
use crate::layers::Mode;
use crate::model::Model;
use crate::train::{train, Corpus, OutputPaths};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "deconvnmt", version, about = "Neural machine translation with a deconvolution-based global context decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Translate a tokenised file with a checkpoint.
    Translate(TranslateArgs),
    /// Score hypotheses against one or more references.
    Eval(EvalArgs),
    /// Verify analytic gradients of a tiny model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic parallel corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Generate this synthetic task into the output directory and train on it.
    #[arg(long)]
    pub synth: Option<SynthKind>,
    /// Train the plain attentional baseline (zero context matrix, no auxiliary losses).
    #[arg(long)]
    pub no_deconv: bool,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub beam: usize,
    /// Output length cap; defaults to twice the source length plus 10.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Write attention heatmaps for every sentence into this directory.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Vocabulary files that must match the checkpoint.
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
    #[arg(long)]
    pub tgt_vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref", required = true, num_args = 1..)]
    pub refs: Vec<PathBuf>,
    /// Source file for length-bucketed BLEU.
    #[arg(long)]
    pub src: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 12)]
    pub vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub target_len: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt the backward rule of an op (negative control).
    #[arg(long, num_args = 0..=1, default_missing_value = "linear")]
    pub break_grad: Option<String>,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        GradcheckArgs {
            dim: 8,
            vocab: 12,
            target_len: 4,
            step: 1e-5,
            tolerance: 1e-3,
            seed: 0,
            break_grad: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 20)]
    pub vocab: usize,
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::CheckpointMismatch(_) => EXIT_CHECKPOINT,
        Error::NonFinite(_) | Error::Contract(_) => EXIT_VERIFY,
        _ => EXIT_INPUT,
    }
}

/// Runs a parsed command, writing results to `out`. Returns the exit status.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Translate(a) => cmd_translate(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn encode_pairs(pairs: &[SentencePair], sv: &Vocabulary, tv: &Vocabulary) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| EncodedPair {
            src: sv.encode(&p.src),
            tgt: tv.encode(&p.tgt),
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let mut config = RunConfig::load(&args.config)?;
    config.apply_env()?;
    if args.no_deconv {
        config.deconv_enabled = false;
    }
    if args.synth.is_some() {
        config.synth_kind = args.synth;
    }
    create_dir(&config.output_dir)?;

    if let Some(kind) = config.synth_kind {
        let dir = config.output_dir.join("synth");
        create_dir(&dir)?;
        let (v, ml) = (config.synth_vocab, config.synth_max_len);
        let train_pairs = data::synth_task(kind, v, config.synth_pairs, ml, config.seed)?;
        let valid_pairs = data::synth_task(kind, v, config.synth_valid_pairs, ml, config.seed.wrapping_add(1_000_003))?;
        let p = |n: &str| dir.join(n);
        data::write_corpus(&train_pairs, p("train.src"), p("train.tgt"))?;
        data::write_corpus(&valid_pairs, p("valid.src"), p("valid.tgt"))?;
        config.train_src = Some(p("train.src"));
        config.train_tgt = Some(p("train.tgt"));
        config.valid_src = Some(p("valid.src"));
        config.valid_tgt = Some(p("valid.tgt"));
    }

    let (Some(ts), Some(tt)) = (&config.train_src, &config.train_tgt) else {
        return Err(Error::Config("data.train_src and data.train_tgt are required (or --synth)".into()));
    };
    let mut train_pairs = data::load_parallel(ts, tt, config.max_len)?;
    let valid = match (&config.valid_src, &config.valid_tgt) {
        (Some(vs), Some(vt)) => data::load_parallel(vs, vt, config.max_len)?,
        (None, None) => {
            // hold out the last tenth of the training data
            let n = (train_pairs.len() / 10).max(1).min(train_pairs.len().saturating_sub(1));
            train_pairs.split_off(train_pairs.len() - n)
        }
        _ => return Err(Error::Config("set both data.valid_src and data.valid_tgt, or neither".into())),
    };
    if train_pairs.is_empty() {
        return Err(Error::Domain("no training pairs survive the length filter".into()));
    }
    let src_lines: Vec<String> = train_pairs.iter().map(|p| p.src.join(" ")).collect();
    let tgt_lines: Vec<String> = train_pairs.iter().map(|p| p.tgt.join(" ")).collect();
    let sv = Vocabulary::build(&src_lines, config.vocab_cap)?;
    let tv = Vocabulary::build(&tgt_lines, config.vocab_cap)?;
    sv.save(config.output_dir.join("src.vocab"))?;
    tv.save(config.output_dir.join("tgt.vocab"))?;
    let used = config.output_dir.join("config.used");
    fs::write(&used, config.to_text()).map_err(|e| Error::io(&used, e))?;

    let encoded = encode_pairs(&train_pairs, &sv, &tv);
    let corpus = Corpus {
        src_vocab: &sv,
        tgt_vocab: &tv,
        train: &encoded,
        valid: &valid,
    };
    let started = Instant::now();
    let outcome = train(&config, &corpus, Some(&OutputPaths::in_dir(&config.output_dir)))?;

    let hyps: Vec<Vec<String>> = valid
        .iter()
        .map(|p| translate(&outcome.model, &sv.encode(&p.src), 1, None, false).map(|h| tv.decode(&h.tokens)))
        .collect::<Result<_>>()?;
    let dups = duplicate_report(&hyps);
    let mut report = format!(
        "valid_bleu={:.4}\nbest_epoch={}\nepochs={}\nsteps={}\nstop={:?}\nseconds={:.1}\n",
        outcome.best_bleu,
        outcome.best_epoch,
        outcome.epochs_run,
        outcome.metrics.len(),
        outcome.stop,
        started.elapsed().as_secs_f64()
    );
    for (n, r) in dups.rates.iter().enumerate() {
        report.push_str(&format!("dup{}={r:.6}\n", n + 1));
    }
    let path = config.output_dir.join("report.txt");
    fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
    emit(out, &report)?;
    Ok(EXIT_OK)
}

pub fn cmd_translate(args: &TranslateArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    if args.beam == 0 {
        return Err(Error::Config("--beam must be at least 1".into()));
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    for (path, vocab, side) in [(&args.src_vocab, &ck.src_vocab, "source"), (&args.tgt_vocab, &ck.tgt_vocab, "target")] {
        if let Some(p) = path {
            if Vocabulary::load(p)? != *vocab {
                return Err(Error::CheckpointMismatch(format!("{side} vocabulary {} differs from the checkpoint", p.display())));
            }
        }
    }
    let model = ck.model()?;
    let lines = data::read_lines(&args.input)?;
    let mut text = String::new();
    for (i, line) in lines.iter().enumerate() {
        let words = data::tokenize(line);
        let hyp = translate(&model, &ck.src_vocab.encode(&words), args.beam, args.max_len, args.trace.is_some())?;
        let output = ck.tgt_vocab.decode(&hyp.tokens);
        if let Some(dir) = &args.trace {
            if !words.is_empty() {
                let mut rows = output.clone();
                if hyp.ended {
                    rows.push(RESERVED[data::EOS].to_string());
                }
                write_heatmaps(dir, i, &words, &rows, &hyp.trace)?;
            }
        }
        text.push_str(&output.join(" "));
        text.push('\n');
    }
    emit(out, &text)?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let hyps: Vec<Vec<String>> = data::read_lines(&args.hyp)?.iter().map(|l| data::tokenize(l)).collect();
    let mut refs: Vec<Vec<Vec<String>>> = vec![Vec::new(); hyps.len()];
    for path in &args.refs {
        let lines = data::read_lines(path)?;
        if lines.len() != hyps.len() {
            return Err(Error::Format(format!(
                "{} has {} lines, {} has {}",
                path.display(),
                lines.len(),
                args.hyp.display(),
                hyps.len()
            )));
        }
        for (r, l) in refs.iter_mut().zip(&lines) {
            r.push(data::tokenize(l));
        }
    }
    let b = bleu(&hyps, &refs)?;
    let mut report = format!("bleu={:.4}\nbp={:.6}\n", b.bleu, b.brevity_penalty);
    for (n, p) in b.precisions.iter().enumerate() {
        report.push_str(&format!("p{}={p:.6}\n", n + 1));
    }
    report.push_str(&format!("hyp_len={}\nref_len={}\n", b.hyp_len, b.ref_len));
    for (n, r) in duplicate_report(&hyps).rates.iter().enumerate() {
        report.push_str(&format!("dup{}={r:.6}\n", n + 1));
    }
    if let Some(src) = &args.src {
        let lengths: Vec<usize> = data::read_lines(src)?.iter().map(|l| data::tokenize(l).len()).collect();
        for (t, r) in bleu_by_length(&hyps, &refs, &lengths, &LENGTH_THRESHOLDS)? {
            match r {
                Some(r) => report.push_str(&format!("bleu_len_ge_{t}={:.4}\n", r.bleu)),
                None => report.push_str(&format!("bleu_len_ge_{t}=absent\n")),
            }
        }
    }
    emit(out, &report)?;
    Ok(EXIT_OK)
}

/// Per-group gradient check of a tiny model against its full training loss.
pub fn gradcheck_tiny(args: &GradcheckArgs) -> Result<Vec<(String, GradCheckReport)>> {
    let mut config = RunConfig::default();
    config.emb_dim = args.dim;
    config.hidden = args.dim;
    config.target_len = args.target_len;
    config.validate()?;
    let model = Model::new(config.model_config(args.vocab, args.vocab), args.seed)?;
    if args.vocab <= RESERVED.len() {
        return Err(Error::Config("--vocab must exceed the 4 reserved tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut sentence = |max: usize| -> Vec<usize> {
        let len = rng.gen_range(1..=max);
        (0..len).map(|_| rng.gen_range(RESERVED.len()..args.vocab)).collect()
    };
    let pairs: Vec<EncodedPair> = (0..3)
        .map(|_| EncodedPair {
            src: sentence(5),
            tgt: sentence(args.target_len + 1),
        })
        .collect();
    let batch = ParallelBatch::from_pairs(&pairs.iter().collect::<Vec<_>>());
    let frozen = model.store.value(model.tgt_embed().id).clone();
    let broken = args.break_grad.clone();
    check_params(
        &model.store,
        |tape, bound| {
            if let Some(op) = &broken {
                tape.break_rule(op)?;
            }
            let (loss, _) = model.loss(tape, bound, &batch, &mut Mode::Eval, Some(&frozen))?;
            Ok(loss)
        },
        args.step,
        args.tolerance,
    )
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let started = Instant::now();
    let reports = gradcheck_tiny(args)?;
    let mut text = String::from("group\tchecked\tmax_rel_err\tstatus\n");
    for (g, r) in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        text.push_str(&format!("{g}\t{}\t{:.3e}\t{status}\n", r.checked, r.max_rel_err));
    }
    let passed = reports.iter().all(|(_, r)| r.passed());
    text.push_str(&format!("seconds\t{:.2}\n", started.elapsed().as_secs_f64()));
    if !passed {
        let op = args.break_grad.as_deref().unwrap_or("unknown");
        text.push_str(&format!("gradient check failed; corrupted backward rule: {op}\n"));
    }
    emit(out, &text)?;
    Ok(if passed { EXIT_OK } else { EXIT_VERIFY })
}

pub fn cmd_synth(args: &SynthArgs) -> Result<i32> {
    let pairs = data::synth_task(args.kind, args.vocab, args.pairs, args.max_len, args.seed)?;
    data::write_corpus(&pairs, &args.src, &args.tgt)?;
    Ok(EXIT_OK)
}
