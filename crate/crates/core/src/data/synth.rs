use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{write_lines, SentencePair};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Copy,
    Reverse,
    /// Clause grammar with an SOV rewrite and noun reduplication; see the README for the mapping.
    ToyGrammar,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SynthKind::Copy),
            "reverse" => Ok(SynthKind::Reverse),
            "toy-grammar" => Ok(SynthKind::ToyGrammar),
            _ => Err(Error::Config(format!("unknown synthetic task {s:?} (copy, reverse, toy-grammar)"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Copy => "copy",
            SynthKind::Reverse => "reverse",
            SynthKind::ToyGrammar => "toy-grammar",
        })
    }
}

/// Generates `n_pairs` sentence pairs with at most `max_len` tokens per side.
///
/// For copy and reverse, `vocab_size` is the number of distinct tokens. For the
/// toy grammar it counts the source word types, two of which are `many` and `and`.
pub fn synth_task(kind: SynthKind, vocab_size: usize, n_pairs: usize, max_len: usize, seed: u64) -> Result<Vec<SentencePair>> {
    if vocab_size < 5 {
        return Err(Error::Config(format!("synthetic vocab size {vocab_size} is below 5")));
    }
    let min_len = if kind == SynthKind::ToyGrammar { 3 } else { 1 };
    if max_len < min_len {
        return Err(Error::Config(format!("{kind} needs max_len >= {min_len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n_pairs)
        .map(|_| match kind {
            SynthKind::Copy | SynthKind::Reverse => {
                let len = rng.gen_range(1..=max_len);
                let src: Vec<String> = (0..len).map(|_| format!("t{}", rng.gen_range(0..vocab_size))).collect();
                let mut tgt = src.clone();
                if kind == SynthKind::Reverse {
                    tgt.reverse();
                }
                SentencePair { src, tgt }
            }
            SynthKind::ToyGrammar => {
                let src = grammar_sentence(&mut rng, vocab_size - 2, max_len);
                let tgt = rewrite(&src);
                SentencePair { src, tgt }
            }
        })
        .collect();
    Ok(pairs)
}

pub fn write_corpus(pairs: &[SentencePair], src: impl AsRef<Path>, tgt: impl AsRef<Path>) -> Result<()> {
    write_lines(src, &pairs.iter().map(|p| p.src.join(" ")).collect::<Vec<_>>())?;
    write_lines(tgt, &pairs.iter().map(|p| p.tgt.join(" ")).collect::<Vec<_>>())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Noun,
    Verb,
    Adj,
}

fn class_of(i: usize) -> Class {
    match i % 3 {
        0 => Class::Noun,
        1 => Class::Verb,
        _ => Class::Adj,
    }
}

fn pick(rng: &mut ChaCha8Rng, content: usize, class: Class) -> String {
    let members: Vec<usize> = (0..content).filter(|&i| class_of(i) == class).collect();
    format!("s{}", members[rng.gen_range(0..members.len())])
}

fn noun_phrase(rng: &mut ChaCha8Rng, content: usize, budget: usize) -> Vec<String> {
    let mut np = Vec::with_capacity(3);
    if budget >= 2 && rng.gen_bool(0.3) {
        np.push("many".to_string());
    }
    if budget > np.len() + 1 && rng.gen_bool(0.4) {
        np.push(pick(rng, content, Class::Adj));
    }
    np.push(pick(rng, content, Class::Noun));
    np
}

// S -> Clause ("and" Clause)*, Clause -> NP Verb NP, NP -> ["many"] [Adj] Noun
fn grammar_sentence(rng: &mut ChaCha8Rng, content: usize, max_len: usize) -> Vec<String> {
    let mut out = Vec::new();
    loop {
        let room = max_len - out.len();
        // subject gets what is left after the verb and a bare object
        let subj = noun_phrase(rng, content, room - 2);
        let verb = pick(rng, content, Class::Verb);
        let obj = noun_phrase(rng, content, room - 1 - subj.len());
        out.extend(subj);
        out.push(verb);
        out.extend(obj);
        if max_len - out.len() < 4 || !rng.gen_bool(0.35) {
            return out;
        }
        out.push("and".to_string());
    }
}

/// Subject-object-verb order; `many` is dropped and its noun doubled; `sK`
/// becomes `nK`, `vK` or `aK` by class.
fn rewrite(src: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(src.len() + 2);
    for clause in src.split(|w| w == "and") {
        if !out.is_empty() {
            out.push("and".to_string());
        }
        let verb_at = clause
            .iter()
            .position(|w| w.strip_prefix('s').and_then(|k| k.parse().ok()).map(class_of) == Some(Class::Verb))
            .expect("clause has a verb");
        out.extend(rewrite_np(&clause[..verb_at]));
        out.extend(rewrite_np(&clause[verb_at + 1..]));
        out.push(map_word(&clause[verb_at]));
    }
    out
}

fn rewrite_np(np: &[String]) -> Vec<String> {
    let plural = np.first().is_some_and(|w| w == "many");
    let words = if plural { &np[1..] } else { np };
    let mut out: Vec<String> = words.iter().map(|w| map_word(w)).collect();
    if plural {
        out.push(out.last().expect("noun phrase has a noun").clone());
    }
    out
}

fn map_word(w: &str) -> String {
    let k: usize = w[1..].parse().expect("content token");
    let prefix = match class_of(k) {
        Class::Noun => 'n',
        Class::Verb => 'v',
        Class::Adj => 'a',
    };
    format!("{prefix}{k}")
}
