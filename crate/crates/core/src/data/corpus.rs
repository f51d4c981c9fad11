use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

/// A whitespace-tokenised source/target sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines<S: AsRef<str>>(path: impl AsRef<Path>, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
}

/// Reads line-aligned parallel files, dropping pairs with an empty side or with
/// more than `max_len` tokens on either side.
pub fn load_parallel(src: impl AsRef<Path>, tgt: impl AsRef<Path>, max_len: usize) -> Result<Vec<SentencePair>> {
    let src_lines = read_lines(&src)?;
    let tgt_lines = read_lines(&tgt)?;
    if src_lines.len() != tgt_lines.len() {
        let line = src_lines.len().min(tgt_lines.len()) + 1;
        return Err(Error::Format(format!(
            "{} has {} lines but {} has {}; line {line} has no counterpart",
            src.as_ref().display(),
            src_lines.len(),
            tgt.as_ref().display(),
            tgt_lines.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    let mut too_long = 0;
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let (s, t) = (tokenize(s), tokenize(t));
        if s.is_empty() || t.is_empty() {
            warn!("line {}: empty sentence, pair dropped", i + 1);
            continue;
        }
        if s.len() > max_len || t.len() > max_len {
            too_long += 1;
            continue;
        }
        pairs.push(SentencePair { src: s, tgt: t });
    }
    if too_long > 0 {
        warn!("{too_long} pairs longer than {max_len} tokens filtered");
    }
    Ok(pairs)
}
