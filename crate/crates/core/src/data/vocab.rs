use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

/// Spellings of the reserved ids, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token list with a reverse index; ids 0..4 are always the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Keeps the `cap` most frequent whitespace tokens; ties go to the earlier first occurrence.
    pub fn build<S: AsRef<str>>(lines: &[S], cap: usize) -> Result<Self> {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut seen = 0;
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                if RESERVED.contains(&tok) {
                    continue;
                }
                let entry = counts.entry(tok).or_insert_with(|| {
                    seen += 1;
                    (0, seen)
                });
                entry.0 += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Domain("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        Self::from_tokens(ranked.into_iter().take(cap).map(|(t, _)| t.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line; line `k` holds id `k + 4`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    /// Rebuilds a vocabulary from its non-reserved tokens in id order.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        Self::from_tokens(words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_cap() {
        let v = Vocabulary::build(&["a a b"], 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn tie_goes_to_first_occurrence() {
        let v = Vocabulary::build(&["x y x y"], 1).unwrap();
        assert_eq!(v.id("x"), 4);
        assert_eq!(v.id("y"), UNK);
    }

    #[test]
    fn no_unk_when_cap_is_large() {
        let lines = ["c b a", "a d"];
        let v = Vocabulary::build(&lines, 100).unwrap();
        for l in lines {
            assert!(v.encode(&tokens(l)).iter().all(|&i| i != UNK));
        }
        assert_eq!(v.len(), 8);
    }

    fn tokens(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocabulary::build(&["", "  "], 10), Err(Error::Domain(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(&["z y y x"], 10).unwrap();
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "y\nz\nx\n");
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn encode_decode_round_trip(words in proptest::collection::vec("[a-e]{1,3}", 1..30), cap in 1usize..20) {
                let line = words.join(" ");
                let v = Vocabulary::build(&[line.as_str()], cap).unwrap();
                prop_assert!(v.len() <= cap + RESERVED.len());
                let known: Vec<&String> = words.iter().filter(|w| v.id(w) != UNK).collect();
                let ids = v.encode(&known);
                let back = v.decode(&ids);
                prop_assert_eq!(back.iter().collect::<Vec<_>>(), known);
                for (i, t) in v.tokens().iter().enumerate() {
                    prop_assert_eq!(v.id(t), i);
                }
            }
        }
    }
}
