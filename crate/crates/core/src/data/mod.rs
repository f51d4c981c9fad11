//! Corpus ingestion, vocabularies, batching and synthetic task generators.

mod batch;
mod corpus;
mod synth;
mod vocab;

pub use batch::{make_batches, EncodedPair, ParallelBatch};
pub use corpus::{load_parallel, read_lines, tokenize, write_lines, SentencePair};
pub use synth::{synth_task, write_corpus, SynthKind};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
