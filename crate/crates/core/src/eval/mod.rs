//! Corpus BLEU, duplicate n-gram proportions, length-bucketed BLEU and
//! attention heatmap export.

mod attention;
mod bleu;
mod duplicates;

pub use attention::{read_heatmap, write_heatmaps, Heatmap};
pub use bleu::{bleu, bleu_by_length, BleuReport, LENGTH_THRESHOLDS, MAX_ORDER};
pub use duplicates::{duplicate_rate, duplicate_report, DuplicateReport};
