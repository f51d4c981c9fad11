use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Source-length thresholds of the bucketed report.
pub const LENGTH_THRESHOLDS: [usize; 6] = [10, 20, 30, 40, 50, 60];

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    /// Clipped precision per order 1..=4.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Reference length closest to `hyp_len`; the shorter one wins ties.
fn closest_ref_len<S>(refs: &[Vec<S>], hyp_len: usize) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

/// Corpus-level BLEU-4 without smoothing: clipped n-gram counts against every
/// reference of a hypothesis, brevity penalty from the closest reference length.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[Vec<H>], refs: &[Vec<Vec<R>>]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Format(format!("{} hypotheses but {} reference sets", hyps.len(), refs.len())));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (hyp, rs) in hyps.iter().zip(refs) {
        if rs.is_empty() {
            return Err(Error::Format("hypothesis without a reference".into()));
        }
        hyp_len += hyp.len();
        ref_len += closest_ref_len(rs, hyp.len());
        for n in 1..=MAX_ORDER {
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in rs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngram_counts(hyp, n) {
                matches[n - 1] += c.min(max_ref.get(&g).copied().unwrap_or(0));
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    Ok(score(matches, totals, hyp_len, ref_len))
}

fn score(matches: [usize; MAX_ORDER], totals: [usize; MAX_ORDER], hyp_len: usize, ref_len: usize) -> BleuReport {
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    }
}

/// BLEU restricted to pairs whose source has at least `threshold` tokens, per
/// threshold. Thresholds selecting nothing map to `None`.
pub fn bleu_by_length<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[Vec<H>],
    refs: &[Vec<Vec<R>>],
    src_lengths: &[usize],
    thresholds: &[usize],
) -> Result<Vec<(usize, Option<BleuReport>)>> {
    if src_lengths.len() != hyps.len() {
        return Err(Error::Format(format!("{} hypotheses but {} source lengths", hyps.len(), src_lengths.len())));
    }
    thresholds
        .iter()
        .map(|&t| {
            let keep: Vec<usize> = (0..hyps.len()).filter(|&i| src_lengths[i] >= t).collect();
            if keep.is_empty() {
                return Ok((t, None));
            }
            let h: Vec<Vec<&str>> = keep.iter().map(|&i| hyps[i].iter().map(AsRef::as_ref).collect()).collect();
            let r: Vec<Vec<Vec<&str>>> = keep
                .iter()
                .map(|&i| refs[i].iter().map(|s| s.iter().map(AsRef::as_ref).collect()).collect())
                .collect();
            Ok((t, Some(bleu(&h, &r)?)))
        })
        .collect()
}
