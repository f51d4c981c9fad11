//! The three-term training loss: decoder NLL, regression of the generated
//! target-context matrix onto reference embeddings, and the cosine-softmax
//! cross-entropy of the deconvolution decoder.

use crate::autodiff::{Regression, Tape, Var};
use crate::data::{EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor inside the log of the deconvolution cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

/// Loss components of one batch. Each term is a mean, combined with unit weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    pub smooth_l1: f64,
    pub deconv_ce: f64,
    pub total: f64,
    /// Target tokens scored by the NLL, EOS included.
    pub token_count: usize,
}

/// Mean of `-log softmax(logits)[ref]` over rows where `mask` is set.
///
/// `logits` is `[N x V]`; `refs` and `mask` have `N` entries.
pub fn nll_loss(tape: &mut Tape, logits: Var, refs: &[usize], mask: &[bool]) -> Result<Var> {
    let rows = tape.value(logits).rows();
    if refs.len() != rows || mask.len() != rows {
        return Err(Error::dim("nll_loss", tape.shape(logits), &[refs.len(), mask.len()]));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Domain("nll over an empty mask".into()));
    }
    let w = -1.0 / count as f64;
    let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
    let logp = tape.log_softmax(logits);
    tape.gather(logp, refs, &weights)
}

/// Elementwise regression of `e` onto the constant `reference`, averaged over elements.
pub fn smooth_l1(tape: &mut Tape, e: Var, reference: &Tensor) -> Result<Var> {
    regression_loss(tape, e, reference, Regression::SmoothL1)
}

pub fn regression_loss(tape: &mut Tape, e: Var, reference: &Tensor, kind: Regression) -> Result<Var> {
    tape.regression(e, reference, kind)
}

/// The reference sequence of length `t`: `y`, then EOS, then PAD, truncated to `t`.
pub fn deconv_targets(reference: &[usize], t: usize) -> Vec<usize> {
    reference
        .iter()
        .copied()
        .chain(std::iter::once(EOS))
        .chain(std::iter::repeat(PAD))
        .take(t)
        .collect()
}

/// Reference matrix `[B x T x dim]` built from rows of the embedding `table`
/// (`[V x dim]`) at [`deconv_targets`]. It is a plain tensor, so no gradient
/// flows back into the table through it.
pub fn target_matrix_reference(table: &Tensor, references: &[&[usize]], t: usize) -> Result<Tensor> {
    let dim = table.cols();
    let mut data = Vec::with_capacity(references.len() * t * dim);
    for r in references {
        for id in deconv_targets(r, t) {
            if id >= table.rows() {
                return Err(Error::Index { id, size: table.rows() });
            }
            data.extend_from_slice(table.row(id));
        }
    }
    Tensor::new(&[references.len(), t, dim], data)
}

/// Mean over all rows of `-log(pred[row][ref] + LOG_EPS)`; `pred` is `[N x V]` of
/// probabilities and `refs` has `N` entries.
pub fn deconv_ce(tape: &mut Tape, pred: Var, refs: &[usize]) -> Result<Var> {
    let rows = tape.value(pred).rows();
    if refs.len() != rows {
        return Err(Error::dim("deconv_ce", tape.shape(pred), &[refs.len()]));
    }
    let logp = tape.log_eps(pred, LOG_EPS);
    tape.gather(logp, refs, &vec![-1.0 / rows as f64; rows])
}

/// Sums the available terms into the training objective.
pub fn total_loss(
    tape: &mut Tape,
    nll: Var,
    regression: Option<Var>,
    ce: Option<Var>,
    token_count: usize,
) -> Result<(Var, LossBreakdown)> {
    let terms: Vec<Var> = std::iter::once(nll).chain(regression).chain(ce).collect();
    let total = tape.sum_scalars(&terms)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
    let breakdown = LossBreakdown {
        nll: value(Some(nll)),
        smooth_l1: value(regression),
        deconv_ce: value(ce),
        total: value(Some(total)),
        token_count,
    };
    Ok((total, breakdown))
}
