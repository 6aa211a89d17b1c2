//! Loss terms: masked sequence cross-entropy, hard pseudo-labels, cross
//! pseudo-supervision, supervised loss, smooth-L1 counting loss and the
//! weighted total.
//!
//! The plain functions work on probability tables (`[batch][position][class]`)
//! and serve as references; the `*_graph` variants build the same quantities
//! on a tape for training.

use hmer_tensor::{Graph, Tensor, Var};

use crate::decoder::argmax;
use crate::error::{Error, Result};

/// `[batch][position][class]` probabilities.
pub type Distributions = [Vec<Vec<f64>>];

const ROW_TOLERANCE: f64 = 1e-4;

fn check_rows(dists: &Distributions) -> Result<()> {
    for (b, seq) in dists.iter().enumerate() {
        for (t, row) in seq.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_TOLERANCE || row.iter().any(|p| !(0.0..=1.0 + ROW_TOLERANCE).contains(p)) {
                return Err(Error::InvalidInput(format!("distribution at sample {b}, position {t} sums to {s}")));
            }
        }
    }
    Ok(())
}

/// Mean of `−ln p(target)` over valid positions of each sample, then mean
/// over samples with at least one valid position.
pub fn seq_cross_entropy(dists: &Distributions, targets: &[Vec<usize>], mask: &[Vec<f64>]) -> Result<f64> {
    check_rows(dists)?;
    if dists.len() != targets.len() || dists.len() != mask.len() {
        return Err(Error::InvalidInput("batch size mismatch".into()));
    }
    let mut total = 0.0;
    let mut samples = 0usize;
    for ((seq, tgt), m) in dists.iter().zip(targets).zip(mask) {
        if seq.len() != tgt.len() || seq.len() != m.len() {
            return Err(Error::InvalidInput("sequence length mismatch".into()));
        }
        let valid: f64 = m.iter().sum();
        if valid == 0.0 {
            continue;
        }
        let nll: f64 = seq.iter().zip(tgt).zip(m).filter(|(_, &w)| w != 0.0).map(|((row, &y), &w)| -w * row[y].ln()).sum();
        total += nll / valid;
        samples += 1;
    }
    Ok(if samples == 0 { 0.0 } else { total / samples as f64 })
}

/// Per-position argmax (lowest id on ties). Plain integers: no gradient
/// path back to the source.
pub fn make_pseudo_labels(dists: &Distributions) -> Vec<Vec<usize>> {
    dists.iter().map(|seq| seq.iter().map(|row| argmax(row)).collect()).collect()
}

/// Cross-entropy of the strong branch against the weak branch's hard labels.
pub fn cross_pseudo_loss(strong: &Distributions, weak: &Distributions, mask: &[Vec<f64>]) -> Result<f64> {
    let shape = |d: &Distributions| d.iter().map(Vec::len).collect::<Vec<_>>();
    if shape(strong) != shape(weak) {
        return Err(Error::InvalidInput("strong and weak predictions are not aligned".into()));
    }
    seq_cross_entropy(strong, &make_pseudo_labels(weak), mask)
}

pub fn supervised_loss(
    weak: &Distributions,
    strong: &Distributions,
    targets: &[Vec<usize>],
    mask: &[Vec<f64>],
) -> Result<f64> {
    Ok(seq_cross_entropy(weak, targets, mask)? + seq_cross_entropy(strong, targets, mask)?)
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Class-mean smooth-L1 error of each branch's counts, summed over branches.
pub fn counting_loss(v1: &[f64], v2: &[f64], gt: &[f64]) -> f64 {
    let term = |v: &[f64]| v.iter().zip(gt).map(|(a, b)| smooth_l1(a - b)).sum::<f64>() / gt.len() as f64;
    term(v1) + term(v2)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub sup: f64,
    pub cross_labeled: f64,
    pub cross_unlabeled: f64,
    pub counting: f64,
    pub total: f64,
}

/// `sup + λ·cross_labeled + λ·cross_unlabeled + counting`.
pub fn total_loss(sup: f64, cross_labeled: f64, cross_unlabeled: f64, counting: f64, lambda: f64) -> Result<LossBreakdown> {
    for (part, value) in
        [("sup", sup), ("cross_l", cross_labeled), ("cross_u", cross_unlabeled), ("counting", counting), ("lambda", lambda)]
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { part, value });
        }
    }
    let total = sup + lambda * cross_labeled + lambda * cross_unlabeled + counting;
    Ok(LossBreakdown { sup, cross_labeled, cross_unlabeled, counting, total })
}

/// Tape version of [`seq_cross_entropy`] over per-step logits `[batch, classes]`.
pub fn seq_cross_entropy_graph(g: &mut Graph, step_logits: &[Var], targets: &[Vec<usize>], mask: &[Vec<f64>]) -> Var {
    let b = targets.len();
    let lengths: Vec<f64> = mask.iter().map(|m| m.iter().sum()).collect();
    let active = lengths.iter().filter(|&&l| l > 0.0).count().max(1) as f64;
    let mut terms = Vec::with_capacity(step_logits.len());
    for (t, &logits) in step_logits.iter().enumerate() {
        let ids: Vec<usize> = (0..b).map(|i| targets[i].get(t).copied().unwrap_or(0)).collect();
        let weights: Vec<f64> = (0..b)
            .map(|i| {
                let w = mask[i].get(t).copied().unwrap_or(0.0);
                if w == 0.0 {
                    0.0
                } else {
                    w / (lengths[i] * active)
                }
            })
            .collect();
        if weights.iter().all(|&w| w == 0.0) {
            continue;
        }
        let lp = g.log_softmax(logits);
        terms.push(g.nll_pick(lp, &ids, &weights));
    }
    if terms.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        g.add_n(&terms)
    }
}

/// Hard labels from the current values of per-step logits; `[batch][step]`.
pub fn pseudo_labels_from_logits(g: &Graph, step_logits: &[Var]) -> Vec<Vec<usize>> {
    let b = step_logits.first().map_or(0, |&v| g.shape(v)[0]);
    (0..b).map(|i| step_logits.iter().map(|&v| argmax(g.value(v).row(i))).collect()).collect()
}

/// Tape version of one branch's counting term, averaged over the batch.
pub fn counting_loss_graph(g: &mut Graph, counts: Var, gt: &Tensor) -> Var {
    let (b, c) = gt.rows_cols();
    g.smooth_l1(counts, gt, 1.0 / (b * c) as f64)
}
