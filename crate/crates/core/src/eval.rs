//! Expression-level recognition metrics.

use std::fmt;

use crate::data::{collate, Sample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Model;

/// Levenshtein distance over token ids.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Drops a trailing `eos`, if any.
pub fn strip_eos(seq: &[usize], eos: usize) -> &[usize] {
    match seq.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => seq,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub index: usize,
    pub prediction: Vec<usize>,
    pub target: Vec<usize>,
    pub distance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Fraction of exact matches.
    pub exprate: f64,
    /// Fraction within one token edit.
    pub leq1: f64,
    pub leq2: f64,
    pub per_sample: Vec<SampleResult>,
}

impl EvalReport {
    /// Scores predictions against targets; both exclude `eos`.
    pub fn from_pairs(pairs: Vec<(Vec<usize>, Vec<usize>)>) -> Self {
        let per_sample: Vec<SampleResult> = pairs
            .into_iter()
            .enumerate()
            .map(|(index, (prediction, target))| {
                let distance = edit_distance(&prediction, &target);
                SampleResult { index, prediction, target, distance }
            })
            .collect();
        let n = per_sample.len().max(1) as f64;
        let rate = |k: usize| per_sample.iter().filter(|r| r.distance <= k).count() as f64 / n;
        EvalReport { exprate: rate(0), leq1: rate(1), leq2: rate(2), per_sample }
    }

    pub fn len(&self) -> usize {
        self.per_sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }

    /// One `prediction TAB reference TAB distance` line per sample.
    pub fn per_sample_dump(&self, vocab: &Vocabulary) -> String {
        self.per_sample
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", vocab.decode(&r.prediction), vocab.decode(&r.target), r.distance))
            .collect()
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::from("metric   value\n");
        for (name, v) in [("ExpRate", self.exprate), ("<=1", self.leq1), ("<=2", self.leq2)] {
            out.push_str(&format!("{name:<8} {:>6.2}%\n", 100.0 * v));
        }
        out.push_str(&format!("{:<8} {:>7}\n", "samples", self.len()));
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exprate={:.4} leq1={:.4} leq2={:.4} n={}", self.exprate, self.leq1, self.leq2, self.len())
    }
}

/// Greedy decoding with decoder `branch` (0 or 1) over labeled samples,
/// `batch_size` at a time in corpus order.
pub fn evaluate(model: &Model, samples: &[Sample], branch: usize, max_len: usize, batch_size: usize) -> Result<EvalReport> {
    if branch > 1 {
        return Err(Error::InvalidInput(format!("branch {branch} out of range")));
    }
    if let Some(i) = samples.iter().position(|s| !s.is_labeled()) {
        return Err(Error::InvalidInput(format!("evaluation sample {i} has no label")));
    }
    let eos = model.vocab.eos();
    let mut pairs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = collate(&refs, &model.vocab)?;
        let preds = model.predict_batch(&batch, branch, max_len)?;
        for (p, s) in preds.iter().zip(chunk) {
            pairs.push((strip_eos(p, eos).to_vec(), s.content().to_vec()));
        }
    }
    Ok(EvalReport::from_pairs(pairs))
}
