//! Dual-branch training: supervised warmup, then weak-to-strong cross
//! pseudo-supervision with per-epoch role alternation.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use hmer_tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;

use crate::augment::{assign_branch_policies, augment, AugmentationPolicy, BranchAssignment, PolicyKind};
use crate::checkpoint::Checkpoint;
use crate::config::{BranchPolicy, TrainConfig};
use crate::data::{check_label, collate, counting_ground_truth, Batch, Image, Sample, Vocabulary};
use crate::error::{io_err, Error, Result};
use crate::losses::{counting_loss_graph, pseudo_labels_from_logits, seq_cross_entropy_graph, total_loss, LossBreakdown};
use crate::model::Model;
use crate::optim::Adadelta;
use crate::schedule::{lr_at, PhaseSchedule};
use crate::seed::{self, tag};

/// Images as seen by each branch (index 0 → decoder 1).
#[derive(Clone, Debug)]
pub struct ViewBatches {
    pub labeled: [Batch; 2],
    pub unlabeled: Option<[Batch; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    /// Whether the cross pseudo-supervision terms are active.
    pub cross: bool,
    pub lambda: f64,
    pub max_len: usize,
    /// Branch whose predictions become pseudo-labels.
    pub weak_branch: usize,
}

/// Tape handles of the loss terms plus their values.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub sup: Var,
    pub cross_labeled: Option<Var>,
    pub cross_unlabeled: Option<Var>,
    pub counting: Var,
    pub breakdown: LossBreakdown,
}

/// Count targets `[b, classes]` for a labeled batch.
pub fn count_targets(batch: &Batch, vocab: &Vocabulary) -> Result<Tensor> {
    let c = vocab.len();
    let mut data = Vec::with_capacity(batch.len() * c);
    for (label, mask) in batch.labels.iter().zip(&batch.label_mask) {
        let real: Vec<usize> = label.iter().zip(mask).filter(|(_, m)| **m > 0.5).map(|(id, _)| *id).collect();
        data.extend(counting_ground_truth(&real, vocab)?.into_vec());
    }
    Ok(Tensor::new(&[batch.len(), c], data))
}

/// Pads decoded sequences into `(targets, mask)`.
fn pad_sequences(seqs: &[Vec<usize>], pad: usize) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let targets = seqs.iter().map(|s| (0..len).map(|t| s.get(t).copied().unwrap_or(pad)).collect()).collect();
    let mask = seqs.iter().map(|s| (0..len).map(|t| if t < s.len() { 1.0 } else { 0.0 }).collect()).collect();
    (targets, mask)
}

/// Builds the full objective for one iteration on `g`.
///
/// Labeled data: both branches are teacher-forced on the ground truth; the
/// weak branch's argmax is the target for the strong branch. Unlabeled data:
/// the weak branch decodes greedily on a separate tape and the strong branch
/// is teacher-forced on that sequence. Pseudo-labels are plain integers, so
/// no gradient reaches the weak branch through the cross terms.
pub fn build_loss(model: &Model, g: &mut Graph, views: &ViewBatches, opts: &LossOptions) -> Result<LossTerms> {
    let (w, s) = (opts.weak_branch, 1 - opts.weak_branch);
    let lab = &views.labeled;
    let labels = &lab[0].labels;
    let label_mask = &lab[0].label_mask;

    let fm0 = model.encode(g, &lab[0].images, &lab[0].image_mask)?;
    let shared = lab[0].images == lab[1].images && lab[0].image_mask == lab[1].image_mask;
    let fm1 = if shared { fm0.clone() } else { model.encode(g, &lab[1].images, &lab[1].image_mask)? };
    let fms = [fm0, fm1];
    let outs = [0, 1].map(|b| model.teacher_forced(g, &fms[b], b, labels));

    let sup_terms: Vec<Var> =
        outs.iter().map(|o| seq_cross_entropy_graph(g, &o.refined_logits(), labels, label_mask)).collect();
    let sup = g.add_n(&sup_terms);

    let gt = count_targets(&lab[0], &model.vocab)?;
    let count_terms: Vec<Var> = outs.iter().map(|o| counting_loss_graph(g, o.counts, &gt)).collect();
    let counting = g.add_n(&count_terms);

    let mut cross_labeled = None;
    let mut cross_unlabeled = None;
    if opts.cross {
        let pseudo = pseudo_labels_from_logits(g, &outs[w].refined_logits());
        cross_labeled = Some(seq_cross_entropy_graph(g, &outs[s].refined_logits(), &pseudo, label_mask));
        if let Some(unl) = &views.unlabeled {
            let seqs = model.predict_batch(&unl[w], w, opts.max_len)?;
            let (targets, mask) = pad_sequences(&seqs, model.vocab.pad());
            let fm = model.encode(g, &unl[s].images, &unl[s].image_mask)?;
            let out = model.teacher_forced(g, &fm, s, &targets);
            cross_unlabeled = Some(seq_cross_entropy_graph(g, &out.refined_logits(), &targets, &mask));
        }
    }

    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let breakdown = total_loss(
        g.value(sup).item(),
        value(g, cross_labeled),
        value(g, cross_unlabeled),
        g.value(counting).item(),
        opts.lambda,
    )?;
    let mut parts = vec![sup, counting];
    for c in [cross_labeled, cross_unlabeled].into_iter().flatten() {
        parts.push(g.scale(c, opts.lambda));
    }
    let total = g.add_n(&parts);
    Ok(LossTerms { total, sup, cross_labeled, cross_unlabeled, counting, breakdown })
}

/// One logged iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iter: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub decoder1: PolicyKind,
    pub decoder2: PolicyKind,
}

impl fmt::Display for IterationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(
            f,
            "epoch={} iter={} step={} lr={} sup={} cross_l={} cross_u={} counting={} total={} d1={} d2={}",
            self.epoch,
            self.iter,
            self.step,
            self.lr,
            l.sup,
            l.cross_labeled,
            l.cross_unlabeled,
            l.counting,
            l.total,
            self.decoder1.name(),
            self.decoder2.name()
        )
    }
}

impl IterationRecord {
    /// Parses a line written by `Display`.
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let mut fields = std::collections::HashMap::new();
        for pair in line.split_whitespace() {
            let (k, v) = pair.split_once('=').ok_or_else(|| format!("field {pair:?} is not name=value"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("missing field {k}"));
        let num = |k: &str| -> std::result::Result<f64, String> {
            get(k)?.parse::<f64>().map_err(|_| format!("field {k} is not a number"))
        };
        let int = |k: &str| -> std::result::Result<usize, String> {
            get(k)?.parse::<usize>().map_err(|_| format!("field {k} is not an integer"))
        };
        let kind = |k: &str| match get(k)? {
            "weak" => Ok(PolicyKind::Weak),
            "strong" => Ok(PolicyKind::Strong),
            other => Err(format!("field {k} has unknown policy {other:?}")),
        };
        Ok(IterationRecord {
            epoch: int("epoch")?,
            iter: int("iter")?,
            step: int("step")?,
            lr: num("lr")?,
            loss: LossBreakdown {
                sup: num("sup")?,
                cross_labeled: num("cross_l")?,
                cross_unlabeled: num("cross_u")?,
                counting: num("counting")?,
                total: num("total")?,
            },
            decoder1: kind("d1")?,
            decoder2: kind("d2")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adadelta,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimisation steps taken so far.
    pub step: usize,
    labeled: Vec<Sample>,
    unlabeled: Vec<Sample>,
}

fn check_corpus(samples: &[Sample], vocab: &Vocabulary, what: &str) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.is_labeled() {
            check_label(&s.label, vocab).map_err(|e| Error::InvalidInput(format!("{what} sample {i}: {e}")))?;
        }
    }
    Ok(())
}

impl Trainer {
    /// Fresh model. Labels are checked against `vocab` before anything else.
    pub fn new(config: TrainConfig, vocab: &Vocabulary, labeled: Vec<Sample>, unlabeled: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, vocab, config.seed);
        Self::with_model(config, model, labeled, unlabeled)
    }

    fn with_model(config: TrainConfig, model: Model, labeled: Vec<Sample>, unlabeled: Vec<Sample>) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::InvalidInput("labeled corpus is empty".into()));
        }
        if labeled.iter().any(|s| !s.is_labeled()) {
            return Err(Error::InvalidInput("labeled corpus contains unlabeled samples".into()));
        }
        check_corpus(&labeled, &model.vocab, "labeled")?;
        let f = config.model.encoder.downsample_factor();
        if let Some(s) = labeled.iter().chain(&unlabeled).find(|s| s.image.height() < f || s.image.width() < f) {
            return Err(Error::InvalidInput(format!(
                "image {}x{} smaller than the downsample factor {f}",
                s.image.height(),
                s.image.width()
            )));
        }
        let optimizer = Adadelta::new(&model.store, config.rho, config.eps, config.weight_decay, config.clip);
        Ok(Trainer { config, model, optimizer, epoch: 0, step: 0, labeled, unlabeled })
    }

    /// Continues from a checkpoint with new corpora.
    pub fn resume(checkpoint: Checkpoint, labeled: Vec<Sample>, unlabeled: Vec<Sample>) -> Result<Self> {
        let Checkpoint { config, model, optimizer, epoch, step } = checkpoint;
        let mut t = Self::with_model(config, model, labeled, unlabeled)?;
        t.optimizer = optimizer;
        t.epoch = epoch;
        t.step = step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            step: self.step,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.labeled.len().div_ceil(self.config.batch_size)
    }

    pub fn is_warmup(&self, epoch: usize) -> bool {
        epoch < self.config.warmup_epochs
    }

    /// Learning rate at a global step; each phase has its own ramp and decay.
    pub fn lr_for(&self, epoch: usize, step_in_epoch: usize) -> f64 {
        let spe = self.steps_per_epoch();
        let (start, end, peak) = if self.is_warmup(epoch) {
            (0, self.config.warmup_epochs, self.config.lr_warmup)
        } else {
            (self.config.warmup_epochs, self.config.epochs, self.config.lr_cross)
        };
        let phase = PhaseSchedule { peak, steps_per_epoch: spe, total_steps: (end - start) * spe };
        lr_at((epoch - start) * spe + step_in_epoch, &phase)
    }

    fn policy(&self, kind: PolicyKind) -> AugmentationPolicy {
        match kind {
            PolicyKind::Weak => AugmentationPolicy::weak(),
            PolicyKind::Strong => self.config.augment.clone(),
        }
    }

    /// Augmentation kind of each branch's view in `epoch`.
    pub fn view_kinds(&self, assignment: &BranchAssignment) -> [PolicyKind; 2] {
        match self.config.branch_policy {
            BranchPolicy::WeakStrong => [assignment.decoder1, assignment.decoder2],
            BranchPolicy::AllWeak => [PolicyKind::Weak; 2],
            BranchPolicy::AllStrong => [PolicyKind::Strong; 2],
        }
    }

    fn view(&self, samples: &[Sample], indices: &[usize], stream: u64, epoch: usize, branch: usize, kind: PolicyKind) -> Result<Batch> {
        let policy = self.policy(kind);
        let views: Vec<Sample> = indices
            .iter()
            .map(|&i| {
                let s = &samples[i];
                let seed = seed::derive_seed(&[self.config.seed, stream, epoch as u64, i as u64, branch as u64]);
                let image: Image = augment(&s.image, seed, &policy);
                Sample { image, label: s.label.clone(), source: s.source }
            })
            .collect();
        let refs: Vec<&Sample> = views.iter().collect();
        collate(&refs, &self.model.vocab)
    }

    fn epoch_order(&self, n: usize, stream: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng_for(&[self.config.seed, stream, epoch as u64]));
        order
    }

    /// Runs one epoch, passing each record to `sink` as it is produced.
    pub fn run_epoch(&mut self, sink: &mut dyn FnMut(&IterationRecord) -> Result<()>) -> Result<()> {
        let epoch = self.epoch;
        let assignment = assign_branch_policies(epoch, self.config.warmup_epochs);
        let kinds = self.view_kinds(&assignment);
        let cross = !self.is_warmup(epoch) && self.config.cross;
        let use_unlabeled = cross && !self.unlabeled.is_empty();
        let order = self.epoch_order(self.labeled.len(), tag::SHUFFLE_LABELED, epoch);
        let unl_order = self.epoch_order(self.unlabeled.len(), tag::SHUFFLE_UNLABELED, epoch);
        let per_iter_unl = self.config.batch_size * self.config.unlabeled_ratio;
        let opts = LossOptions {
            cross,
            lambda: self.config.lambda,
            max_len: self.config.max_len,
            weak_branch: assignment.weak_branch(),
        };
        for (iter, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let labeled =
                [0, 1].map(|b| self.view(&self.labeled, chunk, tag::AUG_LABELED, epoch, b, kinds[b]));
            let [l0, l1] = labeled;
            let labeled = [l0?, l1?];
            let unlabeled = if use_unlabeled && per_iter_unl > 0 {
                let n = unl_order.len();
                let idx: Vec<usize> = (0..per_iter_unl).map(|k| unl_order[(iter * per_iter_unl + k) % n]).collect();
                let [u0, u1] = [0, 1].map(|b| self.view(&self.unlabeled, &idx, tag::AUG_UNLABELED, epoch, b, kinds[b]));
                Some([u0?, u1?])
            } else {
                None
            };
            let views = ViewBatches { labeled, unlabeled };
            let lr = self.lr_for(epoch, iter);
            let mut g = Graph::new();
            let terms = build_loss(&self.model, &mut g, &views, &opts)?;
            let grads = g.backward(terms.total, self.model.store.len());
            self.optimizer.step(&mut self.model.store, &grads, lr);
            let record = IterationRecord {
                epoch,
                iter,
                step: self.step,
                lr,
                loss: terms.breakdown,
                decoder1: assignment.decoder1,
                decoder2: assignment.decoder2,
            };
            self.step += 1;
            sink(&record)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains up to `config.epochs`, appending metrics and rewriting the
    /// checkpoint after every epoch. Returns the records of this call.
    pub fn run(&mut self) -> Result<Vec<IterationRecord>> {
        let mut log = match &self.config.metrics {
            Some(path) => {
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(self.epoch > 0)
                    .write(true)
                    .truncate(self.epoch == 0)
                    .open(path)
                    .map_err(io_err(path))?;
                Some((path.clone(), std::io::BufWriter::new(file)))
            }
            None => None,
        };
        let mut history = Vec::new();
        self.save_checkpoint()?;
        while self.epoch < self.config.epochs {
            self.run_epoch(&mut |r| {
                history.push(r.clone());
                if let Some((path, w)) = log.as_mut() {
                    writeln!(w, "{r}").map_err(io_err(path.as_path()))?;
                }
                Ok(())
            })?;
            if let Some((path, w)) = log.as_mut() {
                w.flush().map_err(io_err(path.as_path()))?;
            }
            self.save_checkpoint()?;
        }
        Ok(history)
    }

    fn save_checkpoint(&self) -> Result<()> {
        match &self.config.checkpoint {
            Some(path) => self.checkpoint().save(path),
            None => Ok(()),
        }
    }

    pub fn labeled(&self) -> &[Sample] {
        &self.labeled
    }
}

/// Writes records to a metrics log, one line each.
pub fn write_metrics(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let text: String = records.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(path, text).map_err(io_err(path))
}
