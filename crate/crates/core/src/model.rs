//! Shared encoder, two counting heads and two decoders in one parameter store.

use hmer_tensor::{Graph, ParamStore, Tensor};

use crate::counting::CountingHead;
use crate::data::{Batch, Vocabulary};
use crate::decoder::{Decoder, DecoderConfig, Prepared, StepOutput};
use crate::encoder::{Encoder, EncoderConfig, FeatureMap};
use crate::error::Result;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub count_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { encoder: EncoderConfig::default(), decoder: DecoderConfig::default(), count_hidden: 32 }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub counters: [CountingHead; 2],
    pub decoders: [Decoder; 2],
}

/// One branch's teacher-forced outputs.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// Predicted counts `[b, classes]`.
    pub counts: hmer_tensor::Var,
    pub steps: Vec<StepOutput>,
}

impl BranchOutput {
    pub fn refined_logits(&self) -> Vec<hmer_tensor::Var> {
        self.steps.iter().map(|s| s.refined).collect()
    }
}

impl Model {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: &ModelConfig, vocab: &Vocabulary, seed_value: u64) -> Self {
        let mut rng = seed::rng_for(&[seed_value, seed::tag::INIT]);
        let mut store = ParamStore::new();
        let c = vocab.len();
        let encoder = Encoder::new(&mut store, "enc.", &config.encoder, &mut rng);
        let d = config.encoder.out_channels();
        let counters = [1, 2].map(|i| CountingHead::new(&mut store, &format!("cnt{i}."), d, config.count_hidden, c, &mut rng));
        let decoders = [1, 2].map(|i| {
            Decoder::new(&mut store, &format!("dec{i}."), &config.decoder, d, c, vocab.sos(), vocab.eos(), &mut rng)
        });
        Model { config: config.clone(), vocab: vocab.clone(), store, encoder, counters, decoders }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn encode(&self, g: &mut Graph, images: &Tensor, mask: &Tensor) -> Result<FeatureMap> {
        self.encoder.forward(g, &self.store, images, mask)
    }

    /// Counting head and decoder inputs of `branch` (0 or 1).
    pub fn prepare(&self, g: &mut Graph, fm: &FeatureMap, branch: usize) -> Prepared {
        let counts = self.counters[branch].forward(g, &self.store, fm.features, &fm.mask);
        self.decoders[branch].prepare(g, &self.store, fm, counts)
    }

    pub fn teacher_forced(&self, g: &mut Graph, fm: &FeatureMap, branch: usize, targets: &[Vec<usize>]) -> BranchOutput {
        let prep = self.prepare(g, fm, branch);
        let steps = self.decoders[branch].teacher_forced(g, &self.store, &prep, targets);
        BranchOutput { counts: prep.counts, steps }
    }

    /// Greedy decode of `branch` on its own tape.
    pub fn predict(&self, images: &Tensor, mask: &Tensor, branch: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::new();
        let fm = self.encode(&mut g, images, mask)?;
        let prep = self.prepare(&mut g, &fm, branch);
        Ok(self.decoders[branch].greedy(&mut g, &self.store, &prep, max_len))
    }

    pub fn predict_batch(&self, batch: &Batch, branch: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
        self.predict(&batch.images, &batch.image_mask, branch, max_len)
    }
}
