#![allow(dead_code)]

use hmer_core::config::TrainConfig;
use hmer_core::data::{collate, Batch, Image, Sample, Vocabulary};
use hmer_core::model::ModelConfig;
use hmer_core::seed::rng_for;
use rand::Rng;

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::new(&["pad", "sos", "eos", "1", "2", "x", "+"]).unwrap()
}

/// A few thousand parameters at most.
pub fn tiny_model_config() -> ModelConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("enc.growth", "2"),
        ("enc.blocks", "1"),
        ("enc.init_ch", "4"),
        ("dec.hidden", "6"),
        ("dec.embed", "3"),
        ("dec.attn", "4"),
        ("dec.coverage_kernel", "3"),
        ("dec.count_hidden", "3"),
    ] {
        c.set(k, v).unwrap();
    }
    c.model
}

pub fn tiny_train_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model = tiny_model_config();
    c.batch_size = 2;
    c.max_len = 6;
    c
}

pub fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut r = rng_for(&[seed, 77]);
    Image::new(h, w, (0..h * w).map(|_| if r.gen_bool(0.3) { r.gen_range(0.5..1.0) } else { 0.0 }).collect())
}

pub fn random_label(seed: u64, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut r = rng_for(&[seed, 78]);
    let n = r.gen_range(1..=max_len);
    let content: Vec<usize> = (0..n).map(|_| r.gen_range(3..vocab.len())).collect();
    [content, vec![vocab.eos()]].concat()
}

pub fn labeled(seed: u64, vocab: &Vocabulary, h: usize, w: usize) -> Sample {
    Sample::labeled(random_image(seed, h, w), random_label(seed, vocab, 4), vocab).unwrap()
}

pub fn unlabeled(seed: u64, h: usize, w: usize) -> Sample {
    Sample::unlabeled(random_image(seed, h, w)).unwrap()
}

pub fn batch(samples: &[Sample], vocab: &Vocabulary) -> Batch {
    let refs: Vec<&Sample> = samples.iter().collect();
    collate(&refs, vocab).unwrap()
}
