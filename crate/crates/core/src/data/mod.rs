//! Vocabulary, samples and batching, InkML ingestion, rendering, synthetic
//! formulas and on-disk corpora.

pub mod corpus;
pub mod inkml;
pub mod render;
pub mod sample;
pub mod synth;
pub mod vocab;

pub use corpus::{load_corpus, write_corpus};
pub use inkml::{parse_inkml, serialize_inkml, InkDocument, Point};
pub use render::render_strokes;
pub use sample::{check_label, collate, counting_ground_truth, Batch, Image, Sample, Source, MIN_SIDE};
pub use synth::{grammar_accepts, synth_sample, SynthConfig};
pub use vocab::Vocabulary;
