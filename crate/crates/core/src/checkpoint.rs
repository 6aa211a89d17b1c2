//! Binary checkpoints: a JSON header followed by raw little-endian `f64`s.
//!
//! Layout: `HMERCKPT`, `u32` version, `u64` header length, header JSON, then
//! every parameter in store order, then the optimizer's two accumulators in
//! the same order. Randomness is derived from `(seed, epoch, ...)`, so the
//! epoch counter is all the RNG state a resume needs.

use std::path::Path;

use hmer_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Vocabulary;
use crate::error::{io_err, Error, Result};
use crate::model::Model;
use crate::optim::Adadelta;

const MAGIC: &[u8; 8] = b"HMERCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adadelta,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    vocab: Vec<String>,
    epoch: usize,
    step: usize,
    params: Vec<(String, Vec<usize>)>,
    rho: f64,
    eps: f64,
    weight_decay: f64,
    clip: f64,
}

fn bad(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let header = Header {
            config: self.config.to_text(),
            vocab: self.model.vocab.tokens().to_vec(),
            epoch: self.epoch,
            step: self.step,
            params: store.iter().map(|(_, name, t)| (name.to_string(), t.shape().to_vec())).collect(),
            rho: self.optimizer.rho,
            eps: self.optimizer.eps,
            weight_decay: self.optimizer.weight_decay,
            clip: self.optimizer.clip,
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 24 + 24 * store.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = store
            .iter()
            .map(|(_, _, t)| t)
            .chain(&self.optimizer.sq_grad)
            .chain(&self.optimizer.sq_delta);
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
        let config = TrainConfig::from_text(&header.config)?;
        let vocab = Vocabulary::new(&header.vocab)?;
        let mut model = Model::new(&config.model, &vocab, config.seed);
        if model.store.len() != header.params.len() {
            return Err(bad(format!(
                "{} parameters stored, configuration builds {}",
                header.params.len(),
                model.store.len()
            )));
        }
        let mut values = bytes[20 + len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut read = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad("truncated values"));
            }
            Ok(Tensor::new(shape, data))
        };
        let built: Vec<_> = model.store.iter().map(|(id, n, t)| (id, n.to_string(), t.shape().to_vec())).collect();
        for ((id, have_name, have_shape), (name, shape)) in built.into_iter().zip(&header.params) {
            if &have_name != name || &have_shape != shape {
                return Err(bad(format!("parameter {name} {shape:?} does not match {have_name} {have_shape:?}")));
            }
            *model.store.get_mut(id) = read(shape)?;
        }
        let mut optimizer = Adadelta::new(&model.store, header.rho, header.eps, header.weight_decay, header.clip);
        for i in 0..header.params.len() {
            optimizer.sq_grad[i] = read(&header.params[i].1)?;
        }
        for i in 0..header.params.len() {
            optimizer.sq_delta[i] = read(&header.params[i].1)?;
        }
        if values.next().is_some() {
            return Err(bad("trailing data"));
        }
        Ok(Checkpoint { config, model, optimizer, epoch: header.epoch, step: header.step })
    }

    /// Writes to a sibling temp file first so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut config = TrainConfig::default();
        config.model = ModelConfig::default();
        config.model.encoder.block_depths = vec![1, 1];
        config.model.encoder.initial_channels = 4;
        config.model.encoder.growth_rate = 2;
        config.seed = 5;
        let vocab = Vocabulary::crohme();
        let model = Model::new(&config.model, &vocab, 11);
        let mut optimizer = Adadelta::new(&model.store, 0.9, 1e-6, 1e-4, 100.0);
        optimizer.sq_grad[3].data_mut()[0] = 0.125;
        let ck = Checkpoint { config, model, optimizer, epoch: 4, step: 40 };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!((back.epoch, back.step), (4, 40));
        assert_eq!(back.config, ck.config);
        assert_eq!(back.optimizer, ck.optimizer);
        for id in ck.model.store.ids() {
            assert_eq!(back.model.store.get(id), ck.model.store.get(id));
        }
        let mut corrupt = ck.to_bytes().unwrap();
        corrupt.pop();
        assert!(Checkpoint::from_bytes(&corrupt).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
