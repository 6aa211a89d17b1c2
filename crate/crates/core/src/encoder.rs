//! Densely connected convolutional backbone with mask-aware normalisation.
//!
//! Padding invariance: the input is masked, every normalisation uses only
//! valid positions, and the mask is re-applied after each convolution, so
//! pixels outside the original image never reach valid features.

use hmer_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub growth_rate: usize,
    pub block_depths: Vec<usize>,
    pub initial_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { growth_rate: 12, block_depths: vec![4, 4, 4], initial_channels: 32 }
    }
}

impl EncoderConfig {
    /// Stem (stride-2 conv + pool) gives 4; each transition halves again.
    pub fn downsample_factor(&self) -> usize {
        4 << self.block_depths.len().saturating_sub(1)
    }

    pub fn out_channels(&self) -> usize {
        let mut c = self.initial_channels;
        for (i, &d) in self.block_depths.iter().enumerate() {
            c += d * self.growth_rate;
            if i + 1 < self.block_depths.len() {
                c /= 2;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, m: &str| Err(Error::Config { key: key.into(), message: m.into() });
        if self.growth_rate == 0 {
            return bad("enc.growth", "must be positive");
        }
        if self.block_depths.is_empty() || self.block_depths.contains(&0) {
            return bad("enc.blocks", "need at least one block, each of positive depth");
        }
        if self.initial_channels < 2 {
            return bad("enc.init_ch", "must be at least 2");
        }
        Ok(())
    }
}

/// Encoder output: `features[b, d, h', w']` (zero where invalid) and
/// `mask[b, h', w']`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub features: Var,
    pub mask: Tensor,
}

impl FeatureMap {
    pub fn channels(&self, g: &Graph) -> usize {
        g.shape(self.features)[1]
    }

    /// Mask flattened to `[b, h'·w']`.
    pub fn flat_mask(&self) -> Tensor {
        let (b, h, w) = (self.mask.dim(0), self.mask.dim(1), self.mask.dim(2));
        self.mask.clone().reshape(&[b, h * w])
    }
}

/// 2×2 any-valid reduction with ceil sizing.
pub fn pool_mask(mask: &Tensor) -> Tensor {
    let (b, h, w) = (mask.dim(0), mask.dim(1), mask.dim(2));
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; b * ho * wo];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if mask.data()[(bi * h + y) * w + x] > 0.5 {
                    out[(bi * ho + y / 2) * wo + x / 2] = 1.0;
                }
            }
        }
    }
    Tensor::new(&[b, ho, wo], out)
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Norm { gamma: nn::ones(store, &format!("{name}.g"), &[c]), beta: nn::zeros(store, &format!("{name}.b"), &[c]) }
    }

    fn norm_relu(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &Tensor) -> Var {
        let (gm, bt) = (g.param(store, self.gamma), g.param(store, self.beta));
        let y = g.masked_norm(x, gm, bt, mask, NORM_EPS);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    norm: Norm,
    conv: ParamId,
}

#[derive(Clone, Debug)]
struct Transition {
    norm: Norm,
    conv: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stem: ParamId,
    stem_norm: Norm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_norm: Norm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut c = config.initial_channels;
        let stem = nn::conv(store, &format!("{prefix}stem.w"), c, 1, 3, rng);
        let stem_norm = Norm::new(store, &format!("{prefix}stem.norm"), c);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &depth) in config.block_depths.iter().enumerate() {
            let mut layers = Vec::new();
            for li in 0..depth {
                let name = format!("{prefix}block{bi}.layer{li}");
                layers.push(DenseLayer {
                    norm: Norm::new(store, &format!("{name}.norm"), c),
                    conv: nn::conv(store, &format!("{name}.conv.w"), config.growth_rate, c, 3, rng),
                });
                c += config.growth_rate;
            }
            blocks.push(layers);
            if bi + 1 < config.block_depths.len() {
                let name = format!("{prefix}trans{bi}");
                transitions.push(Transition {
                    norm: Norm::new(store, &format!("{name}.norm"), c),
                    conv: nn::conv(store, &format!("{name}.conv.w"), c / 2, c, 1, rng),
                });
                c /= 2;
            }
        }
        let final_norm = Norm::new(store, &format!("{prefix}final.norm"), c);
        Encoder { config: config.clone(), stem, stem_norm, blocks, transitions, final_norm }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `images[b, h, w]` with validity `mask[b, h, w]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: &Tensor, mask: &Tensor) -> Result<FeatureMap> {
        let (b, h, w) = (images.dim(0), images.dim(1), images.dim(2));
        let f = self.config.downsample_factor();
        if h < f || w < f {
            return Err(Error::InvalidInput(format!("image {h}x{w} smaller than the downsample factor {f}")));
        }
        let masked: Vec<f64> = images.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let x = g.constant(Tensor::new(&[b, 1, h, w], masked));
        let sw = g.param(store, self.stem);
        let x = g.conv2d(x, sw, None, 2, 1);
        let mut m = pool_mask(mask);
        let x = g.mask_spatial(x, &m);
        let x = self.stem_norm.norm_relu(g, store, x, &m);
        let x = g.avg_pool2(x);
        m = pool_mask(&m);
        let mut x = g.mask_spatial(x, &m);
        for (bi, layers) in self.blocks.iter().enumerate() {
            for layer in layers {
                let y = layer.norm.norm_relu(g, store, x, &m);
                let cw = g.param(store, layer.conv);
                let y = g.conv2d(y, cw, None, 1, 1);
                let y = g.mask_spatial(y, &m);
                x = g.concat_channels(&[x, y]);
            }
            if let Some(t) = self.transitions.get(bi) {
                let y = t.norm.norm_relu(g, store, x, &m);
                let cw = g.param(store, t.conv);
                let y = g.conv2d(y, cw, None, 1, 0);
                let y = g.avg_pool2(y);
                m = pool_mask(&m);
                x = g.mask_spatial(y, &m);
            }
        }
        let features = self.final_norm.norm_relu(g, store, x, &m);
        Ok(FeatureMap { features, mask: m })
    }
}
