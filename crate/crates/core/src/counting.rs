//! Multi-scale counting head: per-class density maps summed over valid
//! positions give a global count vector.

use hmer_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::nn;

/// Nonnegative per-class counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CountVector(Vec<f64>);

impl CountVector {
    pub fn new(counts: Vec<f64>) -> Self {
        CountVector(counts)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Starting density bias: sigmoid(-4) ≈ 0.018 per position, so initial
/// counts stay near zero instead of half the feature area per class.
pub const INITIAL_PROJ_BIAS: f64 = -4.0;

/// Kernel sizes of the two scale branches.
pub const SCALES: [usize; 2] = [3, 5];

#[derive(Clone, Debug)]
struct Branch {
    kernel: usize,
    conv_w: ParamId,
    conv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct CountingHead {
    branches: Vec<Branch>,
    classes: usize,
}

impl CountingHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let branches = SCALES
            .iter()
            .map(|&k| Branch {
                kernel: k,
                conv_w: nn::conv(store, &format!("{prefix}k{k}.conv.w"), hidden, in_channels, k, rng),
                conv_b: nn::zeros(store, &format!("{prefix}k{k}.conv.b"), &[hidden]),
                proj_w: nn::conv(store, &format!("{prefix}k{k}.proj.w"), classes, hidden, 1, rng),
                proj_b: store.add(format!("{prefix}k{k}.proj.b"), Tensor::full(&[classes], INITIAL_PROJ_BIAS)),
            })
            .collect();
        CountingHead { branches, classes }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `features[b, d, h, w]` (already masked) → counts `[b, classes]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var, mask: &Tensor) -> Var {
        let per_scale: Vec<Var> = self
            .branches
            .iter()
            .map(|br| {
                let (w, b) = (g.param(store, br.conv_w), g.param(store, br.conv_b));
                let x = g.conv2d(features, w, Some(b), 1, br.kernel / 2);
                let x = g.relu(x);
                let (pw, pb) = (g.param(store, br.proj_w), g.param(store, br.proj_b));
                let x = g.conv2d(x, pw, Some(pb), 1, 0);
                let x = g.sigmoid(x);
                let x = g.mask_spatial(x, mask);
                g.sum_spatial(x)
            })
            .collect();
        let sum = g.add_n(&per_scale);
        g.scale(sum, 1.0 / per_scale.len() as f64)
    }
}

/// Splits a `[b, classes]` count tensor into per-sample vectors.
pub fn count_vectors(counts: &Tensor) -> Vec<CountVector> {
    let (b, _) = counts.rows_cols();
    (0..b).map(|i| CountVector::new(counts.row(i).to_vec())).collect()
}
