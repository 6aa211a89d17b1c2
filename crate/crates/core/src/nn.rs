//! Parameter initialisers.

use hmer_tensor::{ParamId, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// `[out, in, k, k]`, He-uniform.
pub fn conv(store: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize, rng: &mut ChaCha8Rng) -> ParamId {
    let fan_in = (inp * k * k) as f64;
    store.add(name, uniform(rng, &[out, inp, k, k], (6.0 / fan_in).sqrt()))
}

/// `[out, in]`, Glorot-uniform.
pub fn linear(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.add(name, uniform(rng, &[out, inp], (6.0 / (inp + out) as f64).sqrt()))
}

pub fn zeros(store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
    store.add(name, Tensor::zeros(shape))
}

pub fn ones(store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
    store.add(name, Tensor::full(shape, 1.0))
}
