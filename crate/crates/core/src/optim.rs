//! Adadelta with L2 weight decay and global-norm gradient clipping.

use hmer_tensor::{Gradients, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global norm clip; 0 disables.
    pub clip: f64,
    /// Running averages of squared gradients, one per parameter.
    pub sq_grad: Vec<Tensor>,
    /// Running averages of squared updates.
    pub sq_delta: Vec<Tensor>,
}

impl Adadelta {
    pub fn new(store: &ParamStore, rho: f64, eps: f64, weight_decay: f64, clip: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adadelta { rho, eps, weight_decay, clip, sq_grad: zeros.clone(), sq_delta: zeros }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> f64 {
        let norm = grads.global_norm();
        let factor = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (rho, eps, wd) = (self.rho, self.eps, self.weight_decay);
            let param = store.get_mut(id);
            let sg = self.sq_grad[id.0].data_mut();
            let sd = self.sq_delta[id.0].data_mut();
            for (i, (p, &gi)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                let grad = gi * factor + wd * *p;
                sg[i] = rho * sg[i] + (1.0 - rho) * grad * grad;
                let delta = ((sd[i] + eps).sqrt() / (sg[i] + eps).sqrt()) * grad;
                sd[i] = rho * sd[i] + (1.0 - rho) * delta * delta;
                *p -= lr * delta;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hmer_tensor::Graph;

    #[test]
    fn first_step_matches_hand_computation() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]));
        let mut opt = Adadelta::new(&store, 0.9, 1e-6, 0.0, 0.0);
        // loss = Σ w², gradient 2w
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let sq = g.mul(w, w);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss, store.len());
        opt.step(&mut store, &grads, 1.0);
        for (i, w0) in [1.0f64, -2.0].into_iter().enumerate() {
            let grad = 2.0 * w0;
            let sg = 0.1 * grad * grad;
            let delta = (1e-6f64).sqrt() / (sg + 1e-6).sqrt() * grad;
            assert!((store.get(id).data()[i] - (w0 - delta)).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_scales_large_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[1], vec![100.0]));
        let mut a = Adadelta::new(&store, 0.9, 1e-6, 0.0, 1.0);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let l = g.scale(w, 50.0);
        let loss = g.sum_all(l);
        let grads = g.backward(loss, store.len());
        let norm = a.step(&mut store, &grads, 1.0);
        assert_eq!(norm, 50.0);
        assert!((a.sq_grad[0].data()[0] - 0.1).abs() < 1e-12);
    }
}
