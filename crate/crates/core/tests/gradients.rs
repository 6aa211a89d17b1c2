mod common;

use common::*;
use hmer_core::model::Model;
use hmer_core::seed::rng_for;
use hmer_core::trainer::{build_loss, LossOptions, ViewBatches};
use hmer_tensor::{Graph, ParamId};
use rand::Rng;

fn setup() -> (Model, ViewBatches) {
    let vocab = tiny_vocab();
    let mut model = Model::new(&tiny_model_config(), &vocab, 21);
    // Non-zero refinement weights so the residual path carries gradient.
    let mut r = rng_for(&[22]);
    for d in 0..2 {
        let (wk, bk) = model.decoders[d].refine_params().unwrap();
        for id in [wk, bk] {
            model.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = r.gen_range(-0.5..0.5));
        }
    }
    let weak = [labeled(1, &vocab, 8, 12), labeled(2, &vocab, 12, 8)];
    let mut strong = weak.clone();
    strong[0].image = random_image(9, 8, 12);
    strong[1].image = random_image(10, 12, 8);
    let views = ViewBatches {
        labeled: [batch(&weak, &vocab), batch(&strong, &vocab)],
        unlabeled: Some([batch(&[unlabeled(3, 8, 16)], &vocab), batch(&[unlabeled(4, 8, 16)], &vocab)]),
    };
    (model, views)
}

fn total(model: &Model, views: &ViewBatches, opts: &LossOptions) -> f64 {
    let mut g = Graph::new();
    let t = build_loss(model, &mut g, views, opts).unwrap();
    g.value(t.total).item()
}

#[test]
fn total_loss_gradient_matches_central_differences() {
    let (mut model, views) = setup();
    assert!(model.num_params() <= 5000, "{}", model.num_params());
    let opts = LossOptions { cross: true, lambda: 0.5, max_len: 4, weak_branch: 0 };
    let mut g = Graph::new();
    let terms = build_loss(&model, &mut g, &views, &opts).unwrap();
    let grads = g.backward(terms.total, model.store.len());

    // Every tensor gets at least one probe, the rest are random.
    let tensors: Vec<(ParamId, String, usize)> =
        model.store.iter().map(|(id, n, t)| (id, n.to_string(), t.data().len())).collect();
    let mut r = rng_for(&[23]);
    let mut probes: Vec<(ParamId, usize)> = tensors.iter().map(|(id, _, n)| (*id, r.gen_range(0..*n))).collect();
    while probes.len() < 120 {
        let (id, _, n) = &tensors[r.gen_range(0..tensors.len())];
        probes.push((*id, r.gen_range(0..*n)));
    }
    for needed in ["fuse.count", "refine.w", "att.cov", "cnt1.k5.proj.w", "cnt2.k3.conv.w"] {
        assert!(tensors.iter().any(|(_, n, _)| n.contains(needed)), "{needed}");
    }

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (id, i) in probes {
        let x0 = model.store.get(id).data()[i];
        model.store.get_mut(id).data_mut()[i] = x0 + h;
        let up = total(&model, &views, &opts);
        model.store.get_mut(id).data_mut()[i] = x0 - h;
        let down = total(&model, &views, &opts);
        model.store.get_mut(id).data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}
