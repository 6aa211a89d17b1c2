//! Attention decoder with coverage and a dynamic residual count.
//!
//! Step `t` (prev token `y`, residual count `R_t`, static counts `V`):
//!
//! ```text
//! h_t     = GRU([E(y); c_{t-1}], h_{t-1})
//! α_t     = masked_softmax(v · tanh(U_f f + W_h h_t + b + U_cov · patches(coverage)))
//! c_t     = Σ α_t f,   coverage += α_t
//! pre_t   = w_o (W_c c_t + W_v R_t + W_t h_t + W_e E(y)) + b_o
//! refined = pre_t + W_k R_t + b_k
//! R_{t+1} = R_t − softmax(pre_t)
//! ```
//!
//! With counting refinement disabled, `V` replaces `R_t` in the fusion and
//! `refined = pre_t`.

use hmer_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub embed: usize,
    pub attn: usize,
    pub coverage_kernel: usize,
    /// Dynamic counting refinement on/off.
    pub gdcm: bool,
    /// Clamp the residual count at zero.
    pub clamp: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { hidden: 64, embed: 32, attn: 32, coverage_kernel: 5, gdcm: true, clamp: false }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, m: &str| Err(Error::Config { key: key.into(), message: m.into() });
        if self.hidden == 0 {
            return bad("dec.hidden", "must be positive");
        }
        if self.embed == 0 {
            return bad("dec.embed", "must be positive");
        }
        if self.attn == 0 {
            return bad("dec.attn", "must be positive");
        }
        if self.coverage_kernel % 2 == 0 {
            return bad("dec.coverage_kernel", "must be odd");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Params {
    embedding: ParamId,
    init_w: ParamId,
    init_b: ParamId,
    gru_wi: ParamId,
    gru_bi: ParamId,
    gru_wh: ParamId,
    gru_bh: ParamId,
    att_feat: ParamId,
    att_query_w: ParamId,
    att_query_b: ParamId,
    att_cov: ParamId,
    att_v: ParamId,
    fuse_ctx: ParamId,
    fuse_count: ParamId,
    fuse_hidden: ParamId,
    fuse_embed: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    refine: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    classes: usize,
    feat_dim: usize,
    sos: usize,
    eos: usize,
    p: Params,
}

/// Per-sequence inputs computed once before the step loop.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// `[b, p, d]`
    pub feats: Var,
    /// `[b, p, attn]`
    feat_proj: Var,
    /// `[b, p]`
    pub mask: Tensor,
    pub height: usize,
    pub width: usize,
    /// Static count vector `V`, `[b, classes]`.
    pub counts: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    /// `[b, hidden]`
    pub hidden: Var,
    /// Previous context `[b, d]`.
    pub context: Var,
    /// `[b, h', w']`
    pub coverage: Var,
    /// Residual count `R_t`, `[b, classes]`.
    pub residual: Var,
    pub t: usize,
    pub prev: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub preliminary: Var,
    pub refined: Var,
    /// `[b, p]`
    pub attention: Var,
    pub context: Var,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &DecoderConfig,
        feat_dim: usize,
        classes: usize,
        sos: usize,
        eos: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (hd, e, a, d, c) = (config.hidden, config.embed, config.attn, feat_dim, classes);
        let k2 = config.coverage_kernel * config.coverage_kernel;
        let n = |s: &str| format!("{prefix}{s}");
        let p = Params {
            embedding: nn::linear(store, &n("emb"), c, e, rng),
            init_w: nn::linear(store, &n("init.w"), hd, d, rng),
            init_b: nn::zeros(store, &n("init.b"), &[hd]),
            gru_wi: nn::linear(store, &n("gru.wi"), 3 * hd, e + d, rng),
            gru_bi: nn::zeros(store, &n("gru.bi"), &[3 * hd]),
            gru_wh: nn::linear(store, &n("gru.wh"), 3 * hd, hd, rng),
            gru_bh: nn::zeros(store, &n("gru.bh"), &[3 * hd]),
            att_feat: nn::linear(store, &n("att.feat"), a, d, rng),
            att_query_w: nn::linear(store, &n("att.query.w"), a, hd, rng),
            att_query_b: nn::zeros(store, &n("att.query.b"), &[a]),
            att_cov: nn::linear(store, &n("att.cov"), a, k2, rng),
            att_v: nn::linear(store, &n("att.v"), 1, a, rng),
            fuse_ctx: nn::linear(store, &n("fuse.ctx"), hd, d, rng),
            fuse_count: nn::linear(store, &n("fuse.count"), hd, c, rng),
            fuse_hidden: nn::linear(store, &n("fuse.hidden"), hd, hd, rng),
            fuse_embed: nn::linear(store, &n("fuse.embed"), hd, e, rng),
            out_w: nn::linear(store, &n("out.w"), c, hd, rng),
            out_b: nn::zeros(store, &n("out.b"), &[c]),
            refine: config
                .gdcm
                .then(|| (nn::zeros(store, &n("refine.w"), &[c, c]), nn::zeros(store, &n("refine.b"), &[c]))),
        };
        Decoder { config: config.clone(), classes, feat_dim, sos, eos, p }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Ids of the refinement weights `(W_k, b_k)`, when enabled.
    pub fn refine_params(&self) -> Option<(ParamId, ParamId)> {
        self.p.refine
    }

    pub fn prepare(&self, g: &mut Graph, store: &ParamStore, fm: &FeatureMap, counts: Var) -> Prepared {
        let (b, d, h, w) = {
            let s = g.shape(fm.features);
            (s[0], s[1], s[2], s[3])
        };
        assert_eq!(d, self.feat_dim, "feature width mismatch");
        assert_eq!(g.shape(counts), [b, self.classes], "count vector shape mismatch");
        let feats = g.channels_last(fm.features);
        let uf = g.param(store, self.p.att_feat);
        let feat_proj = g.linear(feats, uf, None);
        Prepared { feats, feat_proj, mask: fm.flat_mask(), height: h, width: w, counts }
    }

    pub fn init_state(&self, g: &mut Graph, store: &ParamStore, prep: &Prepared) -> DecoderState {
        let b = prep.mask.dim(0);
        let mean = g.masked_mean(prep.feats, &prep.mask);
        let (w, bias) = (g.param(store, self.p.init_w), g.param(store, self.p.init_b));
        let h0 = g.linear(mean, w, Some(bias));
        let hidden = g.tanh(h0);
        let coverage = g.constant(Tensor::zeros(&[b, prep.height, prep.width]));
        DecoderState { hidden, context: mean, coverage, residual: prep.counts, t: 1, prev: vec![self.sos; b] }
    }

    fn gru(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Var {
        let hd = self.config.hidden;
        let (wi, bi) = (g.param(store, self.p.gru_wi), g.param(store, self.p.gru_bi));
        let (wh, bh) = (g.param(store, self.p.gru_wh), g.param(store, self.p.gru_bh));
        let gi = g.linear(x, wi, Some(bi));
        let gh = g.linear(h, wh, Some(bh));
        let (ir, iz, inn) = (g.slice_cols(gi, 0, hd), g.slice_cols(gi, hd, 2 * hd), g.slice_cols(gi, 2 * hd, 3 * hd));
        let (hr, hz, hn) = (g.slice_cols(gh, 0, hd), g.slice_cols(gh, hd, 2 * hd), g.slice_cols(gh, 2 * hd, 3 * hd));
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);
        let z = g.add(iz, hz);
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn);
        let n = g.add(inn, rn);
        let n = g.tanh(n);
        // h' = (1 − z) n + z h = n + z (h − n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }

    /// Coverage attention for query `hidden`; returns `(context, attention, coverage')`.
    pub fn attention_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prep: &Prepared,
        hidden: Var,
        coverage: Var,
    ) -> (Var, Var, Var) {
        let b = prep.mask.dim(0);
        let p = prep.height * prep.width;
        let (qw, qb) = (g.param(store, self.p.att_query_w), g.param(store, self.p.att_query_b));
        let q = g.linear(hidden, qw, Some(qb));
        let patches = g.patches(coverage, self.config.coverage_kernel);
        let cw = g.param(store, self.p.att_cov);
        let cov = g.linear(patches, cw, None);
        let e = g.add(prep.feat_proj, cov);
        let e = g.add_rows_broadcast(e, q);
        let e = g.tanh(e);
        let v = g.param(store, self.p.att_v);
        let e = g.linear(e, v, None);
        let e = g.reshape(e, &[b, p]);
        let alpha = g.masked_softmax(e, &prep.mask);
        let context = g.weighted_sum(alpha, prep.feats);
        let a2 = g.reshape(alpha, &[b, prep.height, prep.width]);
        let coverage = g.add(coverage, a2);
        (context, alpha, coverage)
    }

    /// `w_o (W_c c + W_v v + W_t h + W_e e) + b_o`.
    pub fn fuse_preliminary(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        context: Var,
        counts: Var,
        hidden: Var,
        embedding: Var,
    ) -> Var {
        let terms = [
            (self.p.fuse_ctx, context),
            (self.p.fuse_count, counts),
            (self.p.fuse_hidden, hidden),
            (self.p.fuse_embed, embedding),
        ]
        .map(|(w, x)| {
            let w = g.param(store, w);
            g.linear(x, w, None)
        });
        let s = g.add_n(&terms);
        let (ow, ob) = (g.param(store, self.p.out_w), g.param(store, self.p.out_b));
        g.linear(s, ow, Some(ob))
    }

    /// `(pre + W_k R + b_k, R − softmax(pre))`; identity on `pre` and `R`
    /// when refinement is disabled.
    pub fn refine(&self, g: &mut Graph, store: &ParamStore, preliminary: Var, residual: Var) -> (Var, Var) {
        let Some((wk, bk)) = self.p.refine else { return (preliminary, residual) };
        let (wk, bk) = (g.param(store, wk), g.param(store, bk));
        let adj = g.linear(residual, wk, Some(bk));
        let refined = g.add(preliminary, adj);
        let probs = g.softmax(preliminary);
        let mut next = g.sub(residual, probs);
        if self.config.clamp {
            next = g.relu(next);
        }
        (refined, next)
    }

    /// One decoding step fed with `state.prev`; advances `state` except for
    /// `prev`, which the caller sets.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, prep: &Prepared, state: &mut DecoderState) -> StepOutput {
        let table = g.param(store, self.p.embedding);
        let emb = g.gather_rows(table, &state.prev);
        let x = g.concat_cols(emb, state.context);
        let hidden = self.gru(g, store, x, state.hidden);
        let (context, attention, coverage) = self.attention_step(g, store, prep, hidden, state.coverage);
        let slot = if self.p.refine.is_some() { state.residual } else { prep.counts };
        let preliminary = self.fuse_preliminary(g, store, context, slot, hidden, emb);
        let (refined, residual) = self.refine(g, store, preliminary, state.residual);
        state.hidden = hidden;
        state.context = context;
        state.coverage = coverage;
        state.residual = residual;
        state.t += 1;
        StepOutput { preliminary, refined, attention, context }
    }

    /// Teacher forcing over padded `targets[b][t]`; one output per position
    /// of the longest row.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prep: &Prepared,
        targets: &[Vec<usize>],
    ) -> Vec<StepOutput> {
        let len = targets.iter().map(Vec::len).max().unwrap_or(0);
        let mut state = self.init_state(g, store, prep);
        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            outs.push(self.step(g, store, prep, &mut state));
            state.prev = targets.iter().map(|row| row.get(t).copied().unwrap_or(self.eos)).collect();
        }
        outs
    }

    /// Greedy argmax decoding (ties to the lowest id). Sequences stop after
    /// `eos` or at `max_len` tokens and include the `eos` when produced.
    pub fn greedy(&self, g: &mut Graph, store: &ParamStore, prep: &Prepared, max_len: usize) -> Vec<Vec<usize>> {
        let b = prep.mask.dim(0);
        let mut state = self.init_state(g, store, prep);
        let mut seqs: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let out = self.step(g, store, prep, &mut state);
            let logits = g.value(out.refined);
            let mut next = Vec::with_capacity(b);
            for (i, seq) in seqs.iter_mut().enumerate() {
                let tok = argmax(logits.row(i));
                if !done[i] {
                    seq.push(tok);
                    done[i] = tok == self.eos;
                }
                next.push(if done[i] { self.eos } else { tok });
            }
            state.prev = next;
        }
        seqs
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use hmer_tensor::softmax;
    use rand::Rng;

    fn setup(gdcm: bool) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { hidden: 6, embed: 4, attn: 5, coverage_kernel: 3, gdcm, clamp: false };
        let dec = Decoder::new(&mut store, "dec.", &cfg, 3, 5, 1, 2, &mut rng_for(&[3]));
        (store, dec)
    }

    fn features(g: &mut Graph, seed: u64, b: usize, h: usize, w: usize) -> FeatureMap {
        let mut r = rng_for(&[seed]);
        let f = Tensor::from_fn(&[b, 3, h, w], |_| r.gen_range(0.0..1.0));
        FeatureMap { features: g.constant(f), mask: Tensor::full(&[b, h, w], 1.0) }
    }

    fn counts(g: &mut Graph, b: usize) -> Var {
        g.constant(Tensor::from_fn(&[b, 5], |i| (i % 5) as f64 * 0.5))
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.4, 0.2, 0.4]), 0);
    }

    #[test]
    fn zero_features_initialise_to_tanh_bias() {
        let (mut store, dec) = setup(true);
        let bias = store.find("dec.init.b").unwrap();
        store.get_mut(bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 1.0, -1.0]);
        let mut g = Graph::new();
        let fm = FeatureMap { features: g.constant(Tensor::zeros(&[1, 3, 2, 2])), mask: Tensor::full(&[1, 2, 2], 1.0) };
        let v = counts(&mut g, 1);
        let prep = dec.prepare(&mut g, &store, &fm, v);
        let st = dec.init_state(&mut g, &store, &prep);
        let want: Vec<f64> = store.get(bias).data().iter().map(|x| x.tanh()).collect();
        assert_eq!(g.value(st.hidden).data(), &want[..]);
        assert_eq!(g.value(st.residual), g.value(v));
        assert!(g.value(st.coverage).data().iter().all(|&c| c == 0.0));
        assert_eq!(st.prev, vec![1]);
    }

    #[test]
    fn uniform_attention_on_identical_features() {
        let (store, dec) = setup(true);
        let mut g = Graph::new();
        let f = Tensor::from_fn(&[1, 3, 2, 3], |i| [0.2, -0.4, 0.9][i / 6]);
        let mut mask = Tensor::full(&[1, 2, 3], 1.0);
        mask.data_mut()[2] = 0.0;
        mask.data_mut()[5] = 0.0;
        let fm = FeatureMap { features: g.constant(f), mask };
        let v = counts(&mut g, 1);
        let prep = dec.prepare(&mut g, &store, &fm, v);
        let st = dec.init_state(&mut g, &store, &prep);
        let (_, alpha, _) = dec.attention_step(&mut g, &store, &prep, st.hidden, st.coverage);
        let a = g.value(alpha).data();
        for (i, &x) in a.iter().enumerate() {
            let want = if i == 2 || i == 5 { 0.0 } else { 0.25 };
            assert!((x - want).abs() < 1e-12, "{i}: {x}");
        }
    }

    #[test]
    fn residual_telescopes_and_coverage_accumulates() {
        let (store, dec) = setup(true);
        let mut g = Graph::new();
        let fm = features(&mut g, 5, 2, 3, 4);
        let v = counts(&mut g, 2);
        let prep = dec.prepare(&mut g, &store, &fm, v);
        let mut st = dec.init_state(&mut g, &store, &prep);
        let v_sum: Vec<f64> = (0..2).map(|i| g.value(v).row(i).iter().sum()).collect();
        for t in 1..=12 {
            let out = dec.step(&mut g, &store, &prep, &mut st);
            st.prev = vec![3, 4];
            for i in 0..2 {
                let r: f64 = g.value(st.residual).row(i).iter().sum();
                assert!((r - (v_sum[i] - t as f64)).abs() < 1e-9);
                let cov: f64 = g.value(st.coverage).data()[i * 12..(i + 1) * 12].iter().sum();
                assert!((cov - t as f64).abs() < 1e-9);
                let p = softmax(g.value(out.refined).row(i));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_refinement_weights_leave_logits_unchanged() {
        let (store, dec) = setup(true);
        let mut g = Graph::new();
        let fm = features(&mut g, 6, 1, 2, 2);
        let v = counts(&mut g, 1);
        let prep = dec.prepare(&mut g, &store, &fm, v);
        for out in dec.teacher_forced(&mut g, &store, &prep, &[vec![3, 4, 2]]) {
            assert_eq!(g.value(out.preliminary), g.value(out.refined));
        }
    }

    #[test]
    fn teacher_forcing_yields_one_output_per_position_and_rows_match() {
        let (store, dec) = setup(true);
        let mut g = Graph::new();
        let mut r = rng_for(&[9]);
        let one: Vec<f64> = (0..3 * 4).map(|_| r.gen_range(0.0..1.0)).collect();
        let two = [one.clone(), one].concat();
        let fm = FeatureMap { features: g.constant(Tensor::new(&[2, 3, 2, 2], two)), mask: Tensor::full(&[2, 2, 2], 1.0) };
        let v = g.constant(Tensor::full(&[2, 5], 0.3));
        let prep = dec.prepare(&mut g, &store, &fm, v);
        let outs = dec.teacher_forced(&mut g, &store, &prep, &[vec![3, 4, 2], vec![3, 4, 2]]);
        assert_eq!(outs.len(), 3);
        for o in outs {
            let t = g.value(o.refined);
            assert_eq!(t.row(0), t.row(1));
        }
    }

    #[test]
    fn greedy_respects_max_len_and_is_deterministic() {
        let (store, dec) = setup(true);
        let run = |max_len: usize| {
            let mut g = Graph::new();
            let fm = features(&mut g, 8, 2, 2, 3);
            let v = counts(&mut g, 2);
            let prep = dec.prepare(&mut g, &store, &fm, v);
            dec.greedy(&mut g, &store, &prep, max_len)
        };
        for s in run(1) {
            assert_eq!(s.len(), 1);
        }
        let a = run(10);
        assert_eq!(a, run(10));
        for s in &a {
            assert!(!s.is_empty() && s.len() <= 10);
            assert!(s[..s.len() - 1].iter().all(|&t| t != 2));
        }
    }

    #[test]
    fn disabled_refinement_uses_static_counts() {
        let (store, dec) = setup(false);
        assert!(dec.refine_params().is_none());
        let mut g = Graph::new();
        let fm = features(&mut g, 2, 1, 2, 2);
        let v = counts(&mut g, 1);
        let prep = dec.prepare(&mut g, &store, &fm, v);
        let mut st = dec.init_state(&mut g, &store, &prep);
        let out = dec.step(&mut g, &store, &prep, &mut st);
        assert_eq!(g.value(out.refined), g.value(out.preliminary));
        assert_eq!(g.value(st.residual), g.value(v));
    }
}
