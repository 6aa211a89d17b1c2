//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse. Nodes that cannot reach a parameter are never
//! visited on the way back.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    AddBias(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    MaskSpatial { x: Var, mask: Tensor },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AvgPool2(Var),
    MaskedNorm { x: Var, gamma: Var, beta: Var, mask: Tensor, xhat: Tensor, inv_std: Vec<f64> },
    ConcatChannels(Vec<Var>),
    ChannelsLast(Var),
    MaskedMean { x: Var, mask: Tensor },
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    AddRowsBroadcast { x: Var, q: Var },
    MaskedSoftmax(Var),
    WeightedSum { alpha: Var, feats: Var },
    Patches { x: Var, k: usize },
    Softmax(Var),
    LogSoftmax(Var),
    NllPick { logp: Var, targets: Vec<usize>, weights: Vec<f64> },
    SumAll(Var),
    AddN(Vec<Var>),
    SumSpatial(Var),
    SmoothL1 { x: Var, target: Tensor, scale: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn nchw(t: &Tensor) -> (usize, usize, usize, usize) {
    assert_eq!(t.rank(), 4, "expected a rank-4 tensor, got {:?}", t.shape());
    (t.dim(0), t.dim(1), t.dim(2), t.dim(3))
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Numerically stable row-wise softmax of a plain slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_row(x, &mut out);
    out
}

/// Output columns `ox` whose input column `ox * stride + k - pad` lies in `0..w`.
fn valid_cols(k: usize, stride: usize, pad: usize, w: usize, wo: usize) -> std::ops::Range<usize> {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(wo) } else { 0 };
    lo..hi.max(lo)
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let (b, c, h, w) = nchw(x);
    let n = b * ho * wo;
    let mut cols = vec![0.0; c * kh * kw * n];
    let xd = x.data();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let oxs = valid_cols(kx, stride, pad, w, wo);
                for bi in 0..b {
                    let src = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in valid_cols(ky, stride, pad, h, ho) {
                        let iy = oy * stride + ky - pad;
                        let srow = &src[iy * w..(iy + 1) * w];
                        let base = (bi * ho + oy) * wo;
                        if oxs.is_empty() {
                            continue;
                        }
                        let ix0 = oxs.start * stride + kx - pad;
                        let d = &mut dst[base + oxs.start..base + oxs.end];
                        if stride == 1 {
                            d.copy_from_slice(&srow[ix0..ix0 + d.len()]);
                        } else {
                            d.iter_mut().enumerate().for_each(|(j, v)| *v = srow[ix0 + j * stride]);
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    shape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor {
    let (b, c, h, w) = shape;
    let n = b * ho * wo;
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    let xd = dx.data_mut();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                let oxs = valid_cols(kx, stride, pad, w, wo);
                if oxs.is_empty() {
                    continue;
                }
                for bi in 0..b {
                    let dst = &mut xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in valid_cols(ky, stride, pad, h, ho) {
                        let iy = oy * stride + ky - pad;
                        let base = (bi * ho + oy) * wo;
                        let ix0 = oxs.start * stride + kx - pad;
                        let s = &src[base + oxs.start..base + oxs.end];
                        let drow = &mut dst[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            drow[ix0..ix0 + s.len()].iter_mut().zip(s).for_each(|(d, v)| *d += v);
                        } else {
                            s.iter().enumerate().for_each(|(j, v)| drow[ix0 + j * stride] += v);
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of the current value of `v`, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Trainable leaf bound to a store entry; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape(), x.data().iter().map(|v| v * k).collect());
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, k), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// `x[..., n] + b[n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let (_, n) = xv.rows_cols();
        assert_eq!(bv.numel(), n, "bias length mismatch");
        let bd = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, v)| v + bd[i % n]).collect();
        let t = Tensor::new(xv.shape(), data);
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddBias(x, b), ng)
    }

    /// `x[..., k] · w[n, k]ᵀ + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k) = xv.rows_cols();
        assert_eq!(wv.rank(), 2);
        let n = wv.dim(0);
        assert_eq!(wv.dim(1), k, "linear: input width {k} vs weight {:?}", wv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            assert_eq!(bd.len(), n);
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bd).for_each(|(o, bb)| *o += bb);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape(), x.data().iter().map(|v| v.tanh()).collect());
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape(), x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect());
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape(), x.data().iter().map(|v| v.max(0.0)).collect());
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    /// Multiplies `x[b, c, h, w]` by `mask[b, h, w]`.
    pub fn mask_spatial(&mut self, x: Var, mask: &Tensor) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = nchw(xv);
        assert_eq!(mask.shape(), [b, h, w], "mask shape mismatch");
        let mut out = xv.data().to_vec();
        let md = mask.data();
        for bi in 0..b {
            let m = &md[bi * h * w..(bi + 1) * h * w];
            for ci in 0..c {
                let o = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                o.iter_mut().zip(m).for_each(|(v, mm)| *v *= mm);
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, c, h, w], out), Op::MaskSpatial { x, mask: mask.clone() }, ng)
    }

    /// 2-D convolution over NCHW input with square stride and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bsz, ci, h, wd) = nchw(xv);
        let (co, ci2, kh, kw) = nchw(wv);
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d input smaller than kernel");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let cols = im2col(xv, kh, kw, stride, pad, ho, wo);
        let n = bsz * ho * wo;
        let kk = ci * kh * kw;
        let mut ymat = vec![0.0; co * n];
        gemm(co, kk, n, wv.data(), false, &cols, false, &mut ymat, false);
        let bias = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; bsz * co * ho * wo];
        let hw = ho * wo;
        for o in 0..co {
            let bo = bias.as_ref().map_or(0.0, |bb| bb[o]);
            for bi in 0..bsz {
                let src = &ymat[o * n + bi * hw..o * n + (bi + 1) * hw];
                let dst = &mut out[(bi * co + o) * hw..(bi * co + o + 1) * hw];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + bo);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(&[bsz, co, ho, wo], out), Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// 2×2 average pooling, stride 2, ceil mode; out-of-range cells count as zero.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = nchw(xv);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; b * c * ho * wo];
        let xd = xv.data();
        for bc in 0..b * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / 2) * wo + xx / 2] += 0.25 * src[y * w + xx];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, c, ho, wo], out), Op::AvgPool2(x), ng)
    }

    /// Per-sample normalization over all channels at the valid positions of
    /// `mask[b, h, w]`, followed by a per-channel affine map. Masked-out
    /// positions are set to zero.
    pub fn masked_norm(&mut self, x: Var, gamma: Var, beta: Var, mask: &Tensor, eps: f64) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = nchw(xv);
        assert_eq!(mask.shape(), [b, h, w]);
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        assert_eq!(gd.len(), c);
        assert_eq!(bd.len(), c);
        let xd = xv.data();
        let md = mask.data();
        let hw = h * w;
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; b];
        for bi in 0..b {
            let m = &md[bi * hw..(bi + 1) * hw];
            let valid = m.iter().filter(|v| **v > 0.5).count();
            if valid == 0 {
                continue;
            }
            let n = (valid * c) as f64;
            let mut sum = 0.0;
            for ci in 0..c {
                let xs = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                sum += xs.iter().zip(m).filter(|(_, mm)| **mm > 0.5).map(|(v, _)| v).sum::<f64>();
            }
            let mean = sum / n;
            let mut var = 0.0;
            for ci in 0..c {
                let xs = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                var += xs
                    .iter()
                    .zip(m)
                    .filter(|(_, mm)| **mm > 0.5)
                    .map(|(v, _)| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            let is = 1.0 / (var / n + eps).sqrt();
            inv_std[bi] = is;
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for p in 0..hw {
                    if m[p] > 0.5 {
                        let xh = (xd[off + p] - mean) * is;
                        xhat[off + p] = xh;
                        out[off + p] = gd[ci] * xh + bd[ci];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::MaskedNorm {
            x,
            gamma,
            beta,
            mask: mask.clone(),
            xhat: Tensor::new(&[b, c, h, w], xhat),
            inv_std,
        };
        self.push(Tensor::new(&[b, c, h, w], out), op, ng)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (b, _, h, w) = nchw(self.value(xs[0]));
        let cs: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let (bb, c, hh, ww) = nchw(self.value(v));
                assert_eq!((bb, hh, ww), (b, h, w), "concat_channels shape mismatch");
                c
            })
            .collect();
        let ctot: usize = cs.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * ctot * hw);
        for bi in 0..b {
            for (&v, &c) in xs.iter().zip(&cs) {
                out.extend_from_slice(&self.value(v).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(Tensor::new(&[b, ctot, h, w], out), Op::ConcatChannels(xs.to_vec()), ng)
    }

    /// `[b, c, h, w]` → `[b, h·w, c]`.
    pub fn channels_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = nchw(xv);
        let hw = h * w;
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..hw {
                    out[(bi * hw + p) * c + ci] = xd[(bi * c + ci) * hw + p];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, hw, c], out), Op::ChannelsLast(x), ng)
    }

    /// Mean of `x[b, p, :]` over positions with `mask[b, p] = 1`.
    pub fn masked_mean(&mut self, x: Var, mask: &Tensor) -> Var {
        let xv = self.value(x);
        let (b, p, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert_eq!(mask.shape(), [b, p]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let m = &mask.data()[bi * p..(bi + 1) * p];
            let cnt: f64 = m.iter().sum::<f64>().max(1.0);
            for pi in 0..p {
                if m[pi] == 0.0 {
                    continue;
                }
                let row = &xv.data()[(bi * p + pi) * d..(bi * p + pi + 1) * d];
                for (o, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += m[pi] * v / cnt;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, d], out), Op::MaskedMean { x, mask: mask.clone() }, ng)
    }

    /// Rows of a `[v, d]` table selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.dim(1);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < tv.dim(0), "gather index {i} out of range");
            out.extend_from_slice(tv.row(i));
        }
        let ng = self.ng(table);
        self.push(Tensor::new(&[ids.len(), d], out), Op::GatherRows { table, ids: ids.to_vec() }, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k1) = av.rows_cols();
        let (m2, k2) = bv.rows_cols();
        assert_eq!(m, m2);
        let mut out = Vec::with_capacity(m * (k1 + k2));
        for r in 0..m {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, k1 + k2], out), Op::ConcatCols(a, b), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let (m, k) = xv.rows_cols();
        assert!(start < end && end <= k);
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[m, end - start], out), Op::SliceCols { x, start }, ng)
    }

    /// `x[b, p, a] + q[b, a]`.
    pub fn add_rows_broadcast(&mut self, x: Var, q: Var) -> Var {
        let (xv, qv) = (self.value(x), self.value(q));
        let (b, p, a) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert_eq!(qv.shape(), [b, a]);
        let mut out = xv.data().to_vec();
        for bi in 0..b {
            let qr = qv.row(bi);
            for pi in 0..p {
                let o = &mut out[(bi * p + pi) * a..(bi * p + pi + 1) * a];
                o.iter_mut().zip(qr).for_each(|(v, qq)| *v += qq);
            }
        }
        let ng = self.ng(x) || self.ng(q);
        self.push(Tensor::new(&[b, p, a], out), Op::AddRowsBroadcast { x, q }, ng)
    }

    /// Row-wise softmax of `x[b, p]` restricted to `mask[b, p] = 1`; masked
    /// entries are exactly zero. Every row needs at least one valid entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Var {
        let xv = self.value(x);
        let (b, p) = (xv.dim(0), xv.dim(1));
        assert_eq!(mask.shape(), [b, p]);
        let mut out = vec![0.0; b * p];
        for bi in 0..b {
            let xr = xv.row(bi);
            let m = &mask.data()[bi * p..(bi + 1) * p];
            let max = xr
                .iter()
                .zip(m)
                .filter(|(_, mm)| **mm > 0.5)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "masked_softmax row {bi} has no valid entries");
            let o = &mut out[bi * p..(bi + 1) * p];
            let mut z = 0.0;
            for i in 0..p {
                if m[i] > 0.5 {
                    o[i] = (xr[i] - max).exp();
                    z += o[i];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, p], out), Op::MaskedSoftmax(x), ng)
    }

    /// `Σ_p alpha[b, p] · feats[b, p, :]`.
    pub fn weighted_sum(&mut self, alpha: Var, feats: Var) -> Var {
        let (av, fv) = (self.value(alpha), self.value(feats));
        let (b, p, d) = (fv.dim(0), fv.dim(1), fv.dim(2));
        assert_eq!(av.shape(), [b, p]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for pi in 0..p {
                let a = av.data()[bi * p + pi];
                if a == 0.0 {
                    continue;
                }
                let f = &fv.data()[(bi * p + pi) * d..(bi * p + pi + 1) * d];
                o.iter_mut().zip(f).for_each(|(v, ff)| *v += a * ff);
            }
        }
        let ng = self.ng(alpha) || self.ng(feats);
        self.push(Tensor::new(&[b, d], out), Op::WeightedSum { alpha, feats }, ng)
    }

    /// Zero-padded `k×k` neighbourhoods of `x[b, h, w]` (odd `k`):
    /// `[b, h·w, k·k]`.
    pub fn patches(&mut self, x: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "patch size must be odd");
        let xv = self.value(x);
        let (b, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let r = (k / 2) as isize;
        let mut out = vec![0.0; b * h * w * k * k];
        for bi in 0..b {
            let src = &xv.data()[bi * h * w..(bi + 1) * h * w];
            for y in 0..h {
                for x0 in 0..w {
                    let base = ((bi * h + y) * w + x0) * k * k;
                    for dy in 0..k {
                        let iy = y as isize + dy as isize - r;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = x0 as isize + dx as isize - r;
                            if ix >= 0 && ix < w as isize {
                                out[base + dy * k + dx] = src[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, h * w, k * k], out), Op::Patches { x, k }, ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.rows_cols();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            softmax_row(xv.row(r), &mut out[r * n..(r + 1) * n]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(xv.shape(), out), Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.rows_cols();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = xv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out[r * n..(r + 1) * n].iter_mut().zip(row).for_each(|(o, v)| *o = v - lse);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(xv.shape(), out), Op::LogSoftmax(x), ng)
    }

    /// `−Σ_m weights[m] · logp[m, targets[m]]` as a scalar.
    pub fn nll_pick(&mut self, logp: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logp);
        let (m, n) = lv.rows_cols();
        assert_eq!(targets.len(), m);
        assert_eq!(weights.len(), m);
        let mut s = 0.0;
        for r in 0..m {
            if weights[r] != 0.0 {
                assert!(targets[r] < n, "target {} out of range", targets[r]);
                s -= weights[r] * lv.row(r)[targets[r]];
            }
        }
        let ng = self.ng(logp);
        let op = Op::NllPick { logp, targets: targets.to_vec(), weights: weights.to_vec() };
        self.push(Tensor::scalar(s), op, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut acc = self.value(xs[0]).clone();
        for &v in &xs[1..] {
            acc.add_assign(self.value(v));
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(acc, Op::AddN(xs.to_vec()), ng)
    }

    /// `[b, c, h, w]` → `[b, c]` by summing over space.
    pub fn sum_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = nchw(xv);
        let hw = h * w;
        let out = (0..b * c).map(|i| xv.data()[i * hw..(i + 1) * hw].iter().sum()).collect();
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, c], out), Op::SumSpatial(x), ng)
    }

    /// `scale · Σ smooth_l1(x − target)` as a scalar.
    pub fn smooth_l1(&mut self, x: Var, target: &Tensor, scale: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape());
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, t)| {
                let d = a - t;
                if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            })
            .sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(scale * s), Op::SmoothL1 { x, target: target.clone(), scale }, ng)
    }

    /// Reverse pass from a scalar `loss`; returns per-parameter gradients.
    pub fn backward(&self, loss: Var, num_params: usize) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0]));
        let mut out = Gradients::empty(num_params);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.set(*id, g.clone()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let neg = Tensor::new(g.shape(), gd.iter().map(|v| -v).collect());
                self.acc(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(g.shape(), d));
                }
                if self.ng(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(g.shape(), d));
                }
            }
            Op::Scale(a, k) => {
                let d = gd.iter().map(|v| v * k).collect();
                self.acc(grads, *a, Tensor::new(g.shape(), d));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, g.clone().reshape(&shape));
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.acc(grads, *b, Tensor::new(self.shape(*b), db));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k) = xv.rows_cols();
                let n = wv.dim(0);
                if self.ng(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, wv.data(), false, &mut dx, false);
                    self.acc(grads, *x, Tensor::new(xv.shape(), dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; n * k];
                    gemm(n, m, k, gd, true, xv.data(), false, &mut dw, false);
                    self.acc(grads, *w, Tensor::new(wv.shape(), dw));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![0.0; n];
                        for row in gd.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        self.acc(grads, *b, Tensor::new(&[n], db));
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.acc(grads, *a, Tensor::new(g.shape(), d));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc(grads, *a, Tensor::new(g.shape(), d));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.acc(grads, *a, Tensor::new(g.shape(), d));
            }
            Op::MaskSpatial { x, mask } => {
                let (b, c, h, w) = nchw(g);
                let mut d = gd.to_vec();
                let md = mask.data();
                for bi in 0..b {
                    let m = &md[bi * h * w..(bi + 1) * h * w];
                    for ci in 0..c {
                        let o = &mut d[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        o.iter_mut().zip(m).for_each(|(v, mm)| *v *= mm);
                    }
                }
                self.acc(grads, *x, Tensor::new(g.shape(), d));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, ci, _, _) = nchw(xv);
                let (co, _, kh, kw) = nchw(wv);
                let (_, _, ho, wo) = nchw(g);
                let hw = ho * wo;
                let n = bsz * hw;
                let kk = ci * kh * kw;
                let mut dymat = vec![0.0; co * n];
                for o in 0..co {
                    for bi in 0..bsz {
                        dymat[o * n + bi * hw..o * n + (bi + 1) * hw]
                            .copy_from_slice(&gd[(bi * co + o) * hw..(bi * co + o + 1) * hw]);
                    }
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let db = (0..co).map(|o| dymat[o * n..(o + 1) * n].iter().sum()).collect();
                        self.acc(grads, *b, Tensor::new(&[co], db));
                    }
                }
                if self.ng(*w) {
                    let cols = im2col(xv, kh, kw, *stride, *pad, ho, wo);
                    let mut dw = vec![0.0; co * kk];
                    gemm(co, n, kk, &dymat, false, &cols, true, &mut dw, false);
                    self.acc(grads, *w, Tensor::new(wv.shape(), dw));
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; kk * n];
                    gemm(kk, co, n, wv.data(), true, &dymat, false, &mut dcols, false);
                    let dx = col2im(&dcols, nchw(xv), kh, kw, *stride, *pad, ho, wo);
                    self.acc(grads, *x, dx);
                }
            }
            Op::AvgPool2(x) => {
                let (b, c, h, w) = nchw(self.value(*x));
                let (_, _, ho, wo) = nchw(g);
                let mut d = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    let src = &gd[bc * ho * wo..(bc + 1) * ho * wo];
                    let dst = &mut d[bc * h * w..(bc + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = 0.25 * src[(y / 2) * wo + xx / 2];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&[b, c, h, w], d));
            }
            Op::MaskedNorm { x, gamma, beta, mask, xhat, inv_std } => {
                let (b, c, h, w) = nchw(g);
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let md = mask.data();
                let xh = xhat.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; b * c * hw];
                for bi in 0..b {
                    let m = &md[bi * hw..(bi + 1) * hw];
                    let valid = m.iter().filter(|v| **v > 0.5).count();
                    if valid == 0 {
                        continue;
                    }
                    let n = (valid * c) as f64;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for p in 0..hw {
                            if m[p] > 0.5 {
                                let dy = gd[off + p];
                                dgamma[ci] += dy * xh[off + p];
                                dbeta[ci] += dy;
                                let dxh = dy * gam[ci];
                                s1 += dxh;
                                s2 += dxh * xh[off + p];
                            }
                        }
                    }
                    let k = inv_std[bi] / n;
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for p in 0..hw {
                            if m[p] > 0.5 {
                                let dxh = gd[off + p] * gam[ci];
                                dx[off + p] = k * (n * dxh - s1 - xh[off + p] * s2);
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&[b, c, h, w], dx));
                self.acc(grads, *gamma, Tensor::new(&[c], dgamma));
                self.acc(grads, *beta, Tensor::new(&[c], dbeta));
            }
            Op::ConcatChannels(xs) => {
                let (b, ctot, h, w) = nchw(g);
                let hw = h * w;
                let mut off = 0;
                for &v in xs {
                    let c = self.value(v).dim(1);
                    if self.ng(v) {
                        let mut d = Vec::with_capacity(b * c * hw);
                        for bi in 0..b {
                            let start = (bi * ctot + off) * hw;
                            d.extend_from_slice(&gd[start..start + c * hw]);
                        }
                        self.acc(grads, v, Tensor::new(&[b, c, h, w], d));
                    }
                    off += c;
                }
            }
            Op::ChannelsLast(x) => {
                let shape = self.shape(*x).to_vec();
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let hw = h * w;
                let mut d = vec![0.0; gd.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            d[(bi * c + ci) * hw + p] = gd[(bi * hw + p) * c + ci];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&shape, d));
            }
            Op::MaskedMean { x, mask } => {
                let shape = self.shape(*x).to_vec();
                let (b, p, d) = (shape[0], shape[1], shape[2]);
                let mut dx = vec![0.0; b * p * d];
                for bi in 0..b {
                    let m = &mask.data()[bi * p..(bi + 1) * p];
                    let cnt: f64 = m.iter().sum::<f64>().max(1.0);
                    for pi in 0..p {
                        if m[pi] == 0.0 {
                            continue;
                        }
                        let dst = &mut dx[(bi * p + pi) * d..(bi * p + pi + 1) * d];
                        for (o, gg) in dst.iter_mut().zip(&gd[bi * d..(bi + 1) * d]) {
                            *o = m[pi] * gg / cnt;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&shape, dx));
            }
            Op::GatherRows { table, ids } => {
                let shape = self.shape(*table).to_vec();
                let d = shape[1];
                let mut dt = vec![0.0; shape[0] * d];
                for (r, &i) in ids.iter().enumerate() {
                    dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&gd[r * d..(r + 1) * d])
                        .for_each(|(o, v)| *o += v);
                }
                self.acc(grads, *table, Tensor::new(&shape, dt));
            }
            Op::ConcatCols(a, b) => {
                let (m, k1) = self.value(*a).rows_cols();
                let (_, k2) = self.value(*b).rows_cols();
                let k = k1 + k2;
                let mut da = Vec::with_capacity(m * k1);
                let mut db = Vec::with_capacity(m * k2);
                for r in 0..m {
                    da.extend_from_slice(&gd[r * k..r * k + k1]);
                    db.extend_from_slice(&gd[r * k + k1..(r + 1) * k]);
                }
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                self.acc(grads, *a, Tensor::new(&sa, da));
                self.acc(grads, *b, Tensor::new(&sb, db));
            }
            Op::SliceCols { x, start } => {
                let shape = self.shape(*x).to_vec();
                let (m, k) = self.value(*x).rows_cols();
                let (_, width) = g.rows_cols();
                let mut d = vec![0.0; m * k];
                for r in 0..m {
                    d[r * k + start..r * k + start + width].copy_from_slice(&gd[r * width..(r + 1) * width]);
                }
                self.acc(grads, *x, Tensor::new(&shape, d));
            }
            Op::AddRowsBroadcast { x, q } => {
                self.acc(grads, *x, g.clone());
                if self.ng(*q) {
                    let (b, p, a) = (g.dim(0), g.dim(1), g.dim(2));
                    let mut dq = vec![0.0; b * a];
                    for bi in 0..b {
                        for pi in 0..p {
                            dq[bi * a..(bi + 1) * a]
                                .iter_mut()
                                .zip(&gd[(bi * p + pi) * a..(bi * p + pi + 1) * a])
                                .for_each(|(o, v)| *o += v);
                        }
                    }
                    self.acc(grads, *q, Tensor::new(&[b, a], dq));
                }
            }
            Op::MaskedSoftmax(x) | Op::Softmax(x) => {
                let y = &node.value;
                let (m, n) = y.rows_cols();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        d[r * n + i] = yr[i] * (gr[i] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape(), d));
            }
            Op::WeightedSum { alpha, feats } => {
                let (av, fv) = (self.value(*alpha), self.value(*feats));
                let (b, p, dd) = (fv.dim(0), fv.dim(1), fv.dim(2));
                if self.ng(*alpha) {
                    let mut da = vec![0.0; b * p];
                    for bi in 0..b {
                        let gr = &gd[bi * dd..(bi + 1) * dd];
                        for pi in 0..p {
                            let f = &fv.data()[(bi * p + pi) * dd..(bi * p + pi + 1) * dd];
                            da[bi * p + pi] = f.iter().zip(gr).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.acc(grads, *alpha, Tensor::new(&[b, p], da));
                }
                if self.ng(*feats) {
                    let mut df = vec![0.0; b * p * dd];
                    for bi in 0..b {
                        let gr = &gd[bi * dd..(bi + 1) * dd];
                        for pi in 0..p {
                            let a = av.data()[bi * p + pi];
                            df[(bi * p + pi) * dd..(bi * p + pi + 1) * dd]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(o, v)| *o = a * v);
                        }
                    }
                    self.acc(grads, *feats, Tensor::new(&[b, p, dd], df));
                }
            }
            Op::Patches { x, k } => {
                let k = *k;
                let shape = self.shape(*x).to_vec();
                let (b, h, w) = (shape[0], shape[1], shape[2]);
                let r = (k / 2) as isize;
                let mut d = vec![0.0; b * h * w];
                for bi in 0..b {
                    for y in 0..h {
                        for x0 in 0..w {
                            let base = ((bi * h + y) * w + x0) * k * k;
                            for dy in 0..k {
                                let iy = y as isize + dy as isize - r;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..k {
                                    let ix = x0 as isize + dx as isize - r;
                                    if ix >= 0 && ix < w as isize {
                                        d[(bi * h + iy as usize) * w + ix as usize] += gd[base + dy * k + dx];
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&shape, d));
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let (m, n) = y.rows_cols();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = &gd[r * n..(r + 1) * n];
                    let s: f64 = gr.iter().sum();
                    for i in 0..n {
                        d[r * n + i] = gr[i] - yr[i].exp() * s;
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape(), d));
            }
            Op::NllPick { logp, targets, weights } => {
                let lv = self.value(*logp);
                let (m, n) = lv.rows_cols();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    if weights[r] != 0.0 {
                        d[r * n + targets[r]] = -weights[r] * gd[0];
                    }
                }
                self.acc(grads, *logp, Tensor::new(lv.shape(), d));
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::full(&shape, gd[0]));
            }
            Op::AddN(xs) => {
                for &v in xs {
                    self.acc(grads, v, g.clone());
                }
            }
            Op::SumSpatial(x) => {
                let shape = self.shape(*x).to_vec();
                let hw = shape[2] * shape[3];
                let d = (0..gd.len() * hw).map(|i| gd[i / hw]).collect();
                self.acc(grads, *x, Tensor::new(&shape, d));
            }
            Op::SmoothL1 { x, target, scale } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, t)| gd[0] * scale * (a - t).clamp(-1.0, 1.0))
                    .collect();
                self.acc(grads, *x, Tensor::new(xv.shape(), d));
            }
        }
    }
}
