//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op is evaluated eagerly when it is recorded. Work that scales with
//! the batch runs one sample per task through [`crate::par`], and
//! per-sample parameter gradients are summed in sample order. Results are
//! therefore identical for any thread count.

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::par;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Parameters and buffer prefix of one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnRef {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Buffers live at `{name}.running_mean` and `{name}.running_var`.
    pub name: String,
}

/// Batch statistics produced by a training-mode batch-norm, waiting to be
/// folded into the running buffers.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f32>,
    /// Unbiased variance.
    pub var: Vec<f32>,
}

enum Op {
    Leaf,
    Conv { x: NodeId, w: ParamId, b: Option<ParamId>, geom: ConvGeom },
    BatchNorm { x: NodeId, gamma: ParamId, beta: ParamId, xhat: Vec<f32>, invstd: Vec<f32>, training: bool },
    Relu { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    Upsample2 { x: NodeId },
    Concat { parts: Vec<NodeId> },
    Add { a: NodeId, b: NodeId },
    ScaledSigmoid { x: NodeId, scale: f32 },
    Softmax { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of leaf nodes that were created with
/// [`Graph::leaf_with_grad`].
pub struct LeafGrads {
    grads: Vec<Option<Vec<f32>>>,
}

impl LeafGrads {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bn_updates: Vec<BnUpdate>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input. No gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn leaf_with_grad(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.leaf(v)
    }

    pub fn conv2d(&mut self, store: &ParamStore, x: NodeId, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wt = &store.get(w).value;
        let [cout, cin, k, k2] = wt.shape();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(cin, xv.c(), "conv {} expects {} input channels, got {}", store.get(w).name, cin, xv.c());
        let geom = ConvGeom { cin, cout, h: xv.h(), w: xv.w(), k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let bias = b.map(|b| store.get(b).value.data());
        let outs = par::map_range(xv.n(), |s| kernels::conv_forward(xv.sample(s), wt.data(), bias, &geom));
        let value = Tensor::from_vec([xv.n(), cout, ho, wo], outs.concat()).expect("conv output shape");
        self.push(value, Op::Conv { x, w, b, geom }, true)
    }

    /// Batch normalisation. In training mode the batch statistics are used
    /// and queued in [`Graph::bn_updates`]; otherwise the running buffers.
    pub fn batch_norm(&mut self, store: &ParamStore, x: NodeId, bn: &BnRef, training: bool) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        let m = n * hw;
        let (mean, var_biased): (Vec<f32>, Vec<f32>) = if training {
            (0..c)
                .map(|ci| {
                    let mut s = 0.0f64;
                    let mut s2 = 0.0f64;
                    for ni in 0..n {
                        for &v in xv.plane(ni, ci) {
                            s += v as f64;
                            s2 += (v as f64) * (v as f64);
                        }
                    }
                    let mu = s / m as f64;
                    ((mu as f32), ((s2 / m as f64 - mu * mu).max(0.0)) as f32)
                })
                .unzip()
        } else {
            (
                store.buffer(&format!("{}.running_mean", bn.name)).to_vec(),
                store.buffer(&format!("{}.running_var", bn.name)).to_vec(),
            )
        };
        let invstd: Vec<f32> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = store.get(bn.gamma).value.data();
        let beta = store.get(bn.beta).value.data();
        let mut xhat = vec![0.0f32; xv.numel()];
        let mut out = vec![0.0f32; xv.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for (i, &v) in xv.plane(ni, ci).iter().enumerate() {
                    let xh = (v - mean[ci]) * invstd[ci];
                    xhat[off + i] = xh;
                    out[off + i] = gamma[ci] * xh + beta[ci];
                }
            }
        }
        if training {
            let corr = if m > 1 { m as f32 / (m - 1) as f32 } else { 1.0 };
            self.bn_updates.push(BnUpdate {
                name: bn.name.clone(),
                mean,
                var: var_biased.iter().map(|v| v * corr).collect(),
            });
        }
        let value = Tensor::from_vec([n, c, h, w], out).expect("bn shape");
        let op = Op::BatchNorm { x, gamma: bn.gamma, beta: bn.beta, xhat, invstd, training };
        self.push(value, op, true)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        // NaN passes through so a diverged network is reported, not masked.
        v.data_mut().iter_mut().for_each(|a| {
            if *a < 0.0 {
                *a = 0.0
            }
        });
        let rg = self.rg(x);
        self.push(v, Op::Relu { x }, rg)
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let res = par::map_range(n, |s| kernels::maxpool_forward(xv.sample(s), c, h, w, k, stride, pad));
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for (o, a) in res {
            out.extend(o);
            argmax.extend(a);
        }
        let value = Tensor::from_vec([n, c, ho, wo], out).expect("pool shape");
        let rg = self.rg(x);
        self.push(value, Op::MaxPool { x, argmax }, rg)
    }

    /// Bilinear 2x upsampling with half-pixel centres.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let outs = par::map_range(n, |s| kernels::upsample2_forward(xv.sample(s), c, h, w));
        let value = Tensor::from_vec([n, c, 2 * h, 2 * w], outs.concat()).expect("upsample shape");
        let rg = self.rg(x);
        self.push(value, Op::Upsample2 { x }, rg)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let first = self.nodes[parts[0].0].value.shape();
        let [n, _, h, w] = first;
        let mut c_total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat shape mismatch {s:?} vs {first:?}");
            c_total += s[1];
        }
        let mut out = Vec::with_capacity(n * c_total * h * w);
        for ni in 0..n {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.sample(ni));
            }
        }
        let value = Tensor::from_vec([n, c_total, h, w], out).expect("concat shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::Concat { parts: parts.to_vec() }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let mut v = av.clone();
        v.data_mut().iter_mut().zip(bv.data()).for_each(|(x, y)| *x += y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add { a, b }, rg)
    }

    /// `scale * sigmoid(x)`, kept strictly inside `(0, scale)` even where
    /// the `f32` sigmoid saturates.
    pub fn scaled_sigmoid(&mut self, x: NodeId, scale: f32) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        let hi = f32::from_bits(scale.to_bits() - 1);
        let lo = f32::MIN_POSITIVE;
        v.data_mut()
            .iter_mut()
            .for_each(|a| *a = (scale / (1.0 + (-*a).exp())).clamp(lo, hi));
        let rg = self.rg(x);
        self.push(v, Op::ScaledSigmoid { x, scale }, rg)
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        let [n, c, h, w] = v.shape();
        let hw = h * w;
        let data = v.data_mut();
        for ni in 0..n {
            let base = ni * c * hw;
            for p in 0..hw {
                let mut mx = f32::NEG_INFINITY;
                for ci in 0..c {
                    mx = mx.max(data[base + ci * hw + p]);
                }
                let mut s = 0.0;
                for ci in 0..c {
                    let e = (data[base + ci * hw + p] - mx).exp();
                    data[base + ci * hw + p] = e;
                    s += e;
                }
                for ci in 0..c {
                    data[base + ci * hw + p] /= s;
                }
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::Softmax { x }, rg)
    }

    /// Back-propagates the seeded output gradients. Parameter gradients are
    /// accumulated into `store`; gradients of `leaf_with_grad` inputs are
    /// returned.
    pub fn backward(&self, store: &mut ParamStore, seeds: &[(NodeId, &[f32])]) -> LeafGrads {
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.len(), self.nodes[id.0].value.numel(), "seed gradient size");
            accumulate(&mut grads[id.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(node, &gout, &mut grads, store);
        }
        LeafGrads { grads }
    }

    fn backward_node(&self, node: &Node, gout: &[f32], grads: &mut [Option<Vec<f32>>], store: &mut ParamStore) {
        let shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let xv = &self.nodes[x.0].value;
                let need_dx = self.rg(*x);
                let wdata = store.get(*w).value.data();
                let out_len = node.value.sample_len();
                let parts = par::map_range(xv.n(), |s| {
                    kernels::conv_backward(xv.sample(s), wdata, &gout[s * out_len..(s + 1) * out_len], geom, need_dx)
                });
                let mut dx = if need_dx { Vec::with_capacity(xv.numel()) } else { Vec::new() };
                let mut dw = vec![0.0f32; store.get(*w).grad.len()];
                let mut db = vec![0.0f32; geom.cout];
                for (dxs, dws, dbs) in parts {
                    dx.extend(dxs);
                    add_into(&mut dw, &dws);
                    add_into(&mut db, &dbs);
                }
                add_into(&mut store.get_mut(*w).grad, &dw);
                if let Some(b) = b {
                    add_into(&mut store.get_mut(*b).grad, &db);
                }
                if need_dx {
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, training } => {
                let [n, c, h, w] = shape;
                let hw = h * w;
                let m = (n * hw) as f32;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        for k in off..off + hw {
                            sum_dy[ci] += gout[k] as f64;
                            sum_dy_xhat[ci] += (gout[k] * xhat[k]) as f64;
                        }
                    }
                }
                let gvals = store.get(*gamma).value.data().to_vec();
                add_into(&mut store.get_mut(*gamma).grad, &sum_dy_xhat.iter().map(|&v| v as f32).collect::<Vec<_>>());
                add_into(&mut store.get_mut(*beta).grad, &sum_dy.iter().map(|&v| v as f32).collect::<Vec<_>>());
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; gout.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            let scale = gvals[ci] * invstd[ci];
                            if *training {
                                let a = sum_dy[ci] as f32 / m;
                                let b = sum_dy_xhat[ci] as f32 / m;
                                for k in off..off + hw {
                                    dx[k] = scale * (gout[k] - a - xhat[k] * b);
                                }
                            } else {
                                for k in off..off + hw {
                                    dx[k] = scale * gout[k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Relu { x } => {
                let dx: Vec<f32> = gout
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::MaxPool { x, argmax } => {
                let xv = &self.nodes[x.0].value;
                let in_len = xv.sample_len();
                let out_len = node.value.sample_len();
                let mut dx = vec![0.0f32; xv.numel()];
                for (o, (&g, &a)) in gout.iter().zip(argmax).enumerate() {
                    let s = o / out_len;
                    dx[s * in_len + a as usize] += g;
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Upsample2 { x } => {
                let [n, c, h, w] = self.nodes[x.0].value.shape();
                let out_len = node.value.sample_len();
                let parts = par::map_range(n, |s| kernels::upsample2_backward(&gout[s * out_len..(s + 1) * out_len], c, h, w));
                accumulate(&mut grads[x.0], &parts.concat());
            }
            Op::Concat { parts } => {
                let [n, _, h, w] = shape;
                let hw = h * w;
                let total = node.value.sample_len();
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.c();
                    if self.rg(*p) {
                        let mut dp = Vec::with_capacity(n * pc * hw);
                        for ni in 0..n {
                            let start = ni * total + offset * hw;
                            dp.extend_from_slice(&gout[start..start + pc * hw]);
                        }
                        accumulate(&mut grads[p.0], &dp);
                    }
                    offset += pc;
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], gout);
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], gout);
                }
            }
            Op::ScaledSigmoid { x, scale } => {
                let dx: Vec<f32> = gout
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * y * (1.0 - y / scale))
                    .collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Softmax { x } => {
                let [n, c, h, w] = shape;
                let hw = h * w;
                let y = node.value.data();
                let mut dx = vec![0.0f32; y.len()];
                for ni in 0..n {
                    let base = ni * c * hw;
                    for p in 0..hw {
                        let dot: f32 = (0..c).map(|ci| gout[base + ci * hw + p] * y[base + ci * hw + p]).sum();
                        for ci in 0..c {
                            let k = base + ci * hw + p;
                            dx[k] = y[k] * (gout[k] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], &dx);
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: &[f32]) {
    match slot {
        Some(v) => add_into(v, g),
        None => *slot = Some(g.to_vec()),
    }
}

/// Folds queued batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let rm = store.buffer_mut(&format!("{}.running_mean", u.name));
        rm.iter_mut().zip(&u.mean).for_each(|(r, &m)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
        let rv = store.buffer_mut(&format!("{}.running_var", u.name));
        rv.iter_mut().zip(&u.var).for_each(|(r, &v)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
    }
}
