//! Reverse-mode automatic differentiation on dynamic-dimension arrays.
//!
//! A [`Graph`] is a Wengert list built eagerly: every builder method computes
//! the forward value immediately and records the operation. [`Graph::backward`]
//! walks the list once in reverse, accumulating gradients into node slots and,
//! for parameter nodes, into the owning [`ParamStore`]. Children always have
//! smaller indices than parents, so a single reverse pass is exact.
//!
//! Convolution is im2col + GEMM through the dtype-dispatched kernel in
//! [`crate::dtype::Scalar`], which keeps the whole engine generic over
//! f32/f64 — training runs at f32, gradient verification at f64 on the same
//! code path. No external ML framework dependencies.

use crate::dtype::Scalar;
use crate::{Error, Result};
use ndarray::{ArrayD, Axis, Dimension, IxDyn};
use std::collections::BTreeMap;

// ── Parameter storage ──────────────────────────────────────────────────────

/// Handle to a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// One named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: ArrayD<S>,
    pub grad: ArrayD<S>,
}

/// Flat registry of all trainable tensors, addressed by stable ids and
/// hierarchical dotted names (e.g. `generator.enc0.w`).
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
    by_name: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    /// Add a tensor under a unique dotted name.
    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        let grad = ArrayD::zeros(value.raw_dim());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, pid: ParamId) -> &str {
        &self.params[pid.0].name
    }

    pub fn value(&self, pid: ParamId) -> &ArrayD<S> {
        &self.params[pid.0].value
    }

    pub fn value_mut(&mut self, pid: ParamId) -> &mut ArrayD<S> {
        &mut self.params[pid.0].value
    }

    pub fn grad(&self, pid: ParamId) -> &ArrayD<S> {
        &self.params[pid.0].grad
    }

    pub fn zero_all_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    /// Ids of every parameter whose name starts with `prefix`, in name order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.by_name
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, &i)| ParamId(i))
            .collect()
    }

    /// Total element count of parameters under `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix).iter().map(|&pid| self.value(pid).len()).sum()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }
}

// ── Optimizer ──────────────────────────────────────────────────────────────

/// Adaptive-moment optimizer over a fixed subset of parameters.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub(crate) pids: Vec<ParamId>,
    pub(crate) m: Vec<ArrayD<S>>,
    pub(crate) v: Vec<ArrayD<S>>,
    pub(crate) t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> Adam<S> {
    /// Standard adversarial-training betas (0.5, 0.999).
    pub fn new(store: &ParamStore<S>, pids: Vec<ParamId>) -> Self {
        let m = pids.iter().map(|&p| ArrayD::zeros(store.value(p).raw_dim())).collect();
        let v = pids.iter().map(|&p| ArrayD::zeros(store.value(p).raw_dim())).collect();
        Adam { pids, m, v, t: 0, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }

    pub fn pids(&self) -> &[ParamId] {
        &self.pids
    }

    /// One update from the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) {
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let corr1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_s = S::from_f64(lr);
        let eps = S::from_f64(self.eps);
        for (slot, &pid) in self.pids.iter().enumerate() {
            let grad = store.grad(pid).clone();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            ndarray::Zip::from(&mut *m).and(&grad).for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
            ndarray::Zip::from(&mut *v)
                .and(&grad)
                .for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            let value = store.value_mut(pid);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let m_hat = m / corr1;
                let v_hat = v / corr2;
                *p = *p - lr_s * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

// ── Graph ──────────────────────────────────────────────────────────────────

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    /// Constant input; gradients stop here.
    Leaf,
    /// Trainable input; gradients accumulate into the store.
    Param { pid: ParamId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: S },
    MulMask { x: NodeId, mask: ArrayD<S> },
    Abs { x: NodeId },
    Square { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    LeakyRelu { x: NodeId, slope: S },
    Mean { x: NodeId },
    Reshape { x: NodeId },
    Concat { parts: Vec<NodeId> },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Upsample2x { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    InstanceNorm { x: NodeId, eps: S },
    Film { x: NodeId, gamma: NodeId, beta: NodeId },
    GlobalMeanPool { x: NodeId },
    GatherSpatial { x: NodeId, locations: Vec<(usize, usize)> },
    CropSpatial { x: NodeId, y0: usize, x0: usize },
    L2NormalizeRows { x: NodeId, eps: S },
    MatMulNT { a: NodeId, b: NodeId, scale: S },
    InfoNceRows { logits: NodeId },
    LogMeanExp { x: NodeId },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: ArrayD<S>,
    grad: Option<ArrayD<S>>,
    op: Op<S>,
}

/// Eagerly evaluated computation tape.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

fn gemm_rm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    b: &[S],
    c: &mut [S],
    beta: S,
    trans_a: bool,
    trans_b: bool,
) {
    // Row-major GEMM with optional logical transposes expressed via strides.
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Gather convolution patches: (C*KH*KW, OH*OW) from a padded single sample.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    xp: &[S],
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    cols: &mut [S],
) {
    let m = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * m..(row + 1) * m];
                for oy in 0..oh {
                    let src_y = oy * stride + ky;
                    let src_base = (ch * hp + src_y) * wp + kx;
                    for ox in 0..ow {
                        dst[oy * ow + ox] = xp[src_base + ox * stride];
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back onto the padded sample.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    xp: &mut [S],
) {
    let m = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * m..(row + 1) * m];
                for oy in 0..oh {
                    let dst_y = oy * stride + ky;
                    let dst_base = (ch * hp + dst_y) * wp + kx;
                    for ox in 0..ow {
                        xp[dst_base + ox * stride] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn pad_sample<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, pad: usize) -> Vec<S> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![S::zero(); c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y) * w + w];
            let dst_start = (ch * hp + y + pad) * wp + pad;
            out[dst_start..dst_start + w].copy_from_slice(src);
        }
    }
    out
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<S> {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> S {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().expect("scalar node")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Builders ───────────────────────────────────────────────────────────

    /// Constant input (no gradient).
    pub fn leaf(&mut self, value: ArrayD<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Trainable input: the store's current value, gradient routed back.
    pub fn param(&mut self, store: &ParamStore<S>, pid: ParamId) -> NodeId {
        self.push(store.value(pid).clone(), Op::Param { pid })
    }

    /// The store's current value as a constant: a frozen view of a parameter.
    pub fn param_frozen(&mut self, store: &ParamStore<S>, pid: ParamId) -> NodeId {
        self.push(store.value(pid).clone(), Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub { a, b })
    }

    /// Elementwise product of same-shape nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    /// Elementwise product with a constant mask (no gradient to the mask).
    pub fn mul_mask(&mut self, x: NodeId, mask: ArrayD<S>) -> NodeId {
        debug_assert_eq!(self.nodes[x.0].value.shape(), mask.shape());
        let value = &self.nodes[x.0].value * &mask;
        self.push(value, Op::MulMask { x, mask })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.abs());
        self.push(value, Op::Abs { x })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v * v);
        self.push(value, Op::Square { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.tanh());
        self.push(value, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| if v > S::zero() { v } else { S::zero() });
        self.push(value, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = S::from_f64(slope);
        let value = self.nodes[x.0].value.mapv(|v| if v > S::zero() { v } else { v * s });
        self.push(value, Op::LeakyRelu { x, slope: s })
    }

    /// Mean over all elements, as a single-element node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let mean = v.iter().fold(S::zero(), |acc, &e| acc + e) / S::from_f64(v.len() as f64);
        self.push(ArrayD::from_elem(IxDyn(&[1]), mean), Op::Mean { x })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = &self.nodes[x.0].value;
        debug_assert_eq!(v.len(), shape.iter().product::<usize>());
        let flat: Vec<S> = v.iter().cloned().collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape");
        self.push(value, Op::Reshape { x })
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push(value, Op::Concat { parts: parts.to_vec() })
    }

    /// 2D convolution: x (N,C,H,W) * w (OC,C,KH,KW) + b (OC), zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (n, c, h, wd) = dims4(xv);
        let ws = wv.shape();
        let (oc, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c, kc, "conv2d channel mismatch");
        assert_eq!(bv.len(), oc, "conv2d bias length");
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(wd, kw, stride, pad);
        let m = oh * ow;
        let k = c * kh * kw;
        let x_slice = xv.as_slice().expect("contiguous conv input");
        let w_slice = wv.as_slice().expect("contiguous conv weights");
        let b_slice = bv.as_slice().expect("contiguous conv bias");
        let mut out = vec![S::zero(); n * oc * m];
        let mut cols = vec![S::zero(); k * m];
        for s in 0..n {
            let xp = pad_sample(&x_slice[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, pad);
            im2col(&xp, c, h + 2 * pad, wd + 2 * pad, kh, kw, stride, oh, ow, &mut cols);
            let out_s = &mut out[s * oc * m..(s + 1) * oc * m];
            gemm_rm(oc, k, m, w_slice, &cols, out_s, S::zero(), false, false);
            for ch in 0..oc {
                let bias = b_slice[ch];
                for v in &mut out_s[ch * m..(ch + 1) * m] {
                    *v += bias;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, oc, oh, ow]), out).expect("conv output");
        self.push(value, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Nearest-neighbor 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = dims4(xv);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xcol in 0..w {
                        let v = xv[[s, ch, y, xcol]];
                        out[[s, ch, 2 * y, 2 * xcol]] = v;
                        out[[s, ch, 2 * y, 2 * xcol + 1]] = v;
                        out[[s, ch, 2 * y + 1, 2 * xcol]] = v;
                        out[[s, ch, 2 * y + 1, 2 * xcol + 1]] = v;
                    }
                }
            }
        }
        self.push(out, Op::Upsample2x { x })
    }

    /// Fully connected: x (N,K) @ w (M,K)^T + b (M) -> (N,M).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (n, k) = dims2(xv);
        let (m, k2) = dims2(wv);
        assert_eq!(k, k2, "linear inner dim mismatch");
        assert_eq!(bv.len(), m, "linear bias length");
        let mut out = vec![S::zero(); n * m];
        gemm_rm(
            n,
            k,
            m,
            xv.as_slice().expect("contiguous"),
            wv.as_slice().expect("contiguous"),
            &mut out,
            S::zero(),
            false,
            true,
        );
        let b_slice = bv.as_slice().expect("contiguous");
        for row in 0..n {
            for col in 0..m {
                out[row * m + col] += b_slice[col];
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, m]), out).expect("linear output");
        self.push(value, Op::Linear { x, w, b })
    }

    /// Per-(sample, channel) normalization over the spatial axes.
    pub fn instance_norm(&mut self, x: NodeId) -> NodeId {
        let eps = S::from_f64(1e-5);
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = dims4(xv);
        let hw = S::from_f64((h * w) as f64);
        let mut out = xv.clone();
        for s in 0..n {
            for ch in 0..c {
                let mut lane = out.slice_mut(ndarray::s![s, ch, .., ..].as_ref());
                let mean = lane.iter().fold(S::zero(), |a, &v| a + v) / hw;
                let var =
                    lane.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / hw;
                let inv = S::one() / (var + eps).sqrt();
                lane.mapv_inplace(|v| (v - mean) * inv);
            }
        }
        self.push(out, Op::InstanceNorm { x, eps })
    }

    /// Feature-wise affine modulation: x (N,C,H,W) * (1 + gamma) + beta with
    /// gamma/beta (N,C) broadcast over space.
    pub fn film(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let (n, c, h, w) = dims4(xv);
        assert_eq!(dims2(gv), (n, c), "film gamma shape");
        assert_eq!(dims2(bv), (n, c), "film beta shape");
        let mut out = xv.clone();
        for s in 0..n {
            for ch in 0..c {
                let g = S::one() + gv[[s, ch]];
                let b = bv[[s, ch]];
                out.slice_mut(ndarray::s![s, ch, .., ..].as_ref()).mapv_inplace(|v| v * g + b);
            }
        }
        let _ = (h, w);
        self.push(out, Op::Film { x, gamma, beta })
    }

    /// Spatial mean per (sample, channel): (N,C,H,W) -> (N,C).
    pub fn global_mean_pool(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = dims4(xv);
        let hw = S::from_f64((h * w) as f64);
        let mut out = ArrayD::zeros(IxDyn(&[n, c]));
        for s in 0..n {
            for ch in 0..c {
                let sum = xv.slice(ndarray::s![s, ch, .., ..].as_ref())
                    .iter()
                    .fold(S::zero(), |a, &v| a + v);
                out[[s, ch]] = sum / hw;
            }
        }
        self.push(out, Op::GlobalMeanPool { x })
    }

    /// Pick feature vectors at spatial locations from a single-sample map:
    /// (1,C,H,W) with L (row, col) pairs -> (L,C).
    pub fn gather_spatial(&mut self, x: NodeId, locations: &[(usize, usize)]) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = dims4(xv);
        if n != 1 {
            return Err(Error::dim("gather_spatial batch", "1", n));
        }
        for &(y, xc) in locations {
            if y >= h || xc >= w {
                return Err(Error::Data(format!(
                    "patch location ({y}, {xc}) outside {h}x{w} feature grid"
                )));
            }
        }
        let mut out = ArrayD::zeros(IxDyn(&[locations.len(), c]));
        for (l, &(y, xc)) in locations.iter().enumerate() {
            for ch in 0..c {
                out[[l, ch]] = xv[[0, ch, y, xc]];
            }
        }
        Ok(self.push(out, Op::GatherSpatial { x, locations: locations.to_vec() }))
    }

    /// Spatial crop: (N,C,H,W) -> (N,C,h,w) at offset (y0, x0).
    pub fn crop_spatial(
        &mut self,
        x: NodeId,
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let (_, _, fh, fw) = dims4(xv);
        if y0 + h > fh || x0 + w > fw {
            return Err(Error::Data(format!(
                "crop {h}x{w}@({y0},{x0}) outside {fh}x{fw} feature map"
            )));
        }
        let value =
            xv.slice(ndarray::s![.., .., y0..y0 + h, x0..x0 + w].as_ref()).to_owned();
        Ok(self.push(value, Op::CropSpatial { x, y0, x0 }))
    }

    /// Normalize each row of (L,D) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let eps = S::from_f64(1e-12);
        let xv = &self.nodes[x.0].value;
        let (l, d) = dims2(xv);
        let mut out = xv.clone();
        for row in 0..l {
            let mut lane = out.slice_mut(ndarray::s![row, ..].as_ref());
            let norm = lane.iter().fold(S::zero(), |a, &v| a + v * v).sqrt();
            let denom = if norm > eps { norm } else { eps };
            lane.mapv_inplace(|v| v / denom);
        }
        let _ = d;
        self.push(out, Op::L2NormalizeRows { x, eps })
    }

    /// `scale * a @ b^T` for a (L,D), b (M,D) -> (L,M).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId, scale: f64) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (l, d) = dims2(av);
        let (m, d2) = dims2(bv);
        assert_eq!(d, d2, "matmul_nt inner dim");
        let mut out = vec![S::zero(); l * m];
        gemm_rm(
            l,
            d,
            m,
            av.as_slice().expect("contiguous"),
            bv.as_slice().expect("contiguous"),
            &mut out,
            S::zero(),
            false,
            true,
        );
        let c = S::from_f64(scale);
        for v in &mut out {
            *v = *v * c;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[l, m]), out).expect("matmul output");
        self.push(value, Op::MatMulNT { a, b, scale: c })
    }

    /// Contrastive cross-entropy over square logits with diagonal positives:
    /// mean over rows of `logsumexp(row) - row[i]`.
    pub fn info_nce_rows(&mut self, logits: NodeId) -> NodeId {
        let lv = &self.nodes[logits.0].value;
        let (l, m) = dims2(lv);
        assert_eq!(l, m, "info_nce_rows expects square logits");
        let mut total = S::zero();
        for row in 0..l {
            let lane = lv.slice(ndarray::s![row, ..].as_ref());
            let max = lane.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
            let lse =
                max + lane.iter().fold(S::zero(), |a, &v| a + (v - max).exp()).ln();
            total += lse - lv[[row, row]];
        }
        let value = ArrayD::from_elem(IxDyn(&[1]), total / S::from_f64(l as f64));
        self.push(value, Op::InfoNceRows { logits })
    }

    /// `ln(mean(exp(x)))` over all elements, numerically stabilized.
    pub fn log_mean_exp(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let max = xv.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
        let sum = xv.iter().fold(S::zero(), |a, &v| a + (v - max).exp());
        let value = max + (sum / S::from_f64(xv.len() as f64)).ln();
        self.push(ArrayD::from_elem(IxDyn(&[1]), value), Op::LogMeanExp { x })
    }

    // ── Backward ───────────────────────────────────────────────────────────

    /// Reverse pass from a single-element loss node; parameter gradients
    /// accumulate into `store`. Call once per graph.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore<S>) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward from non-scalar node");
        self.nodes[loss.0].grad = Some(ArrayD::from_elem(IxDyn(&[1]), S::one()));
        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Param { pid } => {
                    let slot = &mut store.params[pid.0].grad;
                    *slot += &grad;
                }
                Op::Add { a, b } => {
                    self.add_grad(a, grad.clone());
                    self.add_grad(b, grad);
                }
                Op::Sub { a, b } => {
                    self.add_grad(a, grad.clone());
                    self.add_grad(b, grad.mapv(|v| -v));
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    self.add_grad(a, &grad * &bv);
                    self.add_grad(b, &grad * &av);
                }
                Op::Scale { x, c } => self.add_grad(x, grad.mapv(|v| v * c)),
                Op::MulMask { x, mask } => self.add_grad(x, &grad * &mask),
                Op::Abs { x } => {
                    let xv = self.nodes[x.0].value.clone();
                    let gx = ndarray::Zip::from(&grad).and(&xv).map_collect(|&g, &v| {
                        if v > S::zero() {
                            g
                        } else if v < S::zero() {
                            -g
                        } else {
                            S::zero()
                        }
                    });
                    self.add_grad(x, gx);
                }
                Op::Square { x } => {
                    let xv = self.nodes[x.0].value.clone();
                    let two = S::from_f64(2.0);
                    self.add_grad(x, ndarray::Zip::from(&grad).and(&xv).map_collect(|&g, &v| two * v * g));
                }
                Op::Tanh { x } => {
                    let yv = self.nodes[i].value.clone();
                    self.add_grad(
                        x,
                        ndarray::Zip::from(&grad).and(&yv).map_collect(|&g, &y| g * (S::one() - y * y)),
                    );
                }
                Op::Relu { x } => {
                    let xv = self.nodes[x.0].value.clone();
                    self.add_grad(
                        x,
                        ndarray::Zip::from(&grad).and(&xv).map_collect(|&g, &v| {
                            if v > S::zero() {
                                g
                            } else {
                                S::zero()
                            }
                        }),
                    );
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.nodes[x.0].value.clone();
                    self.add_grad(
                        x,
                        ndarray::Zip::from(&grad).and(&xv).map_collect(|&g, &v| {
                            if v > S::zero() {
                                g
                            } else {
                                g * slope
                            }
                        }),
                    );
                }
                Op::Mean { x } => {
                    let shape = self.nodes[x.0].value.raw_dim();
                    let g = grad[[0]] / S::from_f64(shape.size() as f64);
                    self.add_grad(x, ArrayD::from_elem(shape, g));
                }
                Op::Reshape { x } => {
                    let shape = self.nodes[x.0].value.raw_dim();
                    let flat: Vec<S> = grad.iter().cloned().collect();
                    self.add_grad(x, ArrayD::from_shape_vec(shape, flat).expect("reshape grad"));
                }
                Op::Concat { parts } => {
                    let mut start = 0usize;
                    for p in parts {
                        let ch = self.nodes[p.0].value.shape()[1];
                        let piece = grad
                            .slice_axis(Axis(1), ndarray::Slice::from(start..start + ch))
                            .to_owned();
                        self.add_grad(p, piece);
                        start += ch;
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv2d_backward(i, x, w, b, stride, pad, &grad, store)
                }
                Op::Upsample2x { x } => {
                    let (n, c, h2, w2) = dims4(&grad);
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                    for s in 0..n {
                        for ch in 0..c {
                            for y in 0..h {
                                for xc in 0..w {
                                    gx[[s, ch, y, xc]] = grad[[s, ch, 2 * y, 2 * xc]]
                                        + grad[[s, ch, 2 * y, 2 * xc + 1]]
                                        + grad[[s, ch, 2 * y + 1, 2 * xc]]
                                        + grad[[s, ch, 2 * y + 1, 2 * xc + 1]];
                                }
                            }
                        }
                    }
                    self.add_grad(x, gx);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.nodes[x.0].value.clone();
                    let wv = self.nodes[w.0].value.clone();
                    let (n, m) = dims2(&grad);
                    let (_, k) = dims2(&wv);
                    let g_slice: Vec<S> = grad.iter().cloned().collect();
                    let mut gx = vec![S::zero(); n * k];
                    gemm_rm(
                        n,
                        m,
                        k,
                        &g_slice,
                        wv.as_slice().expect("contiguous"),
                        &mut gx,
                        S::zero(),
                        false,
                        false,
                    );
                    let mut gw = vec![S::zero(); m * k];
                    gemm_rm(
                        m,
                        n,
                        k,
                        &g_slice,
                        xv.as_slice().expect("contiguous"),
                        &mut gw,
                        S::zero(),
                        true,
                        false,
                    );
                    let mut gb = vec![S::zero(); m];
                    for row in 0..n {
                        for col in 0..m {
                            gb[col] += g_slice[row * m + col];
                        }
                    }
                    self.add_grad(x, ArrayD::from_shape_vec(IxDyn(&[n, k]), gx).unwrap());
                    self.add_grad(w, ArrayD::from_shape_vec(IxDyn(&[m, k]), gw).unwrap());
                    self.add_grad(b, ArrayD::from_shape_vec(IxDyn(&[m]), gb).unwrap());
                }
                Op::InstanceNorm { x, eps } => {
                    let xv = self.nodes[x.0].value.clone();
                    let (n, c, h, w) = dims4(&xv);
                    let hw = S::from_f64((h * w) as f64);
                    let mut gx = ArrayD::zeros(xv.raw_dim());
                    for s in 0..n {
                        for ch in 0..c {
                            let lane = xv.slice(ndarray::s![s, ch, .., ..].as_ref());
                            let glane = grad.slice(ndarray::s![s, ch, .., ..].as_ref());
                            let mean = lane.iter().fold(S::zero(), |a, &v| a + v) / hw;
                            let var = lane
                                .iter()
                                .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                                / hw;
                            let inv = S::one() / (var + eps).sqrt();
                            let mut g_mean = S::zero();
                            let mut gx_mean = S::zero();
                            for (&g, &v) in glane.iter().zip(lane.iter()) {
                                g_mean += g;
                                gx_mean += g * (v - mean) * inv;
                            }
                            g_mean /= hw;
                            gx_mean /= hw;
                            let mut out_lane = gx.slice_mut(ndarray::s![s, ch, .., ..].as_ref());
                            for ((o, &g), &v) in
                                out_lane.iter_mut().zip(glane.iter()).zip(lane.iter())
                            {
                                let xh = (v - mean) * inv;
                                *o = inv * (g - g_mean - xh * gx_mean);
                            }
                        }
                    }
                    self.add_grad(x, gx);
                }
                Op::Film { x, gamma, beta } => {
                    let xv = self.nodes[x.0].value.clone();
                    let gv = self.nodes[gamma.0].value.clone();
                    let (n, c, _, _) = dims4(&xv);
                    let mut gx = ArrayD::zeros(xv.raw_dim());
                    let mut ggamma = ArrayD::zeros(IxDyn(&[n, c]));
                    let mut gbeta = ArrayD::zeros(IxDyn(&[n, c]));
                    for s in 0..n {
                        for ch in 0..c {
                            let scale = S::one() + gv[[s, ch]];
                            let glane = grad.slice(ndarray::s![s, ch, .., ..].as_ref());
                            let xlane = xv.slice(ndarray::s![s, ch, .., ..].as_ref());
                            let mut sum_g = S::zero();
                            let mut sum_gx = S::zero();
                            for (&g, &v) in glane.iter().zip(xlane.iter()) {
                                sum_g += g;
                                sum_gx += g * v;
                            }
                            ggamma[[s, ch]] = sum_gx;
                            gbeta[[s, ch]] = sum_g;
                            gx.slice_mut(ndarray::s![s, ch, .., ..].as_ref())
                                .assign(&glane.mapv(|g| g * scale));
                        }
                    }
                    self.add_grad(x, gx);
                    self.add_grad(gamma, ggamma);
                    self.add_grad(beta, gbeta);
                }
                Op::GlobalMeanPool { x } => {
                    let shape = self.nodes[x.0].value.raw_dim();
                    let (n, c, h, w) = dims4(&self.nodes[x.0].value);
                    let hw = S::from_f64((h * w) as f64);
                    let mut gx = ArrayD::zeros(shape);
                    for s in 0..n {
                        for ch in 0..c {
                            let g = grad[[s, ch]] / hw;
                            gx.slice_mut(ndarray::s![s, ch, .., ..].as_ref()).fill(g);
                        }
                    }
                    self.add_grad(x, gx);
                }
                Op::GatherSpatial { x, locations } => {
                    let shape = self.nodes[x.0].value.raw_dim();
                    let c = shape[1];
                    let mut gx = ArrayD::zeros(shape);
                    for (l, &(y, xc)) in locations.iter().enumerate() {
                        for ch in 0..c {
                            gx[[0, ch, y, xc]] += grad[[l, ch]];
                        }
                    }
                    self.add_grad(x, gx);
                }
                Op::CropSpatial { x, y0, x0 } => {
                    let shape = self.nodes[x.0].value.raw_dim();
                    let (_, _, gh, gw) = dims4(&grad);
                    let mut gx = ArrayD::zeros(shape);
                    gx.slice_mut(ndarray::s![.., .., y0..y0 + gh, x0..x0 + gw].as_ref())
                        .assign(&grad);
                    self.add_grad(x, gx);
                }
                Op::L2NormalizeRows { x, eps } => {
                    let xv = self.nodes[x.0].value.clone();
                    let yv = self.nodes[i].value.clone();
                    let (l, d) = dims2(&xv);
                    let mut gx = ArrayD::zeros(xv.raw_dim());
                    for row in 0..l {
                        let xr = xv.slice(ndarray::s![row, ..].as_ref());
                        let yr = yv.slice(ndarray::s![row, ..].as_ref());
                        let gr = grad.slice(ndarray::s![row, ..].as_ref());
                        let norm = xr.iter().fold(S::zero(), |a, &v| a + v * v).sqrt();
                        let mut out = gx.slice_mut(ndarray::s![row, ..].as_ref());
                        if norm > eps {
                            let dot = yr.iter().zip(gr.iter()).fold(S::zero(), |a, (&y, &g)| a + y * g);
                            for ((o, &g), &y) in out.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                                *o = (g - y * dot) / norm;
                            }
                        } else {
                            for (o, &g) in out.iter_mut().zip(gr.iter()) {
                                *o = g / eps;
                            }
                        }
                    }
                    let _ = d;
                    self.add_grad(x, gx);
                }
                Op::MatMulNT { a, b, scale } => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let (l, d) = dims2(&av);
                    let (m, _) = dims2(&bv);
                    let g_scaled: Vec<S> = grad.iter().map(|&g| g * scale).collect();
                    let mut ga = vec![S::zero(); l * d];
                    gemm_rm(
                        l,
                        m,
                        d,
                        &g_scaled,
                        bv.as_slice().expect("contiguous"),
                        &mut ga,
                        S::zero(),
                        false,
                        false,
                    );
                    let mut gb = vec![S::zero(); m * d];
                    gemm_rm(
                        m,
                        l,
                        d,
                        &g_scaled,
                        av.as_slice().expect("contiguous"),
                        &mut gb,
                        S::zero(),
                        true,
                        false,
                    );
                    self.add_grad(a, ArrayD::from_shape_vec(IxDyn(&[l, d]), ga).unwrap());
                    self.add_grad(b, ArrayD::from_shape_vec(IxDyn(&[m, d]), gb).unwrap());
                }
                Op::InfoNceRows { logits } => {
                    let lv = self.nodes[logits.0].value.clone();
                    let (l, _) = dims2(&lv);
                    let g = grad[[0]] / S::from_f64(l as f64);
                    let mut gl = ArrayD::zeros(lv.raw_dim());
                    for row in 0..l {
                        let lane = lv.slice(ndarray::s![row, ..].as_ref());
                        let max = lane.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
                        let denom = lane.iter().fold(S::zero(), |a, &v| a + (v - max).exp());
                        for col in 0..l {
                            let p = (lv[[row, col]] - max).exp() / denom;
                            let delta = if col == row { S::one() } else { S::zero() };
                            gl[[row, col]] = (p - delta) * g;
                        }
                    }
                    self.add_grad(logits, gl);
                }
                Op::LogMeanExp { x } => {
                    let xv = self.nodes[x.0].value.clone();
                    let g = grad[[0]];
                    let max = xv.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
                    let denom = xv.iter().fold(S::zero(), |a, &v| a + (v - max).exp());
                    self.add_grad(x, xv.mapv(|v| (v - max).exp() / denom * g));
                }
            }
        }
    }

    fn add_grad(&mut self, id: NodeId, contribution: ArrayD<S>) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => *g += &contribution,
            None => node.grad = Some(contribution),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &mut self,
        _node: usize,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        grad: &ArrayD<S>,
        _store: &mut ParamStore<S>,
    ) {
        let xv = self.nodes[x.0].value.clone();
        let wv = self.nodes[w.0].value.clone();
        let (n, c, h, wd) = dims4(&xv);
        let ws = wv.shape();
        let (oc, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (_, _, oh, ow) = dims4(grad);
        let m = oh * ow;
        let k = c * kh * kw;
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        let x_slice = xv.as_slice().expect("contiguous");
        let w_slice = wv.as_slice().expect("contiguous");
        let g_all: Vec<S> = grad.iter().cloned().collect();
        let mut gx = vec![S::zero(); n * c * h * wd];
        let mut gw = vec![S::zero(); oc * k];
        let mut gb = vec![S::zero(); oc];
        let mut cols = vec![S::zero(); k * m];
        let mut gcols = vec![S::zero(); k * m];
        for s in 0..n {
            let xp = pad_sample(&x_slice[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, pad);
            im2col(&xp, c, hp, wp, kh, kw, stride, oh, ow, &mut cols);
            let g_s = &g_all[s * oc * m..(s + 1) * oc * m];
            // dW += g @ cols^T  (accumulate across samples via beta = 1)
            gemm_rm(oc, m, k, g_s, &cols, &mut gw, S::one(), false, true);
            for ch in 0..oc {
                for &g in &g_s[ch * m..(ch + 1) * m] {
                    gb[ch] += g;
                }
            }
            // dcols = w^T @ g, then scatter back to the padded sample.
            gemm_rm(k, oc, m, w_slice, g_s, &mut gcols, S::zero(), true, false);
            let mut gxp = vec![S::zero(); c * hp * wp];
            col2im(&gcols, c, hp, wp, kh, kw, stride, oh, ow, &mut gxp);
            let dst = &mut gx[s * c * h * wd..(s + 1) * c * h * wd];
            for ch in 0..c {
                for y in 0..h {
                    let src_start = (ch * hp + y + pad) * wp + pad;
                    let dst_start = (ch * h + y) * wd;
                    for xc in 0..wd {
                        dst[dst_start + xc] += gxp[src_start + xc];
                    }
                }
            }
        }
        self.add_grad(x, ArrayD::from_shape_vec(IxDyn(&[n, c, h, wd]), gx).unwrap());
        self.add_grad(
            w,
            ArrayD::from_shape_vec(IxDyn(&[oc, c, kh, kw]), gw).unwrap(),
        );
        self.add_grad(b, ArrayD::from_shape_vec(IxDyn(&[oc]), gb).unwrap());
    }
}

fn dims4<S: Scalar>(v: &ArrayD<S>) -> (usize, usize, usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn dims2<S: Scalar>(v: &ArrayD<S>) -> (usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 2, "expected 2-d tensor, got {s:?}");
    (s[0], s[1])
}

// ── Finite-difference verification ─────────────────────────────────────────

/// Result of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_param: String,
}

/// Compare analytic gradients against central finite differences.
///
/// `run(store, with_grad)` must rebuild the identical forward pass every call
/// (seed any randomness internally), returning the loss value; when
/// `with_grad` is true it must also run backward so gradients land in the
/// store. `entries` selects (parameter, flat element) coordinates to probe.
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    entries: &[(ParamId, usize)],
    h: f64,
    mut run: F,
) -> GradCheck
where
    F: FnMut(&mut ParamStore<f64>, bool) -> f64,
{
    store.zero_all_grads();
    let _ = run(store, true);
    let analytic: Vec<f64> = entries
        .iter()
        .map(|&(pid, idx)| *store.grad(pid).as_slice().expect("contiguous").get(idx).expect("index"))
        .collect();

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (slot, &(pid, idx)) in entries.iter().enumerate() {
        let orig = store.value(pid).as_slice().expect("contiguous")[idx];
        let step = h * orig.abs().max(1.0);

        store.value_mut(pid).as_slice_mut().expect("contiguous")[idx] = orig + step;
        let up = run(store, false);
        store.value_mut(pid).as_slice_mut().expect("contiguous")[idx] = orig - step;
        let down = run(store, false);
        store.value_mut(pid).as_slice_mut().expect("contiguous")[idx] = orig;

        let numeric = (up - down) / (2.0 * step);
        let a = analytic[slot];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{}[{}] analytic {a:.3e} numeric {numeric:.3e}", store.name(pid), idx);
        }
    }
    GradCheck { max_rel_err: max_rel, checked: entries.len(), worst_param: worst }
}

/// Deterministic entry selection: every parameter tensor contributes its
/// first, middle, and last element (deduplicated for tiny tensors).
pub fn probe_entries<S: Scalar>(store: &ParamStore<S>, pids: &[ParamId]) -> Vec<(ParamId, usize)> {
    let mut entries = Vec::new();
    for &pid in pids {
        let len = store.value(pid).len();
        let mut picks = vec![0usize];
        if len > 2 {
            picks.push(len / 2);
        }
        if len > 1 {
            picks.push(len - 1);
        }
        picks.dedup();
        for idx in picks {
            entries.push((pid, idx));
        }
    }
    entries
}
