//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly (values are computed on push)
//! together with what the backward pass needs. Parameters are bound lazily
//! from a [`ParamStore`]; a parameter takes part in differentiation only when
//! the graph was built with it marked trainable. Nodes that depend on nothing
//! trainable carry no saved buffers and are skipped by [`Graph::backward`].
//!
//! Shape errors inside the tape are programming errors and panic; the public
//! module APIs validate user-facing shapes before they reach the tape.

use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Leading,
    Cols,
}

enum Op {
    Leaf,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    ScaleLeading(NodeId, NodeId),
    AddLeading(NodeId, NodeId),
    SoftmaxRows {
        x: NodeId,
        scale: f64,
    },
    LogSoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        scale: f64,
        probs: Vec<f64>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    DepthwiseXCorr(NodeId, NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: Axis,
    },
    SliceLeading {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    BceWithLogits {
        x: NodeId,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    trainable: Vec<bool>,
    bound: Vec<Option<NodeId>>,
    nodes: Vec<Node>,
    saved_bytes: usize,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<Tensor> {
        self.node_grads[id.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[id.0].clone(), g.clone()))
    }

    /// Gradient w.r.t. a parameter, `None` when it was unused or frozen.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.param_nodes
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|n| self.node(n))
    }
}

impl<'p> Graph<'p> {
    /// Every parameter is trainable.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_trainable(params, |_| true)
    }

    /// No parameter is trainable; used for inference.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::with_trainable(params, |_| false)
    }

    pub fn with_trainable(params: &'p ParamStore, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        Self {
            params,
            trainable: params.ids().map(|id| trainable(params.group(id))).collect(),
            bound: vec![None; params.len()],
            nodes: Vec::new(),
            saved_bytes: 0,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Bytes held by node values and saved backward buffers.
    pub fn bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * 8).sum::<usize>() + self.saved_bytes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Constant input; never differentiated.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (used by gradient checks on inputs).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar(v))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let t = self.params.get(id).clone();
        let n = self.push(t, Op::Param, self.trainable[id.0]);
        self.bound[id.0] = Some(n);
        n
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{what}: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    fn unary(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        self.value(a).map(f)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, "add", |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, "sub", |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, "mul", |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, "div", |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, "minimum", f64::min);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Minimum(a, b), rg)
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, "maximum", f64::max);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Maximum(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.unary(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.unary(a, |x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.unary(a, |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.unary(a, f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.unary(a, f64::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    /// Square root whose derivative is taken as zero at the origin.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.unary(a, f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.unary(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let v = self.unary(a, |x| x.max(lo));
        let rg = self.rg(&[a]);
        self.push(v, Op::ClampMin(a, lo), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- linear algebra ----------------------------------------------------

    fn dims2(&self, a: NodeId) -> (usize, usize) {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "expected a matrix, got shape {s:?}");
        (s[0], s[1])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let (ar, ac) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), ta, self.data(b), tb, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims2(a);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Adds a length-`C` vector to every row of a `[.., C]` tensor.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let c = *self.shape(x).last().expect("rank >= 1");
        assert_eq!(self.value(b).len(), c, "add_row width");
        let bv = self.data(b);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddRow(x, b), rg)
    }

    /// Multiplies every row of a `[.., C]` tensor elementwise by a length-`C` vector.
    pub fn mul_row(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let c = *self.shape(x).last().expect("rank >= 1");
        assert_eq!(self.value(s).len(), c, "mul_row width");
        let sv = self.data(s);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(sv).for_each(|(o, s)| *o *= s);
        }
        let rg = self.rg(&[x, s]);
        self.push(out, Op::MulRow(x, s), rg)
    }

    /// Scales slice `i` along the leading axis by `s[i]`.
    pub fn scale_leading(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let lead = self.shape(x)[0];
        assert_eq!(self.value(s).len(), lead, "scale_leading width");
        let inner = self.value(x).len() / lead.max(1);
        let sv = self.data(s);
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            chunk.iter_mut().for_each(|o| *o *= sv[i]);
        }
        let rg = self.rg(&[x, s]);
        self.push(out, Op::ScaleLeading(x, s), rg)
    }

    /// Adds `b[i]` to every element of slice `i` along the leading axis.
    pub fn add_leading(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let lead = self.shape(x)[0];
        assert_eq!(self.value(b).len(), lead, "add_leading width");
        let inner = self.value(x).len() / lead.max(1);
        let bv = self.data(b);
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            chunk.iter_mut().for_each(|o| *o += bv[i]);
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddLeading(x, b), rg)
    }

    // ---- normalisation -----------------------------------------------------

    /// Row-wise softmax of `scale * x` with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId, scale: f64) -> NodeId {
        let (r, c) = self.dims2(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row, scale);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::SoftmaxRows { x, scale },
            rg,
        )
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims2(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::LogSoftmaxRows(x),
            rg,
        )
    }

    /// Layer normalisation over the last axis of a `[L, C]` matrix with affine
    /// parameters `gamma`, `beta` of length `C`.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (r, c) = self.dims2(x);
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = self.value(x).data().to_vec();
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &mut xhat[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * s;
                out[i * c + j] = *v * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        if rg {
            self.saved_bytes += (xhat.len() + rstd.len()) * 8;
        } else {
            xhat = Vec::new();
            rstd = Vec::new();
        }
        self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    // ---- attention ---------------------------------------------------------

    /// `softmax(q k^T * scale) v` for `q: [Lq, D]`, `k: [Lk, D]`, `v: [Lk, Dv]`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, scale: f64) -> NodeId {
        let (lq, d) = self.dims2(q);
        let (lk, dk) = self.dims2(k);
        let (lv, dv) = self.dims2(v);
        assert_eq!(d, dk, "attention key width");
        assert_eq!(lk, lv, "attention key/value length");
        let mut probs = vec![0.0; lq * lk];
        gemm(
            lq,
            d,
            lk,
            self.data(q),
            false,
            self.data(k),
            true,
            &mut probs,
            false,
        );
        for row in probs.chunks_mut(lk) {
            softmax_in_place(row, scale);
        }
        let mut out = vec![0.0; lq * dv];
        gemm(
            lq,
            lk,
            dv,
            &probs,
            false,
            self.data(v),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[q, k, v]);
        if rg {
            self.saved_bytes += probs.len() * 8;
        } else {
            probs = Vec::new();
        }
        self.push(
            Tensor::from_parts(vec![lq, dv], out),
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
            rg,
        )
    }

    // ---- spatial -----------------------------------------------------------

    fn dims3(&self, a: NodeId) -> (usize, usize, usize) {
        let s = self.shape(a);
        assert_eq!(s.len(), 3, "expected a C x H x W map, got {s:?}");
        (s[0], s[1], s[2])
    }

    /// 2-D convolution (cross-correlation) of a `Cin x H x W` map with
    /// `w: [Cout, Cin, k, k]` and optional bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let (c_in, h, wd) = self.dims3(x);
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight rank");
        assert_eq!(ws[1], c_in, "conv input channels");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let c_out = ws[0];
        let geom = ConvGeom::new(c_in, h, wd, ws[2], stride, pad).expect("conv input too small");
        let p = geom.col_cols();
        let mut out = vec![0.0; c_out * p];
        if geom.is_pointwise() {
            gemm(
                c_out,
                c_in,
                p,
                self.data(w),
                false,
                self.data(x),
                false,
                &mut out,
                false,
            );
        } else {
            let cols = im2col(self.data(x), &geom);
            gemm(
                c_out,
                geom.col_rows(),
                p,
                self.data(w),
                false,
                &cols,
                false,
                &mut out,
                false,
            );
        }
        if let Some(b) = b {
            let bv = self.data(b);
            assert_eq!(bv.len(), c_out, "conv bias width");
            for (c, chunk) in out.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|o| *o += bv[c]);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push(
            Tensor::from_parts(vec![c_out, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        )
    }

    /// Max pooling with a square window and no padding.
    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize) -> NodeId {
        let (c, h, w) = self.dims3(x);
        let geom = ConvGeom::new(c, h, w, k, stride, 0).expect("pool input too small");
        let windows: Vec<(usize, usize, usize, usize)> = (0..geom.ho)
            .flat_map(|i| {
                (0..geom.wo).map(move |j| (i * stride, i * stride + k, j * stride, j * stride + k))
            })
            .collect();
        self.pool_windows(x, geom.ho, geom.wo, &windows)
    }

    /// Adaptive max pooling to an `out x out` grid (PyTorch bin convention).
    pub fn adaptive_max_pool(&mut self, x: NodeId, out: usize) -> NodeId {
        let (_, h, w) = self.dims3(x);
        assert!(
            out >= 1 && h >= out && w >= out,
            "adaptive pool {h}x{w} -> {out}"
        );
        let bins = |n: usize, i: usize| (i * n / out, ((i + 1) * n).div_ceil(out));
        let windows: Vec<_> = (0..out)
            .flat_map(|i| {
                (0..out).map(move |j| {
                    let (r0, r1) = bins(h, i);
                    let (c0, c1) = bins(w, j);
                    (r0, r1, c0, c1)
                })
            })
            .collect();
        self.pool_windows(x, out, out, &windows)
    }

    fn pool_windows(
        &mut self,
        x: NodeId,
        ho: usize,
        wo: usize,
        windows: &[(usize, usize, usize, usize)],
    ) -> NodeId {
        let (c, h, w) = self.dims3(x);
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            let base = ch * h * w;
            for &(r0, r1, c0, c1) in windows {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + r0 * w + c0;
                for r in r0..r1 {
                    for cc in c0..c1 {
                        let idx = base + r * w + cc;
                        if src[idx] > best {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
        let rg = self.rg(&[x]);
        if rg {
            self.saved_bytes += argmax.len() * 8;
        } else {
            argmax = Vec::new();
        }
        self.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            Op::MaxPool { x, argmax },
            rg,
        )
    }

    /// Mean over all trailing axes: `[C, ...] -> [C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let c = self.shape(x)[0];
        let inner = self.value(x).len() / c.max(1);
        let out: Vec<f64> = self
            .data(x)
            .chunks(inner.max(1))
            .map(|ch| ch.iter().sum::<f64>() / inner as f64)
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![c], out), Op::GlobalAvgPool(x), rg)
    }

    /// Per-channel valid cross-correlation of `x: [C, Hx, Wx]` with kernel `z: [C, Hz, Wz]`.
    pub fn depthwise_xcorr(&mut self, z: NodeId, x: NodeId) -> NodeId {
        let (c, hz, wz) = self.dims3(z);
        let (cx, hx, wx) = self.dims3(x);
        assert_eq!(c, cx, "xcorr channels");
        assert!(hz <= hx && wz <= wx, "xcorr kernel larger than input");
        let (ho, wo) = (hx - hz + 1, wx - wz + 1);
        let (zd, xd) = (self.data(z), self.data(x));
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let zp = &zd[ch * hz * wz..(ch + 1) * hz * wz];
            let xp = &xd[ch * hx * wx..(ch + 1) * hx * wx];
            let op = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
            for a in 0..hz {
                for b in 0..wz {
                    let zv = zp[a * wz + b];
                    for i in 0..ho {
                        let xrow = &xp[(i + a) * wx + b..(i + a) * wx + b + wo];
                        let orow = &mut op[i * wo..(i + 1) * wo];
                        orow.iter_mut().zip(xrow).for_each(|(o, xv)| *o += zv * xv);
                    }
                }
            }
        }
        let rg = self.rg(&[z, x]);
        self.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            Op::DepthwiseXCorr(z, x),
            rg,
        )
    }

    /// Concatenates along the leading axis; trailing shapes must agree.
    pub fn concat_leading(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat trailing shape");
            lead += self.shape(p)[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis: Axis::Leading,
            },
            rg,
        )
    }

    /// Concatenates matrices along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims2(p);
                assert_eq!(r, rows, "concat_cols rows");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::Concat {
                parts: parts.to_vec(),
                axis: Axis::Cols,
            },
            rg,
        )
    }

    /// Slice `[start, end)` along the leading axis.
    pub fn slice_leading(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert!(start < end && end <= shape[0], "slice_leading range");
        let inner: usize = shape[1..].iter().product();
        let out = self.data(x)[start * inner..end * inner].to_vec();
        let mut s = shape;
        s[0] = end - start;
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(s, out),
            Op::SliceLeading { x, start },
            rg,
        )
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let (r, c) = self.dims2(x);
        assert!(start < end && end <= c, "slice_cols range");
        let w = end - start;
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![r, w], out),
            Op::SliceCols { x, start },
            rg,
        )
    }

    /// Elementwise numerically stable binary cross-entropy against fixed targets.
    pub fn bce_with_logits(&mut self, x: NodeId, target: Vec<f64>) -> NodeId {
        assert_eq!(self.value(x).len(), target.len(), "bce target size");
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .zip(&target)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::BceWithLogits { x, target },
            rg,
        )
    }

    // ---- convenience compositions -----------------------------------------

    /// `[C, H, W] -> [H*W, C]`.
    pub fn tokens_from_map(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.dims3(x);
        let flat = self.reshape(x, &[c, h * w]);
        self.transpose(flat)
    }

    /// `[H*W, C] -> [C, H, W]`.
    pub fn map_from_tokens(&mut self, t: NodeId, h: usize, w: usize) -> NodeId {
        let (l, c) = self.dims2(t);
        assert_eq!(l, h * w, "token count vs map size");
        let tt = self.transpose(t);
        self.reshape(tt, &[c, h, w])
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d loss / d node` for every node that requires gradients.
    /// `loss` must hold a single element.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            node_grads: grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            param_nodes: self.bound.clone(),
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| zip3(d, g, bv, |g, y| g * y));
                self.acc(grads, *b, |d| zip3(d, g, av, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| zip3(d, g, bv, |g, y| g / y));
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, g, *c)),
            Op::AddScalar(a) => self.acc(grads, *a, |d| axpy(d, g, 1.0)),
            Op::Relu(a) => {
                let av = self.data(*a);
                self.acc(grads, *a, |d| {
                    zip3(d, g, av, |g, x| if x > 0.0 { g } else { 0.0 })
                });
            }
            Op::Exp(a) => self.acc(grads, *a, |d| zip3(d, g, out, |g, y| g * y)),
            Op::Log(a) => {
                let av = self.data(*a);
                self.acc(grads, *a, |d| zip3(d, g, av, |g, x| g / x));
            }
            Op::Sqrt(a) => self.acc(grads, *a, |d| {
                zip3(d, g, out, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |d| zip3(d, g, out, |g, s| g * s * (1.0 - s))),
            Op::Minimum(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        if av[i] <= bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        if av[i] > bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        if av[i] >= bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        if av[i] < bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::ClampMin(a, lo) => {
                let av = self.data(*a);
                self.acc(grads, *a, |d| {
                    zip3(d, g, av, |g, x| if x > *lo { g } else { 0.0 })
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    if *ta {
                        gemm(k, n, m, bv, *tb, g, true, d, true);
                    } else {
                        gemm(m, n, k, g, false, bv, !*tb, d, true);
                    }
                });
                self.acc(grads, *b, |d| {
                    if *tb {
                        gemm(n, m, k, g, true, av, *ta, d, true);
                    } else {
                        gemm(k, m, n, av, !*ta, g, false, d, true);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a);
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |d| axpy(d, g, 1.0)),
            Op::AddRow(x, b) => {
                let c = self.value(*b).len();
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| {
                    for row in g.chunks(c) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::MulRow(x, s) => {
                let c = self.value(*s).len();
                let (xv, sv) = (self.data(*x), self.data(*s));
                self.acc(grads, *x, |d| {
                    for (i, v) in d.iter_mut().enumerate() {
                        *v += g[i] * sv[i % c];
                    }
                });
                self.acc(grads, *s, |d| {
                    for i in 0..g.len() {
                        d[i % c] += g[i] * xv[i];
                    }
                });
            }
            Op::ScaleLeading(x, s) => {
                let lead = self.value(*s).len();
                let inner = (g.len() / lead.max(1)).max(1);
                let (xv, sv) = (self.data(*x), self.data(*s));
                self.acc(grads, *x, |d| {
                    for (i, v) in d.iter_mut().enumerate() {
                        *v += g[i] * sv[i / inner];
                    }
                });
                self.acc(grads, *s, |d| {
                    for i in 0..g.len() {
                        d[i / inner] += g[i] * xv[i];
                    }
                });
            }
            Op::AddLeading(x, b) => {
                let lead = self.value(*b).len();
                let inner = (g.len() / lead.max(1)).max(1);
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i / inner] += gv;
                    }
                });
            }
            Op::SoftmaxRows { x, scale } => {
                let c = node.value.shape()[1];
                self.acc(grads, *x, |d| {
                    for ((dr, gr), pr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += scale * pr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let c = node.value.shape()[1];
                self.acc(grads, *x, |d| {
                    for ((dr, gr), lr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] += gr[j] - lr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.shape()[1];
                let gv = self.data(*gamma);
                self.acc(grads, *gamma, |d| {
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * xr[j];
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for gr in g.chunks(c) {
                        axpy(d, gr, 1.0);
                    }
                });
                self.acc(grads, *x, |d| {
                    let mut dxhat = vec![0.0; c];
                    for (i, (dr, gr)) in d.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let xr = &xhat[i * c..(i + 1) * c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xr[j];
                        }
                        let k = rstd[i] / c as f64;
                        for j in 0..c {
                            dr[j] += k * (c as f64 * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            } => {
                let (lq, d) = self.dims2(*q);
                let (lk, dv) = self.dims2(*v);
                let (qv, kv, vv) = (self.data(*q), self.data(*k), self.data(*v));
                // dV = P^T dO
                self.acc(grads, *v, |dst| {
                    gemm(lk, lq, dv, probs, true, g, false, dst, true)
                });
                if self.requires_grad(*q) || self.requires_grad(*k) {
                    // dP = dO V^T, dS = scale * P (dP - rowsum(dP * P))
                    let mut ds = vec![0.0; lq * lk];
                    gemm(lq, dv, lk, g, false, vv, true, &mut ds, false);
                    for (dr, pr) in ds.chunks_mut(lk).zip(probs.chunks(lk)) {
                        let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..lk {
                            dr[j] = scale * pr[j] * (dr[j] - dot);
                        }
                    }
                    self.acc(grads, *q, |dst| {
                        gemm(lq, lk, d, &ds, false, kv, false, dst, true)
                    });
                    self.acc(grads, *k, |dst| {
                        gemm(lk, lq, d, &ds, true, qv, false, dst, true)
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let c_out = node.value.shape()[0];
                let p = geom.col_cols();
                let r = geom.col_rows();
                let (xv, wv) = (self.data(*x), self.data(*w));
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for (c, chunk) in g.chunks(p).enumerate() {
                            d[c] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                self.acc(grads, *w, |d| {
                    if geom.is_pointwise() {
                        gemm(c_out, p, r, g, false, xv, true, d, true);
                    } else {
                        let cols = im2col(xv, geom);
                        gemm(c_out, p, r, g, false, &cols, true, d, true);
                    }
                });
                self.acc(grads, *x, |d| {
                    if geom.is_pointwise() {
                        gemm(r, c_out, p, wv, true, g, false, d, true);
                    } else {
                        let mut dcols = vec![0.0; r * p];
                        gemm(r, c_out, p, wv, true, g, false, &mut dcols, false);
                        col2im(&dcols, geom, d);
                    }
                });
            }
            Op::MaxPool { x, argmax } => self.acc(grads, *x, |d| {
                for (gv, &i) in g.iter().zip(argmax) {
                    d[i] += gv;
                }
            }),
            Op::GlobalAvgPool(x) => {
                let c = g.len();
                let inner = (self.value(*x).len() / c.max(1)).max(1);
                self.acc(grads, *x, |d| {
                    for (i, v) in d.iter_mut().enumerate() {
                        *v += g[i / inner] / inner as f64;
                    }
                });
            }
            Op::DepthwiseXCorr(z, x) => {
                let (c, hz, wz) = self.dims3(*z);
                let (_, hx, wx) = self.dims3(*x);
                let (ho, wo) = (hx - hz + 1, wx - wz + 1);
                let (zd, xd) = (self.data(*z), self.data(*x));
                self.acc(grads, *z, |d| {
                    for ch in 0..c {
                        let gp = &g[ch * ho * wo..(ch + 1) * ho * wo];
                        let xp = &xd[ch * hx * wx..(ch + 1) * hx * wx];
                        for a in 0..hz {
                            for b in 0..wz {
                                let mut s = 0.0;
                                for i in 0..ho {
                                    let xr = &xp[(i + a) * wx + b..(i + a) * wx + b + wo];
                                    let gr = &gp[i * wo..(i + 1) * wo];
                                    s += gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>();
                                }
                                d[ch * hz * wz + a * wz + b] += s;
                            }
                        }
                    }
                });
                self.acc(grads, *x, |d| {
                    for ch in 0..c {
                        let gp = &g[ch * ho * wo..(ch + 1) * ho * wo];
                        let zp = &zd[ch * hz * wz..(ch + 1) * hz * wz];
                        let dp = &mut d[ch * hx * wx..(ch + 1) * hx * wx];
                        for a in 0..hz {
                            for b in 0..wz {
                                let zv = zp[a * wz + b];
                                for i in 0..ho {
                                    let dr = &mut dp[(i + a) * wx + b..(i + a) * wx + b + wo];
                                    let gr = &gp[i * wo..(i + 1) * wo];
                                    dr.iter_mut().zip(gr).for_each(|(o, gv)| *o += zv * gv);
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => match axis {
                Axis::Leading => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        self.acc(grads, p, |d| axpy(d, &g[off..off + len], 1.0));
                        off += len;
                    }
                }
                Axis::Cols => {
                    let total = node.value.shape()[1];
                    let mut off = 0;
                    for &p in parts {
                        let (rows, w) = self.dims2(p);
                        self.acc(grads, p, |d| {
                            for r in 0..rows {
                                axpy(
                                    &mut d[r * w..(r + 1) * w],
                                    &g[r * total + off..r * total + off + w],
                                    1.0,
                                );
                            }
                        });
                        off += w;
                    }
                }
            },
            Op::SliceLeading { x, start } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                let o = start * inner;
                self.acc(grads, *x, |d| axpy(&mut d[o..o + g.len()], g, 1.0));
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims2(*x);
                let w = node.value.shape()[1];
                self.acc(grads, *x, |d| {
                    for i in 0..r {
                        axpy(
                            &mut d[i * c + start..i * c + start + w],
                            &g[i * w..(i + 1) * w],
                            1.0,
                        );
                    }
                });
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.data(*x);
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (sigmoid(xv[i]) - target[i]);
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[id.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }
}

fn axpy(d: &mut [f64], g: &[f64], a: f64) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += a * g);
}

fn zip3(d: &mut [f64], g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) {
    for i in 0..d.len() {
        d[i] += f(g[i], x[i]);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let m = row
        .iter()
        .map(|v| v * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v * scale - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
