//! Temporally calibrated convolution.
//!
//! A base convolution `(W_b, b_b)` is rescaled per frame by factors
//! `alpha_w`, `alpha_b` (one per output channel) that are generated from a
//! fixed-size temporal state. Two state models are provided:
//!
//! * attention-based: a `C_r x S x S` map `X*` updated by cross-attention
//!   between the pooled current input and the previous `X*`;
//! * queue-based (online variant): the last `L` global descriptors of the
//!   layer input, combined by a 1-D temporal convolution.
//!
//! The factor heads end in zero-initialised layers, so a fresh layer behaves
//! exactly like its base convolution.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Conv, FeedForward, Init};
use crate::params::{ParamGroup, ParamId, ParamStore, TensorArchive};
use crate::tensor::{FeatureMap, Tensor};

/// The base convolution of a calibrated layer.
pub type BaseConvParams = Conv;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    /// Side `S` of the adaptive max-pool applied to layer inputs.
    pub pooled: usize,
    /// `C_r = C_in / reduction`.
    pub reduction: usize,
    /// Hidden width of the factor heads is `C_r / head_reduction`.
    pub head_reduction: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            pooled: 4,
            reduction: 4,
            head_reduction: 4,
        }
    }
}

impl CalibConfig {
    pub fn reduced(&self, c_in: usize) -> usize {
        (c_in / self.reduction.max(1)).max(1)
    }

    fn hidden(&self, c_r: usize) -> usize {
        (c_r / self.head_reduction.max(1)).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TemporalMode {
    /// Attention-updated fixed-size state.
    Attention,
    /// Queue of the last `window` frame descriptors.
    Online { window: usize },
    /// No temporal calibration (factors fixed at one).
    Blind,
}

/// Accumulated temporal knowledge `X*` of one calibrated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalCalibState {
    x_star: FeatureMap,
}

impl TemporalCalibState {
    pub fn x_star(&self) -> &FeatureMap {
        &self.x_star
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.push("x_star", self.x_star.clone());
        a
    }

    /// Size of the serialised state in bytes.
    pub fn serialized_len(&self) -> usize {
        self.to_archive().to_bytes().len()
    }
}

/// Per-output-channel calibration factors.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationFactors {
    pub alpha_w: Tensor,
    pub alpha_b: Tensor,
}

impl CalibrationFactors {
    pub fn ones(c_out: usize) -> Self {
        Self {
            alpha_w: Tensor::ones(&[c_out]),
            alpha_b: Tensor::ones(&[c_out]),
        }
    }
}

/// `(W_b * alpha_w) conv x + b_b * alpha_b`, with `alpha_w[o]` scaling the
/// whole filter of output channel `o`.
pub fn calibrated_conv_node(
    g: &mut Graph,
    base: &Conv,
    x: NodeId,
    alpha_w: NodeId,
    alpha_b: NodeId,
) -> NodeId {
    let (w, b) = (g.param(base.weight), g.param(base.bias));
    let wt = g.scale_leading(w, alpha_w);
    let bt = g.mul(b, alpha_b);
    g.conv2d(x, wt, Some(bt), base.stride, base.pad)
}

fn check_input(base: &Conv, x: &FeatureMap) -> Result<()> {
    let s = x.shape();
    if s.len() != 3 || s[0] != base.c_in {
        return Err(dim_err(format!(
            "layer expects {} input channels, got shape {s:?}",
            base.c_in
        )));
    }
    if s[1] + 2 * base.pad < base.kernel || s[2] + 2 * base.pad < base.kernel {
        return Err(dim_err(format!(
            "input {s:?} smaller than the {}x{} kernel",
            base.kernel, base.kernel
        )));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("layer input"));
    }
    Ok(())
}

/// Value-level calibrated convolution.
pub fn att_tada_forward(
    store: &ParamStore,
    x: &FeatureMap,
    base: &Conv,
    f: &CalibrationFactors,
) -> Result<FeatureMap> {
    check_input(base, x)?;
    if f.alpha_w.len() != base.c_out || f.alpha_b.len() != base.c_out {
        return Err(dim_err(format!(
            "factors of length {}/{} for {} output channels",
            f.alpha_w.len(),
            f.alpha_b.len(),
            base.c_out
        )));
    }
    let mut g = Graph::inference(store);
    let xn = g.input(x.clone());
    let aw = g.input(f.alpha_w.clone());
    let ab = g.input(f.alpha_b.clone());
    let out = calibrated_conv_node(&mut g, base, xn, aw, ab);
    Ok(g.value(out).clone())
}

/// Networks that maintain `X*` and map it to calibration factors.
#[derive(Clone, Copy, Debug)]
pub struct AttCalibration {
    pub f_init: Conv,
    pub f_q: Conv,
    pub f_k: Conv,
    pub f_v: Conv,
    pub f_w: FeedForward,
    pub f_b: FeedForward,
    pub pooled: usize,
    pub c_r: usize,
}

impl AttCalibration {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &CalibConfig,
        rng: &mut R,
    ) -> Self {
        let grp = ParamGroup::Calibration;
        let c_r = cfg.reduced(c_in);
        let hidden = cfg.hidden(c_r);
        Self {
            f_init: Conv::pointwise(store, &format!("{name}.f_init"), grp, c_in, c_r, rng),
            f_q: Conv::pointwise(store, &format!("{name}.f_q"), grp, c_in, c_r, rng),
            f_k: Conv::pointwise(store, &format!("{name}.f_k"), grp, c_r, c_r, rng),
            f_v: Conv::pointwise(store, &format!("{name}.f_v"), grp, c_r, c_r, rng),
            f_w: FeedForward::init(
                store,
                &format!("{name}.f_w"),
                grp,
                c_r,
                hidden,
                c_out,
                true,
                rng,
            ),
            f_b: FeedForward::init(
                store,
                &format!("{name}.f_b"),
                grp,
                c_r,
                hidden,
                c_out,
                true,
                rng,
            ),
            pooled: cfg.pooled,
            c_r,
        }
    }

    /// `X*_0 = F_init(MaxPool(X_1))`.
    pub fn init_node(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let pooled = g.adaptive_max_pool(x, self.pooled);
        self.f_init.forward(g, pooled)
    }

    /// `X*_t = Attention(F_q(MaxPool(X_t)), F_k(X*_{t-1}), F_v(X*_{t-1}))`.
    pub fn update_node(&self, g: &mut Graph, prev: NodeId, x: NodeId) -> NodeId {
        let pooled = g.adaptive_max_pool(x, self.pooled);
        let q = self.f_q.forward(g, pooled);
        let k = self.f_k.forward(g, prev);
        let v = self.f_v.forward(g, prev);
        let (qt, kt, vt) = (
            g.tokens_from_map(q),
            g.tokens_from_map(k),
            g.tokens_from_map(v),
        );
        let att = g.attention(qt, kt, vt, 1.0 / (self.c_r as f64).sqrt());
        g.map_from_tokens(att, self.pooled, self.pooled)
    }

    /// `alpha = F(GAP(X*)) + 1` for both weight and bias.
    pub fn factors_node(&self, g: &mut Graph, x_star: NodeId) -> (NodeId, NodeId) {
        let desc = g.global_avg_pool(x_star);
        let w = self.f_w.forward_vec(g, desc);
        let b = self.f_b.forward_vec(g, desc);
        (g.add_scalar(w, 1.0), g.add_scalar(b, 1.0))
    }

    fn check_pool(&self, x: &FeatureMap) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.f_q.c_in {
            return Err(dim_err(format!(
                "calibration expects {} channels, got shape {s:?}",
                self.f_q.c_in
            )));
        }
        if s[1] < self.pooled || s[2] < self.pooled {
            return Err(Error::Config(format!(
                "input {}x{} is smaller than the pooled size {}",
                s[1], s[2], self.pooled
            )));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("calibration input"));
        }
        Ok(())
    }

    pub fn init_state(&self, store: &ParamStore, x1: &FeatureMap) -> Result<TemporalCalibState> {
        self.check_pool(x1)?;
        let mut g = Graph::inference(store);
        let xn = g.input(x1.clone());
        let out = self.init_node(&mut g, xn);
        Ok(TemporalCalibState {
            x_star: g.value(out).clone(),
        })
    }

    pub fn update_state(
        &self,
        store: &ParamStore,
        state: &TemporalCalibState,
        x: &FeatureMap,
    ) -> Result<TemporalCalibState> {
        self.check_pool(x)?;
        self.check_state(state)?;
        let mut g = Graph::inference(store);
        let prev = g.input(state.x_star.clone());
        let xn = g.input(x.clone());
        let out = self.update_node(&mut g, prev, xn);
        let next = TemporalCalibState {
            x_star: g.value(out).clone(),
        };
        if next.x_star.shape() != state.x_star.shape() {
            return Err(Error::Invariant(format!(
                "temporal state changed shape {:?} -> {:?}",
                state.x_star.shape(),
                next.x_star.shape()
            )));
        }
        Ok(next)
    }

    pub fn calibration_factors(
        &self,
        store: &ParamStore,
        state: &TemporalCalibState,
    ) -> Result<CalibrationFactors> {
        self.check_state(state)?;
        let mut g = Graph::inference(store);
        let xs = g.input(state.x_star.clone());
        let (w, b) = self.factors_node(&mut g, xs);
        let f = CalibrationFactors {
            alpha_w: g.value(w).clone(),
            alpha_b: g.value(b).clone(),
        };
        if !(f.alpha_w.all_finite() && f.alpha_b.all_finite()) {
            return Err(Error::NonFinite("calibration factors"));
        }
        Ok(f)
    }

    fn check_state(&self, state: &TemporalCalibState) -> Result<()> {
        let want = [self.c_r, self.pooled, self.pooled];
        if state.x_star.shape() != want {
            return Err(Error::Invariant(format!(
                "temporal state has shape {:?}, expected {want:?}",
                state.x_star.shape()
            )));
        }
        Ok(())
    }
}

/// Bounded queue of per-frame global descriptors, newest last.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorQueue {
    window: usize,
    items: VecDeque<Tensor>,
}

impl DescriptorQueue {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            items: VecDeque::new(),
        }
    }

    pub fn push(&mut self, d: Tensor) {
        if self.items.len() == self.window {
            self.items.pop_front();
        }
        self.items.push_back(d);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.items.iter()
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (i, t) in self.items.iter().enumerate() {
            a.push(format!("desc.{i}"), t.clone());
        }
        a
    }
}

/// Calibration of the queue-based variant: a temporal convolution of kernel
/// `L` over the descriptors (missing history is zero), ReLU, then the
/// zero-initialised factor heads.
#[derive(Clone, Copy, Debug)]
pub struct OnlineCalibration {
    /// `[L * C_in, C_r]`; row block `j` weighs the descriptor `j` frames back.
    pub temporal_w: ParamId,
    pub temporal_b: ParamId,
    pub f_w: FeedForward,
    pub f_b: FeedForward,
    pub window: usize,
    pub c_in: usize,
}

impl OnlineCalibration {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        window: usize,
        cfg: &CalibConfig,
        rng: &mut R,
    ) -> Self {
        let grp = ParamGroup::Calibration;
        let window = window.max(1);
        let c_r = cfg.reduced(c_in);
        let hidden = cfg.hidden(c_r);
        let temporal_w = store.add_he(
            format!("{name}.temporal.weight"),
            grp,
            &[window * c_in, c_r],
            window * c_in,
            rng,
        );
        let temporal_b = store.add(format!("{name}.temporal.bias"), grp, Tensor::zeros(&[c_r]));
        Self {
            temporal_w,
            temporal_b,
            f_w: FeedForward::init(
                store,
                &format!("{name}.f_w"),
                grp,
                c_r,
                hidden,
                c_out,
                true,
                rng,
            ),
            f_b: FeedForward::init(
                store,
                &format!("{name}.f_b"),
                grp,
                c_r,
                hidden,
                c_out,
                true,
                rng,
            ),
            window,
            c_in,
        }
    }

    /// Factors from descriptor nodes ordered oldest to newest, `None` when
    /// the queue is empty.
    pub fn factors_node(&self, g: &mut Graph, queue: &[NodeId]) -> Option<(NodeId, NodeId)> {
        if queue.is_empty() {
            return None;
        }
        let mut slots = Vec::with_capacity(self.window);
        for j in 0..self.window {
            let d = if j < queue.len() {
                queue[queue.len() - 1 - j]
            } else {
                g.input(Tensor::zeros(&[self.c_in]))
            };
            slots.push(g.reshape(d, &[1, self.c_in]));
        }
        let stacked = if slots.len() == 1 {
            slots[0]
        } else {
            g.concat_cols(&slots)
        };
        let (w, b) = (g.param(self.temporal_w), g.param(self.temporal_b));
        let h = g.matmul(stacked, w);
        let h = g.add_row(h, b);
        let h = g.relu(h);
        let c_r = g.shape(h)[1];
        let h = g.reshape(h, &[c_r]);
        let aw = self.f_w.forward_vec(g, h);
        let ab = self.f_b.forward_vec(g, h);
        Some((g.add_scalar(aw, 1.0), g.add_scalar(ab, 1.0)))
    }
}

/// Value-level online calibrated convolution: `x` is convolved with factors
/// computed from `queue` (which should already contain `x`'s descriptor).
pub fn online_tada_forward(
    store: &ParamStore,
    queue: &DescriptorQueue,
    base: &Conv,
    cfg: &OnlineCalibration,
    x: &FeatureMap,
) -> Result<FeatureMap> {
    check_input(base, x)?;
    if queue.len() > cfg.window {
        return Err(Error::Config(format!(
            "queue of {} exceeds window {}",
            queue.len(),
            cfg.window
        )));
    }
    let mut g = Graph::inference(store);
    let descs: Vec<NodeId> = queue
        .iter()
        .map(|d| {
            if d.len() == cfg.c_in {
                Ok(g.input(d.clone()))
            } else {
                Err(dim_err(format!(
                    "descriptor of length {} for {} channels",
                    d.len(),
                    cfg.c_in
                )))
            }
        })
        .collect::<Result<_>>()?;
    let xn = g.input(x.clone());
    let out = match cfg.factors_node(&mut g, &descs) {
        Some((aw, ab)) => calibrated_conv_node(&mut g, base, xn, aw, ab),
        None => base.forward(&mut g, xn),
    };
    Ok(g.value(out).clone())
}

#[derive(Clone, Copy, Debug)]
pub enum Calibration {
    Attention(AttCalibration),
    Online(OnlineCalibration),
    Blind,
}

/// Value-level temporal state of one calibrated layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerState {
    Attention(TemporalCalibState),
    Online(DescriptorQueue),
    Blind,
}

impl LayerState {
    pub fn to_archive(&self) -> TensorArchive {
        match self {
            Self::Attention(s) => s.to_archive(),
            Self::Online(q) => q.to_archive(),
            Self::Blind => TensorArchive::new(),
        }
    }
}

/// Tape-level counterpart of [`LayerState`].
#[derive(Clone, Debug)]
pub enum LayerStateNode {
    Attention(NodeId),
    Online {
        queue: VecDeque<NodeId>,
        window: usize,
    },
    Blind,
}

impl LayerStateNode {
    pub fn bind(g: &mut Graph, s: &LayerState) -> Self {
        match s {
            LayerState::Attention(c) => Self::Attention(g.input(c.x_star.clone())),
            LayerState::Online(q) => Self::Online {
                queue: q.iter().map(|d| g.input(d.clone())).collect(),
                window: q.window(),
            },
            LayerState::Blind => Self::Blind,
        }
    }

    pub fn extract(&self, g: &Graph) -> LayerState {
        match self {
            Self::Attention(n) => LayerState::Attention(TemporalCalibState {
                x_star: g.value(*n).clone(),
            }),
            Self::Online { queue, window } => {
                let mut q = DescriptorQueue::new(*window);
                for &n in queue {
                    q.push(g.value(n).clone());
                }
                LayerState::Online(q)
            }
            Self::Blind => LayerState::Blind,
        }
    }
}

/// A base convolution plus its (optional) temporal calibration.
#[derive(Clone, Copy, Debug)]
pub struct TadaConv {
    pub base: Conv,
    pub calib: Calibration,
}

impl TadaConv {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        mode: TemporalMode,
        cfg: &CalibConfig,
        rng: &mut R,
    ) -> Self {
        let base = Conv::init(
            store,
            name,
            ParamGroup::Backbone,
            c_in,
            c_out,
            kernel,
            1,
            0,
            Init::He,
            rng,
        );
        let calib = match mode {
            TemporalMode::Attention => Calibration::Attention(AttCalibration::init(
                store,
                &format!("{name}.calib"),
                c_in,
                c_out,
                cfg,
                rng,
            )),
            TemporalMode::Online { window } => Calibration::Online(OnlineCalibration::init(
                store,
                &format!("{name}.calib"),
                c_in,
                c_out,
                window,
                cfg,
                rng,
            )),
            TemporalMode::Blind => Calibration::Blind,
        };
        Self { base, calib }
    }

    /// Plain convolution with factors one.
    pub fn forward_static(&self, g: &mut Graph, x: NodeId) -> NodeId {
        self.base.forward(g, x)
    }

    /// One temporal step: updates (or initialises, when `state` is `None`)
    /// the state from `x`, derives factors and convolves.
    pub fn forward_step(
        &self,
        g: &mut Graph,
        x: NodeId,
        state: Option<LayerStateNode>,
    ) -> (NodeId, LayerStateNode) {
        match (&self.calib, state) {
            (Calibration::Attention(c), prev) => {
                let prev = match prev {
                    Some(LayerStateNode::Attention(p)) => p,
                    Some(other) => panic!("attention layer given {other:?}"),
                    None => c.init_node(g, x),
                };
                let next = c.update_node(g, prev, x);
                let (aw, ab) = c.factors_node(g, next);
                (
                    calibrated_conv_node(g, &self.base, x, aw, ab),
                    LayerStateNode::Attention(next),
                )
            }
            (Calibration::Online(c), prev) => {
                let mut queue = match prev {
                    Some(LayerStateNode::Online { queue, .. }) => queue,
                    Some(other) => panic!("online layer given {other:?}"),
                    None => VecDeque::new(),
                };
                let d = g.global_avg_pool(x);
                if queue.len() == c.window {
                    queue.pop_front();
                }
                queue.push_back(d);
                let descs: Vec<NodeId> = queue.iter().copied().collect();
                let out = match c.factors_node(g, &descs) {
                    Some((aw, ab)) => calibrated_conv_node(g, &self.base, x, aw, ab),
                    None => self.base.forward(g, x),
                };
                (
                    out,
                    LayerStateNode::Online {
                        queue,
                        window: c.window,
                    },
                )
            }
            (Calibration::Blind, _) => (self.base.forward(g, x), LayerStateNode::Blind),
        }
    }
}
