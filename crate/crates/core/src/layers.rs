//! Parameterised building blocks shared by the backbone, transformer and heads.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with `std = sqrt(2 / fan_in)`, for layers followed by ReLU.
    He,
    /// Normal with `std = sqrt(1 / fan_in)`.
    Lecun,
    Zero,
}

fn init_weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    group: ParamGroup,
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> ParamId {
    match init {
        Init::He => store.add_he(name, group, shape, fan_in, rng),
        Init::Lecun => store.add_lecun(name, group, shape, fan_in, rng),
        Init::Zero => store.add(name, group, Tensor::zeros(shape)),
    }
}

/// Square-kernel 2-D convolution with bias over a single `C x H x W` map.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = init_weight(
            store,
            format!("{name}.weight"),
            group,
            &[c_out, c_in, kernel, kernel],
            fan_in,
            init,
            rng,
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[c_out]));
        Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn pointwise<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        Self::init(store, name, group, c_in, c_out, 1, 1, 0, Init::Lecun, rng)
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Per-token affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = init_weight(
            store,
            format!("{name}.weight"),
            group,
            &[d_in, d_out],
            d_in,
            init,
            rng,
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// `x: [L, in] -> [L, out]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    /// `zero_last` zero-initialises the output layer so the block starts as the
    /// constant zero map.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        let last = if zero_last { Init::Zero } else { Init::Lecun };
        Self {
            l1: Linear::init(
                store,
                &format!("{name}.fc1"),
                group,
                d_in,
                hidden,
                Init::He,
                rng,
            ),
            l2: Linear::init(
                store,
                &format!("{name}.fc2"),
                group,
                hidden,
                d_out,
                last,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        self.l2.forward(g, h)
    }

    /// Applies the block to a length-`in` vector, returning a length-`out` vector.
    pub fn forward_vec(&self, g: &mut Graph, v: NodeId) -> NodeId {
        let row = g.reshape(v, &[1, self.l1.d_in]);
        let out = self.forward(g, row);
        g.reshape(out, &[self.l2.d_out])
    }
}

/// Layer-norm affine parameters over `C` channels.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        channels: usize,
        eps: f64,
    ) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[channels])),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm_rows(x, gm, bt, self.eps)
    }
}
