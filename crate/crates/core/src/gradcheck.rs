//! Central finite-difference checks for the tape's analytic gradients.
//!
//! The error measure is the norm-wise relative error
//! `|g_analytic - g_numeric| / max(|g_analytic| + |g_numeric|, 1e-12)` over
//! every checked coordinate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::at_trans::{AtTrans, TransformerConfig};
use crate::attention::{multi_head_node, AttentionParams};
use crate::bbox::BoundingBox;
use crate::graph::{Graph, NodeId};
use crate::heads::MapGeometry;
use crate::losses::{cls1_node, cls2_node, loc1_node, loc2_node, GroundTruthTargets};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::temporal_conv::{CalibConfig, Calibration, TadaConv, TemporalMode};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
    pub coords: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.rel_error.is_finite() && self.rel_error < tol
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

/// Coordinates probed per tensor: all of them when small, otherwise an evenly
/// strided subset of `max_coords`.
fn probe_coords(len: usize, max_coords: usize) -> Vec<usize> {
    if len <= max_coords {
        return (0..len).collect();
    }
    let stride = len as f64 / max_coords as f64;
    (0..max_coords)
        .map(|i| (i as f64 * stride) as usize)
        .collect()
}

fn eval_scalar(g: &Graph, id: NodeId) -> f64 {
    let v = g.value(id);
    assert_eq!(v.len(), 1, "gradient check needs a scalar output");
    v.data()[0]
}

/// Checks gradients w.r.t. the parameters `ids` of `store`.
pub fn check_params(
    name: &str,
    store: &ParamStore,
    ids: &[ParamId],
    step: f64,
    max_coords: usize,
    build: impl Fn(&mut Graph) -> NodeId,
) -> GradCheck {
    let trainable: Vec<ParamId> = ids.to_vec();
    let mut analytic = Vec::new();
    {
        let mut g = Graph::new(store);
        let out = build(&mut g);
        let grads = g.backward(out);
        for &id in &trainable {
            let gt = grads
                .param(id)
                .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
            for c in probe_coords(gt.len(), max_coords) {
                analytic.push(gt.data()[c]);
            }
        }
    }
    let mut numeric = Vec::new();
    let mut work = store.clone();
    for &id in &trainable {
        for c in probe_coords(store.get(id).len(), max_coords) {
            let orig = work.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + step;
            let fp = {
                let mut g = Graph::inference(&work);
                let o = build(&mut g);
                eval_scalar(&g, o)
            };
            work.get_mut(id).data_mut()[c] = orig - step;
            let fm = {
                let mut g = Graph::inference(&work);
                let o = build(&mut g);
                eval_scalar(&g, o)
            };
            work.get_mut(id).data_mut()[c] = orig;
            numeric.push((fp - fm) / (2.0 * step));
        }
    }
    GradCheck {
        name: name.to_string(),
        rel_error: rel_error(&analytic, &numeric),
        coords: analytic.len(),
    }
}

/// Checks gradients w.r.t. differentiable inputs.
pub fn check_inputs(
    name: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    step: f64,
    build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
) -> GradCheck {
    let mut analytic = Vec::new();
    {
        let mut g = Graph::inference(store);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        let grads = g.backward(out);
        for (&id, t) in ids.iter().zip(inputs) {
            let gt = grads.node(id).unwrap_or_else(|| Tensor::zeros(t.shape()));
            analytic.extend_from_slice(gt.data());
        }
    }
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::inference(store);
        let ids: Vec<NodeId> = ts.iter().map(|t| g.input(t.clone())).collect();
        let o = build(&mut g, &ids);
        eval_scalar(&g, o)
    };
    for i in 0..work.len() {
        for c in 0..work[i].len() {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + step;
            let fp = eval(&work);
            work[i].data_mut()[c] = orig - step;
            let fm = eval(&work);
            work[i].data_mut()[c] = orig;
            numeric.push((fp - fm) / (2.0 * step));
        }
    }
    GradCheck {
        name: name.to_string(),
        rel_error: rel_error(&analytic, &numeric),
        coords: analytic.len(),
    }
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights so
/// every output element contributes a distinct sensitivity.
pub fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                ^ seed.wrapping_mul(0xD1B5_4A32_D192_ED03);
            ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    let wn = g.input(Tensor::from_parts(shape, w));
    let prod = g.mul(x, wn);
    g.sum(prod)
}

/// Overwrites `ids` with Gaussian noise of std `std`; norm scales (names
/// ending in `gamma`) get the noise added to their value instead.
pub fn perturb(store: &mut ParamStore, ids: &[ParamId], std: f64, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for &id in ids {
        let noise = Tensor::randn(store.get(id).shape(), std, &mut r);
        if store.name(id).ends_with("gamma") {
            let t = store.get_mut(id);
            t.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(a, n)| *a += n);
        } else {
            *store.get_mut(id) = noise;
        }
    }
}

fn multi_head_suite() -> Vec<GradCheck> {
    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let p = AttentionParams::init(&mut store, "mh", ParamGroup::Head, 6, 3, &mut r)
        .expect("6 channels split into 3 heads");
    let q = Tensor::randn(&[4, 6], 1.0, &mut r);
    let kv = Tensor::randn(&[5, 6], 1.0, &mut r);
    let params = check_params(
        "multi_head params",
        &store,
        &[p.wq, p.wk, p.wv, p.wo],
        DEFAULT_STEP,
        64,
        |g| {
            let (qn, kn) = (g.input(q.clone()), g.input(kv.clone()));
            let o = multi_head_node(g, &p, qn, kn, kn);
            weighted_sum(g, o, 1)
        },
    );
    let inputs = check_inputs(
        "multi_head inputs",
        &store,
        &[q.clone(), kv.clone()],
        DEFAULT_STEP,
        |g, ids| {
            let o = multi_head_node(g, &p, ids[0], ids[1], ids[1]);
            weighted_sum(g, o, 2)
        },
    );
    vec![params, inputs]
}

/// Two calibrated steps: state update, factors and the calibrated conv.
fn calibration_suite() -> Vec<GradCheck> {
    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(20);
    let layer = TadaConv::init(
        &mut store,
        "l",
        8,
        3,
        3,
        TemporalMode::Attention,
        &CalibConfig::default(),
        &mut r,
    );
    let Calibration::Attention(c) = layer.calib else {
        unreachable!("attention mode")
    };
    let heads: Vec<ParamId> = [c.f_w, c.f_b]
        .iter()
        .flat_map(|f| [f.l1.weight, f.l1.bias, f.l2.weight, f.l2.bias])
        .collect();
    perturb(&mut store, &heads, 0.5, 21);
    let frames: Vec<Tensor> = (0..2)
        .map(|_| Tensor::randn(&[8, 5, 5], 1.0, &mut r))
        .collect();
    let all: Vec<ParamId> = store.ids().collect();
    let build = |g: &mut Graph, xs: &[NodeId]| {
        let mut state = None;
        let mut outs = Vec::new();
        for &x in xs {
            let (o, s) = layer.forward_step(g, x, state);
            outs.push(o);
            state = Some(s);
        }
        let cat = g.concat_leading(&outs);
        weighted_sum(g, cat, 3)
    };
    let params = check_params("calibration params", &store, &all, DEFAULT_STEP, 24, |g| {
        let xs: Vec<NodeId> = frames.iter().map(|f| g.input(f.clone())).collect();
        build(g, &xs)
    });
    let inputs = check_inputs("calibration inputs", &store, &frames, DEFAULT_STEP, build);
    vec![params, inputs]
}

fn encode_decode_suite() -> Vec<GradCheck> {
    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(30);
    let t =
        AtTrans::init(&mut store, 4, &TransformerConfig::toy(), &mut r).expect("toy transformer");
    let all: Vec<ParamId> = store.ids().collect();
    perturb(&mut store, &all, 0.3, 31);
    let raw = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
    let adj = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
    let build = |g: &mut Graph, raw: NodeId, adj: NodeId| {
        let p0 = t.init_prior_node(g, raw);
        let ft = t.input_node(g, adj);
        let (p1, refined) = t.step_node(g, p0, ft);
        let cat = g.concat_leading(&[p1, refined]);
        weighted_sum(g, cat, 4)
    };
    let params = check_params(
        "encode/decode params",
        &store,
        &all,
        DEFAULT_STEP,
        16,
        |g| {
            let (a, b) = (g.input(raw.clone()), g.input(adj.clone()));
            build(g, a, b)
        },
    );
    let inputs = check_inputs(
        "encode/decode inputs",
        &store,
        &[raw.clone(), adj.clone()],
        DEFAULT_STEP,
        |g, ids| build(g, ids[0], ids[1]),
    );
    vec![params, inputs]
}

fn loss_suite() -> Vec<GradCheck> {
    let geom = MapGeometry {
        n: 4,
        stride: 8.0,
        offset: 4.0,
        base: 16.0,
    };
    let gt = BoundingBox::new(17.0, 15.0, 15.0, 13.0).expect("positive size");
    let t = GroundTruthTargets::from_box(gt, geom).expect("box inside the map");
    let mut r = ChaCha8Rng::seed_from_u64(40);
    let cls1 = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
    let cls2 = Tensor::randn(&[1, 4, 4], 1.0, &mut r);
    let loc = Tensor::randn(&[4, 4, 4], 0.3, &mut r);
    let store = ParamStore::new();
    let one = std::slice::from_ref;
    vec![
        check_inputs("loss cls1", &store, one(&cls1), DEFAULT_STEP, |g, x| {
            cls1_node(g, x[0], &t)
        }),
        check_inputs("loss cls2", &store, one(&cls2), DEFAULT_STEP, |g, x| {
            cls2_node(g, x[0], &t)
        }),
        check_inputs("loss loc1", &store, one(&loc), DEFAULT_STEP, |g, x| {
            loc1_node(g, x[0], &t)
        }),
        check_inputs("loss loc2", &store, one(&loc), DEFAULT_STEP, |g, x| {
            loc2_node(g, x[0], &t)
        }),
    ]
}

/// Gradient checks on toy sizes (at most 12 channels, maps at most 5x5) for
/// multi-head attention, the calibration path, the transformer encoder and
/// decoder, and each loss.
pub fn standard_suite() -> Vec<GradCheck> {
    let mut all = multi_head_suite();
    all.extend(calibration_suite());
    all.extend(encode_decode_suite());
    all.extend(loss_suite());
    all
}
