//! The four training losses and their labels.
//!
//! * `cls1`: mean two-class cross-entropy over all cells; a cell is positive
//!   when its pixel centre lies inside the target box.
//! * `cls2`: mean binary cross-entropy against a centerness quality label
//!   (zero outside the box).
//! * `loc1`: masked mean of `D = sqrt((x - gx)^2 / gw + (y - gy)^2 / gh)`
//!   between decoded and target centres.
//! * `loc2`: masked mean of `1 - IoU` between decoded and target boxes.
//!
//! The mask is the positive-cell set; an empty mask yields a zero loss.

use serde::Serialize;

use crate::bbox::BoundingBox;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::heads::{HeadNodes, HeadOutputs, MapGeometry, MIN_BOX_SIZE};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Per-cell labels for one frame, in search-patch pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTargets {
    pub gt: BoundingBox,
    pub cls1: Vec<f64>,
    pub cls2: Vec<f64>,
    pub mask: Vec<f64>,
    pub geom: MapGeometry,
}

impl GroundTruthTargets {
    pub fn from_box(gt: BoundingBox, geom: MapGeometry) -> Result<Self> {
        let gt = BoundingBox::new(gt.cx, gt.cy, gt.w, gt.h)?;
        let n = geom.cells();
        let (mut cls1, mut cls2) = (vec![0.0; n], vec![0.0; n]);
        for idx in 0..n {
            let (x, y) = geom.cell_xy(idx);
            if gt.contains(x, y) {
                cls1[idx] = 1.0;
                let (l, r) = (x - gt.left(), gt.right() - x);
                let (t, b) = (y - gt.top(), gt.bottom() - y);
                let ratio = |a: f64, b: f64| {
                    if a.max(b) > 0.0 {
                        a.min(b) / a.max(b)
                    } else {
                        0.0
                    }
                };
                cls2[idx] = (ratio(l, r) * ratio(t, b)).sqrt();
            }
        }
        Ok(Self {
            gt,
            mask: cls1.clone(),
            cls1,
            cls2,
            geom,
        })
    }

    /// Labels with an explicit mask, validated.
    pub fn with_labels(
        gt: BoundingBox,
        geom: MapGeometry,
        cls1: Vec<f64>,
        cls2: Vec<f64>,
        mask: Vec<f64>,
    ) -> Result<Self> {
        let gt = BoundingBox::new(gt.cx, gt.cy, gt.w, gt.h)?;
        let n = geom.cells();
        if cls1.len() != n || cls2.len() != n || mask.len() != n {
            return Err(dim_err(format!("labels must have {n} cells")));
        }
        if cls1.iter().chain(&mask).any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidTarget(
                "cls1 labels and mask must be 0 or 1".into(),
            ));
        }
        if cls2.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidTarget(
                "cls2 labels must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            gt,
            cls1,
            cls2,
            mask,
            geom,
        })
    }

    pub fn positives(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub cls1: f64,
    pub cls2: f64,
    pub loc1: f64,
    pub loc2: f64,
}

impl LossParts {
    /// Unit-weight sum of the four terms.
    pub fn total(&self) -> f64 {
        self.cls1 + self.cls2 + self.loc1 + self.loc2
    }
}

pub fn total_loss(parts: &LossParts) -> f64 {
    parts.total()
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub cls1: NodeId,
    pub cls2: NodeId,
    pub loc1: NodeId,
    pub loc2: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn parts(&self, g: &Graph) -> LossParts {
        let v = |n: NodeId| g.value(n).data()[0];
        LossParts {
            cls1: v(self.cls1),
            cls2: v(self.cls2),
            loc1: v(self.loc1),
            loc2: v(self.loc2),
        }
    }
}

struct Decoded {
    x: NodeId,
    y: NodeId,
    w: NodeId,
    h: NodeId,
}

fn decode_node(g: &mut Graph, loc: NodeId, geom: &MapGeometry) -> Decoded {
    let n = geom.cells();
    let flat = g.reshape(loc, &[4, n]);
    let row = |g: &mut Graph, k: usize| {
        let r = g.slice_leading(flat, k, k + 1);
        g.reshape(r, &[n])
    };
    let (t0, t1, t2, t3) = (row(g, 0), row(g, 1), row(g, 2), row(g, 3));
    let (cx, cy): (Vec<f64>, Vec<f64>) = (0..n).map(|i| geom.cell_xy(i)).unzip();
    let cxn = g.input(Tensor::from_parts(vec![n], cx));
    let cyn = g.input(Tensor::from_parts(vec![n], cy));
    let dx = g.scale(t0, geom.stride);
    let dy = g.scale(t1, geom.stride);
    let size = |g: &mut Graph, t: NodeId| {
        let e = g.exp(t);
        let s = g.scale(e, geom.base);
        g.clamp_min(s, MIN_BOX_SIZE)
    };
    Decoded {
        x: g.add(cxn, dx),
        y: g.add(cyn, dy),
        w: size(g, t2),
        h: size(g, t3),
    }
}

fn masked_mean(g: &mut Graph, v: NodeId, mask: &[f64]) -> NodeId {
    let count = mask.iter().sum::<f64>();
    let m = g.input(Tensor::from_parts(vec![mask.len()], mask.to_vec()));
    let prod = g.mul(v, m);
    let s = g.sum(prod);
    g.scale(s, if count > 0.0 { 1.0 / count } else { 0.0 })
}

fn const_vec(g: &mut Graph, n: usize, v: f64) -> NodeId {
    g.input(Tensor::full(&[n], v))
}

pub fn loc1_node(g: &mut Graph, loc: NodeId, t: &GroundTruthTargets) -> NodeId {
    let n = t.geom.cells();
    let d = decode_node(g, loc, &t.geom);
    let gx = const_vec(g, n, t.gt.cx);
    let gy = const_vec(g, n, t.gt.cy);
    let ex = g.sub(d.x, gx);
    let ey = g.sub(d.y, gy);
    let ex2 = g.mul(ex, ex);
    let ey2 = g.mul(ey, ey);
    let sx = g.scale(ex2, 1.0 / t.gt.w);
    let sy = g.scale(ey2, 1.0 / t.gt.h);
    let s = g.add(sx, sy);
    let dist = g.sqrt(s);
    masked_mean(g, dist, &t.mask)
}

/// Per-cell IoU of decoded boxes against the target.
pub fn iou_node(g: &mut Graph, loc: NodeId, geom: &MapGeometry, gt: &BoundingBox) -> NodeId {
    let n = geom.cells();
    let d = decode_node(g, loc, geom);
    let hw = g.scale(d.w, 0.5);
    let hh = g.scale(d.h, 0.5);
    let l = g.sub(d.x, hw);
    let r = g.add(d.x, hw);
    let tp = g.sub(d.y, hh);
    let b = g.add(d.y, hh);
    let (gl, gr) = (const_vec(g, n, gt.left()), const_vec(g, n, gt.right()));
    let (gt_, gb) = (const_vec(g, n, gt.top()), const_vec(g, n, gt.bottom()));
    let ir = g.minimum(r, gr);
    let il = g.maximum(l, gl);
    let iw = g.sub(ir, il);
    let iw = g.relu(iw);
    let ib = g.minimum(b, gb);
    let it = g.maximum(tp, gt_);
    let ih = g.sub(ib, it);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let area = g.mul(d.w, d.h);
    let ga = const_vec(g, n, gt.area());
    let union = g.add(area, ga);
    let union = g.sub(union, inter);
    g.div(inter, union)
}

pub fn loc2_node(g: &mut Graph, loc: NodeId, t: &GroundTruthTargets) -> NodeId {
    let iou = iou_node(g, loc, &t.geom, &t.gt);
    let neg = g.scale(iou, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    masked_mean(g, one_minus, &t.mask)
}

pub fn cls1_node(g: &mut Graph, cls1: NodeId, t: &GroundTruthTargets) -> NodeId {
    let n = t.geom.cells();
    let flat = g.reshape(cls1, &[2, n]);
    let rows = g.transpose(flat);
    let logp = g.log_softmax_rows(rows);
    let onehot: Vec<f64> = t.cls1.iter().flat_map(|&p| [1.0 - p, p]).collect();
    let oh = g.input(Tensor::from_parts(vec![n, 2], onehot));
    let picked = g.mul(logp, oh);
    let s = g.sum(picked);
    g.scale(s, -1.0 / n as f64)
}

pub fn cls2_node(g: &mut Graph, cls2: NodeId, t: &GroundTruthTargets) -> NodeId {
    let n = t.geom.cells();
    let flat = g.reshape(cls2, &[n]);
    let b = g.bce_with_logits(flat, t.cls2.clone());
    g.mean(b)
}

pub fn loss_nodes(g: &mut Graph, h: &HeadNodes, t: &GroundTruthTargets) -> LossNodes {
    let cls1 = cls1_node(g, h.cls1, t);
    let cls2 = cls2_node(g, h.cls2, t);
    let loc1 = loc1_node(g, h.loc, t);
    let loc2 = loc2_node(g, h.loc, t);
    let a = g.add(cls1, cls2);
    let b = g.add(loc1, loc2);
    let total = g.add(a, b);
    LossNodes {
        cls1,
        cls2,
        loc1,
        loc2,
        total,
    }
}

fn check_field(t: &Tensor, channels: usize, geom: &MapGeometry, what: &'static str) -> Result<()> {
    if t.shape() != [channels, geom.n, geom.n] {
        return Err(dim_err(format!(
            "{what} must be {channels}x{}x{}, got {:?}",
            geom.n,
            geom.n,
            t.shape()
        )));
    }
    if !t.all_finite() {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

fn eval(build: impl FnOnce(&mut Graph) -> NodeId) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let out = build(&mut g);
    g.value(out).data()[0]
}

pub fn loss_loc1(loc: &Tensor, t: &GroundTruthTargets) -> Result<f64> {
    check_field(loc, 4, &t.geom, "location field")?;
    Ok(eval(|g| {
        let l = g.input(loc.clone());
        loc1_node(g, l, t)
    }))
}

pub fn loss_loc2(loc: &Tensor, t: &GroundTruthTargets) -> Result<f64> {
    check_field(loc, 4, &t.geom, "location field")?;
    Ok(eval(|g| {
        let l = g.input(loc.clone());
        loc2_node(g, l, t)
    }))
}

pub fn loss_cls(cls1: &Tensor, cls2: &Tensor, t: &GroundTruthTargets) -> Result<(f64, f64)> {
    check_field(cls1, 2, &t.geom, "cls1 logits")?;
    check_field(cls2, 1, &t.geom, "cls2 logits")?;
    let a = eval(|g| {
        let c = g.input(cls1.clone());
        cls1_node(g, c, t)
    });
    let b = eval(|g| {
        let c = g.input(cls2.clone());
        cls2_node(g, c, t)
    });
    Ok((a, b))
}

pub fn loss_parts(out: &HeadOutputs, t: &GroundTruthTargets) -> Result<LossParts> {
    let (cls1, cls2) = loss_cls(&out.cls1, &out.cls2, t)?;
    Ok(LossParts {
        cls1,
        cls2,
        loc1: loss_loc1(&out.loc, t)?,
        loc2: loss_loc2(&out.loc, t)?,
    })
}
