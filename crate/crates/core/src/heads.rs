//! Classification and box-regression heads over the refined similarity map,
//! and the mapping from map cells to search-patch pixels.

use rand::Rng;

use crate::backbone::{cell_center, map_size, total_stride, SEARCH_SIZE};
use crate::bbox::BoundingBox;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Conv, Init};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::FeatureMap;

/// Placement of an `n x n` response map inside the search patch.
///
/// Cell `(i, j)` (row, column) has pixel centre
/// `(offset + stride * j, offset + stride * i)`. A location field
/// `(t0, t1, t2, t3)` decodes to the box
/// `(cx + stride * t0, cy + stride * t1, base * exp(t2), base * exp(t3))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapGeometry {
    pub n: usize,
    pub stride: f64,
    pub offset: f64,
    pub base: f64,
}

/// Smallest decoded box side in pixels.
pub const MIN_BOX_SIZE: f64 = 1e-4;

impl MapGeometry {
    /// Geometry of the backbone's correlation map in a search patch.
    pub fn search() -> Self {
        Self {
            n: map_size(),
            stride: total_stride() as f64,
            offset: cell_center(0),
            base: SEARCH_SIZE as f64 / 4.0,
        }
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    pub fn cell_xy(&self, idx: usize) -> (f64, f64) {
        let (i, j) = (idx / self.n, idx % self.n);
        (
            self.offset + self.stride * j as f64,
            self.offset + self.stride * i as f64,
        )
    }

    pub fn decode(&self, idx: usize, t: [f64; 4]) -> BoundingBox {
        let (x, y) = self.cell_xy(idx);
        BoundingBox {
            cx: x + self.stride * t[0],
            cy: y + self.stride * t[1],
            w: (self.base * t[2].exp()).max(MIN_BOX_SIZE),
            h: (self.base * t[3].exp()).max(MIN_BOX_SIZE),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    /// `2 x n x n` background/foreground logits.
    pub cls1: FeatureMap,
    /// `1 x n x n` quality logits.
    pub cls2: FeatureMap,
    /// `4 x n x n` box fields.
    pub loc: FeatureMap,
}

impl HeadOutputs {
    pub fn map_size(&self) -> usize {
        self.loc.shape()[1]
    }

    pub fn loc_at(&self, idx: usize) -> [f64; 4] {
        let nn = self.map_size() * self.map_size();
        let d = self.loc.data();
        [d[idx], d[nn + idx], d[2 * nn + idx], d[3 * nn + idx]]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub cls1: NodeId,
    pub cls2: NodeId,
    pub loc: NodeId,
}

#[derive(Clone, Copy, Debug)]
struct Branch {
    conv: Conv,
    out: Conv,
}

impl Branch {
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Head;
        Self {
            conv: Conv::init(
                store,
                &format!("{name}.conv"),
                g,
                c,
                c,
                3,
                1,
                1,
                Init::He,
                rng,
            ),
            out: Conv::init(
                store,
                &format!("{name}.out"),
                g,
                c,
                out,
                1,
                1,
                0,
                Init::Lecun,
                rng,
            ),
        }
    }

    fn node(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.conv.forward(g, x);
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

/// Three `conv3x3 -> ReLU -> conv1x1` branches.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    cls1: Branch,
    cls2: Branch,
    loc: Branch,
    channels: usize,
}

impl Heads {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Self {
        Self {
            cls1: Branch::init(store, "head.cls1", channels, 2, rng),
            cls2: Branch::init(store, "head.cls2", channels, 1, rng),
            loc: Branch::init(store, "head.loc", channels, 4, rng),
            channels,
        }
    }

    pub fn node(&self, g: &mut Graph, refined: NodeId) -> HeadNodes {
        HeadNodes {
            cls1: self.cls1.node(g, refined),
            cls2: self.cls2.node(g, refined),
            loc: self.loc.node(g, refined),
        }
    }

    pub fn forward(&self, store: &ParamStore, refined: &FeatureMap) -> Result<HeadOutputs> {
        let s = refined.shape();
        if s.len() != 3 || s[0] != self.channels || s[1] != s[2] {
            return Err(dim_err(format!(
                "heads expect a square {}-channel map, got {s:?}",
                self.channels
            )));
        }
        if !refined.all_finite() {
            return Err(Error::NonFinite("refined map"));
        }
        let mut g = Graph::inference(store);
        let x = g.input(refined.clone());
        let h = self.node(&mut g, x);
        Ok(HeadOutputs {
            cls1: g.value(h.cls1).clone(),
            cls2: g.value(h.cls2).clone(),
            loc: g.value(h.loc).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore, Heads) {
        let mut store = ParamStore::new();
        let h = Heads::init(&mut store, 6, &mut ChaCha8Rng::seed_from_u64(seed));
        (store, h)
    }

    #[test]
    fn output_shapes_follow_the_map() {
        let (store, h) = setup(1);
        let x = Tensor::randn(&[6, 21, 21], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let o = h.forward(&store, &x).unwrap();
        assert_eq!(o.cls1.shape(), &[2, 21, 21]);
        assert_eq!(o.cls2.shape(), &[1, 21, 21]);
        assert_eq!(o.loc.shape(), &[4, 21, 21]);
        let (store2, h2) = setup(1);
        assert_eq!(h2.forward(&store2, &x).unwrap(), o);
    }

    #[test]
    fn zero_input_gives_spatially_constant_outputs() {
        let (mut store, h) = setup(3);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let ids: Vec<_> = store
            .ids()
            .filter(|&id| store.name(id).ends_with("bias"))
            .collect();
        for id in ids {
            let n = store.get(id).len();
            *store.get_mut(id) = Tensor::randn(&[n], 1.0, &mut r);
        }
        let o = h.forward(&store, &Tensor::zeros(&[6, 5, 5])).unwrap();
        for t in [&o.cls1, &o.cls2, &o.loc] {
            for plane in t.data().chunks(25) {
                assert!(plane.iter().all(|&v| v == plane[0]));
            }
        }
    }

    #[test]
    fn rejects_wrong_channels() {
        let (store, h) = setup(5);
        assert!(h.forward(&store, &Tensor::zeros(&[5, 4, 4])).is_err());
    }

    #[test]
    fn search_geometry() {
        let g = MapGeometry::search();
        assert_eq!(g.n, 21);
        assert_eq!(g.cell_xy(0), (63.0, 63.0));
        assert_eq!(g.cell_xy(21 * 10 + 10), (143.0, 143.0));
        assert_eq!(g.cell_xy(1), (71.0, 63.0));
        let b = g.decode(0, [0.5, -1.0, 0.0, (2.0f64).ln()]);
        assert_eq!((b.cx, b.cy), (67.0, 55.0));
        assert!((b.w - 71.75).abs() < 1e-12 && (b.h - 143.5).abs() < 1e-12);
        assert_eq!(g.decode(0, [0.0, 0.0, -1e3, 0.0]).w, MIN_BOX_SIZE);
    }
}
