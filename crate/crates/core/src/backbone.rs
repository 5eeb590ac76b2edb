//! Stride-8 AlexNet-style feature extractor whose last two convolutions are
//! temporally calibrated, and depth-wise correlation between template and
//! search features.
//!
//! Layer stack (no padding anywhere):
//!
//! ```text
//! conv1 11x11/2 -> ReLU -> maxpool 3/2
//! conv2  5x5    -> ReLU -> maxpool 3/2
//! conv3  3x3    -> ReLU
//! conv4  3x3 (calibrated) -> ReLU
//! conv5  3x3 (calibrated)
//! ```
//!
//! A 127 px template gives a 6x6 feature, a 287 px search patch 26x26, and
//! their correlation is 21x21.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Conv, Init};
use crate::params::{ParamGroup, ParamStore, TensorArchive};
use crate::temporal_conv::{CalibConfig, LayerState, LayerStateNode, TadaConv, TemporalMode};
use crate::tensor::{conv_out_len, FeatureMap};

pub const TEMPLATE_SIZE: usize = 127;
pub const SEARCH_SIZE: usize = 287;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Window {
    kernel: usize,
    stride: usize,
}

const WINDOWS: [Window; 7] = [
    Window {
        kernel: 11,
        stride: 2,
    },
    Window {
        kernel: 3,
        stride: 2,
    },
    Window {
        kernel: 5,
        stride: 1,
    },
    Window {
        kernel: 3,
        stride: 2,
    },
    Window {
        kernel: 3,
        stride: 1,
    },
    Window {
        kernel: 3,
        stride: 1,
    },
    Window {
        kernel: 3,
        stride: 1,
    },
];

/// Spatial side of the backbone output for a square input of side `input`.
pub fn feature_size(input: usize) -> Option<usize> {
    WINDOWS
        .iter()
        .try_fold(input, |n, w| conv_out_len(n, w.kernel, w.stride, 0))
}

pub fn total_stride() -> usize {
    WINDOWS.iter().map(|w| w.stride).product()
}

/// Input-pixel coordinate of the receptive-field centre of (fractional)
/// output position `pos`.
pub fn feature_to_pixel(pos: f64) -> f64 {
    WINDOWS.iter().rev().fold(pos, |p, w| {
        p * w.stride as f64 + (w.kernel - 1) as f64 / 2.0
    })
}

/// Search-patch pixel coordinate of correlation cell `i` (same along both axes).
pub fn cell_center(i: usize) -> f64 {
    let tz = feature_size(TEMPLATE_SIZE).expect("template fits the backbone");
    feature_to_pixel(i as f64 + (tz - 1) as f64 / 2.0)
}

/// Side of the correlation map for the fixed patch sizes.
pub fn map_size() -> usize {
    feature_size(SEARCH_SIZE).unwrap() - feature_size(TEMPLATE_SIZE).unwrap() + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub widths: [usize; 5],
    pub calib: CalibConfig,
    pub temporal: TemporalMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [96, 256, 384, 384, 256],
            calib: CalibConfig::default(),
            temporal: TemporalMode::Attention,
        }
    }
}

impl BackboneConfig {
    /// Narrow widths with the default geometry, for tests and desk-scale training.
    pub fn toy() -> Self {
        Self {
            widths: [8, 16, 24, 24, 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.calib.pooled == 0 || self.calib.reduction == 0 || self.calib.head_reduction == 0 {
            return Err(Error::Config("calibration sizes must be positive".into()));
        }
        if let TemporalMode::Online { window: 0 } = self.temporal {
            return Err(Error::Config("online window must be at least 1".into()));
        }
        // conv5 sees the search patch at 28x28, the smallest calibrated input.
        let smallest = feature_size(SEARCH_SIZE).unwrap() + 2;
        if self.calib.pooled > smallest {
            return Err(Error::Config(format!(
                "pooled size {} exceeds the smallest calibrated input {smallest}",
                self.calib.pooled
            )));
        }
        Ok(())
    }
}

/// Temporal state of the calibrated layers for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum BackboneState {
    Uninitialized,
    Running(Vec<LayerState>),
}

impl BackboneState {
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        if let Self::Running(layers) = self {
            for (i, l) in layers.iter().enumerate() {
                for (n, t) in l.to_archive().entries() {
                    a.push(format!("conv{}.{n}", i + 4), t.clone());
                }
            }
        }
        a
    }

    pub fn serialized_len(&self) -> usize {
        self.to_archive().to_bytes().len()
    }
}

#[derive(Clone, Debug)]
pub struct BackboneStateNode(pub Vec<LayerStateNode>);

impl BackboneStateNode {
    pub fn bind(g: &mut Graph, s: &BackboneState) -> Result<Self> {
        match s {
            BackboneState::Uninitialized => Err(Error::Uninitialized),
            BackboneState::Running(l) => {
                Ok(Self(l.iter().map(|s| LayerStateNode::bind(g, s)).collect()))
            }
        }
    }

    pub fn extract(&self, g: &Graph) -> BackboneState {
        BackboneState::Running(self.0.iter().map(|n| n.extract(g)).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
    pub conv4: TadaConv,
    pub conv5: TadaConv,
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let [w1, w2, w3, w4, w5] = cfg.widths;
        let bb = ParamGroup::Backbone;
        Ok(Self {
            conv1: Conv::init(store, "backbone.conv1", bb, 3, w1, 11, 2, 0, Init::He, rng),
            conv2: Conv::init(store, "backbone.conv2", bb, w1, w2, 5, 1, 0, Init::He, rng),
            conv3: Conv::init(store, "backbone.conv3", bb, w2, w3, 3, 1, 0, Init::He, rng),
            conv4: TadaConv::init(
                store,
                "backbone.conv4",
                w3,
                w4,
                3,
                cfg.temporal,
                &cfg.calib,
                rng,
            ),
            conv5: TadaConv::init(
                store,
                "backbone.conv5",
                w4,
                w5,
                3,
                cfg.temporal,
                &cfg.calib,
                rng,
            ),
            cfg: *cfg,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.widths[4]
    }

    fn stem(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.conv1.forward(g, x);
        let h = g.relu(h);
        let h = g.max_pool(h, 3, 2);
        let h = self.conv2.forward(g, h);
        let h = g.relu(h);
        let h = g.max_pool(h, 3, 2);
        let h = self.conv3.forward(g, h);
        g.relu(h)
    }

    /// Temporally blind pass (all factors one). Used for the template and as
    /// the reference twin of the calibrated search pass.
    pub fn blind_node(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.stem(g, x);
        let h = self.conv4.forward_static(g, h);
        let h = g.relu(h);
        self.conv5.forward_static(g, h)
    }

    /// Calibrated search pass. `state == None` marks the first frame, which
    /// initialises and then updates the layer states.
    pub fn search_node(
        &self,
        g: &mut Graph,
        x: NodeId,
        state: Option<BackboneStateNode>,
    ) -> (NodeId, BackboneStateNode) {
        let (s4, s5) = match state {
            Some(BackboneStateNode(mut v)) => {
                assert_eq!(v.len(), 2, "backbone state holds two layers");
                let s5 = v.pop();
                (v.pop(), s5)
            }
            None => (None, None),
        };
        let h = self.stem(g, x);
        let (h, n4) = self.conv4.forward_step(g, h, s4);
        let h = g.relu(h);
        let (h, n5) = self.conv5.forward_step(g, h, s5);
        (h, BackboneStateNode(vec![n4, n5]))
    }

    fn check_patch(x: &FeatureMap, side: usize, what: &'static str) -> Result<()> {
        if x.shape() != [3, side, side] {
            return Err(dim_err(format!(
                "{what} must be 3x{side}x{side}, got {:?}",
                x.shape()
            )));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite(what));
        }
        Ok(())
    }

    pub fn extract_template(&self, store: &ParamStore, z: &FeatureMap) -> Result<FeatureMap> {
        Self::check_patch(z, TEMPLATE_SIZE, "template patch")?;
        let mut g = Graph::inference(store);
        let zn = g.input(z.clone());
        let out = self.blind_node(&mut g, zn);
        Ok(g.value(out).clone())
    }

    /// Blind pass on a search patch.
    pub fn extract_blind(&self, store: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        Self::check_patch(x, SEARCH_SIZE, "search patch")?;
        let mut g = Graph::inference(store);
        let xn = g.input(x.clone());
        let out = self.blind_node(&mut g, xn);
        Ok(g.value(out).clone())
    }

    /// First search frame: initialises the temporal state.
    pub fn init_search(
        &self,
        store: &ParamStore,
        x1: &FeatureMap,
    ) -> Result<(FeatureMap, BackboneState)> {
        Self::check_patch(x1, SEARCH_SIZE, "search patch")?;
        let mut g = Graph::inference(store);
        let xn = g.input(x1.clone());
        let (out, s) = self.search_node(&mut g, xn, None);
        Ok((g.value(out).clone(), s.extract(&g)))
    }

    pub fn extract_search(
        &self,
        store: &ParamStore,
        x: &FeatureMap,
        state: &BackboneState,
    ) -> Result<(FeatureMap, BackboneState)> {
        Self::check_patch(x, SEARCH_SIZE, "search patch")?;
        let mut g = Graph::inference(store);
        let s = BackboneStateNode::bind(&mut g, state)?;
        let xn = g.input(x.clone());
        let (out, s) = self.search_node(&mut g, xn, Some(s));
        Ok((g.value(out).clone(), s.extract(&g)))
    }
}

/// Raw correlation map `R_t` and its adjusted form `F_t = F(R_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub raw: FeatureMap,
    pub adjusted: FeatureMap,
}

/// Per-channel valid cross-correlation of the search feature with the
/// template feature.
pub fn depthwise_correlation(f_z: &FeatureMap, f_x: &FeatureMap) -> Result<FeatureMap> {
    let (sz, sx) = (f_z.shape(), f_x.shape());
    if sz.len() != 3 || sx.len() != 3 || sz[0] != sx[0] {
        return Err(dim_err(format!("correlation operands {sz:?} and {sx:?}")));
    }
    if sz[1] > sx[1] || sz[2] > sx[2] {
        return Err(dim_err(format!(
            "template feature {sz:?} larger than search feature {sx:?}"
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let (z, x) = (g.input(f_z.clone()), g.input(f_x.clone()));
    let r = g.depthwise_xcorr(z, x);
    Ok(g.value(r).clone())
}

/// The channel-preserving 1x1 adjust layer applied after correlation.
#[derive(Clone, Copy, Debug)]
pub struct Correlation {
    pub adjust: Conv,
}

impl Correlation {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Self {
        Self {
            adjust: Conv::pointwise(
                store,
                "corr.adjust",
                ParamGroup::Head,
                channels,
                channels,
                rng,
            ),
        }
    }

    /// Returns `(R_t, F_t)` nodes.
    pub fn node(&self, g: &mut Graph, f_z: NodeId, f_x: NodeId) -> (NodeId, NodeId) {
        let r = g.depthwise_xcorr(f_z, f_x);
        (r, self.adjust.forward(g, r))
    }

    pub fn correlate(
        &self,
        store: &ParamStore,
        f_z: &FeatureMap,
        f_x: &FeatureMap,
    ) -> Result<SimilarityMap> {
        let raw = depthwise_correlation(f_z, f_x)?;
        if raw.shape()[0] != self.adjust.c_in {
            return Err(dim_err(format!(
                "correlation has {} channels, adjust expects {}",
                raw.shape()[0],
                self.adjust.c_in
            )));
        }
        let mut g = Graph::inference(store);
        let r = g.input(raw.clone());
        let f = self.adjust.forward(&mut g, r);
        Ok(SimilarityMap {
            adjusted: g.value(f).clone(),
            raw,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, weighted_sum, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy(seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let b = Backbone::init(&mut store, &BackboneConfig::toy(), &mut rng(seed)).unwrap();
        (store, b)
    }

    #[test]
    fn layer_arithmetic() {
        assert_eq!(feature_size(127), Some(6));
        assert_eq!(feature_size(287), Some(26));
        assert_eq!(map_size(), 21);
        assert_eq!(total_stride(), 8);
        for i in 0..21 {
            assert_eq!(cell_center(i), 8.0 * i as f64 + 63.0);
        }
        // The middle cell sits on the patch centre.
        assert_eq!(cell_center(10), (SEARCH_SIZE - 1) as f64 / 2.0);
    }

    #[test]
    fn template_is_deterministic_and_pure() {
        let (store, b) = toy(1);
        let (store2, b2) = toy(1);
        let z = Tensor::zeros(&[3, 127, 127]);
        let f1 = b.extract_template(&store, &z).unwrap();
        let f2 = b2.extract_template(&store2, &z).unwrap();
        assert_eq!(f1.shape(), &[16, 6, 6]);
        assert_eq!(f1, f2);
        let zr = Tensor::uniform(&[3, 127, 127], 0.0, 1.0, &mut rng(2));
        assert_eq!(
            b.extract_template(&store, &zr).unwrap(),
            b.extract_template(&store, &zr).unwrap()
        );
    }

    #[test]
    fn default_widths_give_default_shapes() {
        let mut store = ParamStore::new();
        let b = Backbone::init(&mut store, &BackboneConfig::default(), &mut rng(3)).unwrap();
        let z = Tensor::uniform(&[3, 127, 127], 0.0, 1.0, &mut rng(4));
        assert_eq!(
            b.extract_template(&store, &z).unwrap().shape(),
            &[256, 6, 6]
        );
    }

    #[test]
    fn wrong_patch_sizes_are_rejected() {
        let (store, b) = toy(5);
        assert!(matches!(
            b.extract_template(&store, &Tensor::zeros(&[3, 128, 127])),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            b.extract_search(
                &store,
                &Tensor::zeros(&[3, 287, 287]),
                &BackboneState::Uninitialized
            ),
            Err(Error::Uninitialized)
        ));
    }

    #[test]
    fn fresh_search_pass_matches_blind_twin() {
        let (store, b) = toy(6);
        let mut r = rng(7);
        let x1 = Tensor::uniform(&[3, 287, 287], 0.0, 1.0, &mut r);
        let (f1, mut s) = b.init_search(&store, &x1).unwrap();
        assert_eq!(f1.shape(), &[16, 26, 26]);
        assert!(f1.max_abs_diff(&b.extract_blind(&store, &x1).unwrap()) < 1e-6);
        for _ in 0..3 {
            let x = Tensor::uniform(&[3, 287, 287], 0.0, 1.0, &mut r);
            let (f, next) = b.extract_search(&store, &x, &s).unwrap();
            assert_eq!(f.shape(), &[16, 26, 26]);
            assert!(f.max_abs_diff(&b.extract_blind(&store, &x).unwrap()) < 1e-6);
            s = next;
        }
    }

    #[test]
    fn search_matches_layer_by_layer_composition() {
        let (mut store, b) = toy(8);
        // Perturb the factor heads so calibration is active.
        let mut r = rng(9);
        let ids: Vec<_> = store
            .ids()
            .filter(|&id| store.group(id) == ParamGroup::Calibration)
            .collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.3, &mut r);
        }
        let frames: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(&[3, 287, 287], 0.0, 1.0, &mut r))
            .collect();
        let (_, mut s) = b.init_search(&store, &frames[0]).unwrap();
        let mut outs = Vec::new();
        for f in &frames[1..] {
            let (o, n) = b.extract_search(&store, f, &s).unwrap();
            outs.push(o);
            s = n;
        }

        // Oracle: drive the calibration networks one value-level op at a time.
        use crate::temporal_conv::{att_tada_forward, Calibration};
        let (Calibration::Attention(c4), Calibration::Attention(c5)) =
            (b.conv4.calib, b.conv5.calib)
        else {
            unreachable!()
        };
        let stem = |x: &Tensor| {
            let mut g = Graph::inference(&store);
            let xn = g.input(x.clone());
            let h = b.stem(&mut g, xn);
            g.value(h).clone()
        };
        let h0 = stem(&frames[0]);
        let mut st4 = c4.init_state(&store, &h0).unwrap();
        st4 = c4.update_state(&store, &st4, &h0).unwrap();
        let f4 = c4.calibration_factors(&store, &st4).unwrap();
        let m0 = att_tada_forward(&store, &h0, &b.conv4.base, &f4)
            .unwrap()
            .map(|v| v.max(0.0));
        let mut st5 = c5.init_state(&store, &m0).unwrap();
        st5 = c5.update_state(&store, &st5, &m0).unwrap();
        for (f, got) in frames[1..].iter().zip(&outs) {
            let h = stem(f);
            st4 = c4.update_state(&store, &st4, &h).unwrap();
            let f4 = c4.calibration_factors(&store, &st4).unwrap();
            let m = att_tada_forward(&store, &h, &b.conv4.base, &f4)
                .unwrap()
                .map(|v| v.max(0.0));
            st5 = c5.update_state(&store, &st5, &m).unwrap();
            let f5 = c5.calibration_factors(&store, &st5).unwrap();
            let want = att_tada_forward(&store, &m, &b.conv5.base, &f5).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-10);
            assert!(got.max_abs_diff(&b.extract_blind(&store, f).unwrap()) > 1e-6);
        }
    }

    #[test]
    fn state_size_is_constant() {
        let (store, b) = toy(10);
        let mut r = rng(11);
        let (_, mut s) = b
            .init_search(&store, &Tensor::uniform(&[3, 287, 287], 0.0, 1.0, &mut r))
            .unwrap();
        let n = s.serialized_len();
        for _ in 0..5 {
            let (_, next) = b
                .extract_search(
                    &store,
                    &Tensor::uniform(&[3, 287, 287], 0.0, 1.0, &mut r),
                    &s,
                )
                .unwrap();
            s = next;
            assert_eq!(s.serialized_len(), n);
        }
    }

    fn oracle_xcorr(z: &Tensor, x: &Tensor) -> Tensor {
        let (c, hz, wz) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let (hx, wx) = (x.shape()[1], x.shape()[2]);
        let mut out = Tensor::zeros(&[c, hx - hz + 1, wx - wz + 1]);
        for ch in 0..c {
            for i in 0..=hx - hz {
                for j in 0..=wx - wz {
                    let mut acc = 0.0;
                    for a in 0..hz {
                        for bb in 0..wz {
                            acc += z.get(&[ch, a, bb]) * x.get(&[ch, i + a, j + bb]);
                        }
                    }
                    out.set(&[ch, i, j], acc);
                }
            }
        }
        out
    }

    #[test]
    fn correlation_examples() {
        let mut r = rng(12);
        let x = Tensor::randn(&[4, 7, 7], 1.0, &mut r);
        let zero = depthwise_correlation(&Tensor::zeros(&[4, 3, 3]), &x).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let mut delta = Tensor::zeros(&[4, 1, 1]);
        delta.set(&[2, 0, 0], 1.0);
        let d = depthwise_correlation(&delta, &x).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(d.get(&[2, i, j]), x.get(&[2, i, j]));
            }
        }

        let z = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
        let got = depthwise_correlation(&z, &x).unwrap();
        assert_eq!(got.shape(), &[4, 5, 5]);
        assert!(got.max_abs_diff(&oracle_xcorr(&z, &x)) < 1e-12);

        assert!(matches!(
            depthwise_correlation(&x, &z),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn adjusted_map_keeps_channels() {
        let mut store = ParamStore::new();
        let c = Correlation::init(&mut store, 4, &mut rng(13));
        let mut r = rng(14);
        let s = c
            .correlate(
                &store,
                &Tensor::randn(&[4, 3, 3], 1.0, &mut r),
                &Tensor::randn(&[4, 7, 7], 1.0, &mut r),
            )
            .unwrap();
        assert_eq!(s.raw.shape(), &[4, 5, 5]);
        assert_eq!(s.adjusted.shape(), &[4, 5, 5]);
    }

    #[test]
    fn correlation_gradients() {
        let mut r = rng(15);
        let inputs = [
            Tensor::randn(&[3, 2, 2], 1.0, &mut r),
            Tensor::randn(&[3, 4, 5], 1.0, &mut r),
        ];
        let store = ParamStore::new();
        let res = check_inputs("xcorr", &store, &inputs, DEFAULT_STEP, |g, ids| {
            let o = g.depthwise_xcorr(ids[0], ids[1]);
            weighted_sum(g, o, 4)
        });
        assert!(res.passed(DEFAULT_TOLERANCE), "{res:?}");
    }

    proptest! {
        #[test]
        fn correlation_is_bilinear(
            seed in 0u64..10_000,
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let mut r = rng(seed);
            let z1 = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
            let z2 = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
            let x1 = Tensor::randn(&[2, 5, 6], 1.0, &mut r);
            let x2 = Tensor::randn(&[2, 5, 6], 1.0, &mut r);
            let comb = |p: &Tensor, q: &Tensor| Tensor::new(p.shape().to_vec(),
                p.data().iter().zip(q.data()).map(|(u, v)| a * u + b * v).collect()).unwrap();
            let lhs = depthwise_correlation(&comb(&z1, &z2), &x1).unwrap();
            let rhs = comb(&depthwise_correlation(&z1, &x1).unwrap(), &depthwise_correlation(&z2, &x1).unwrap());
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
            let lhs = depthwise_correlation(&z1, &comb(&x1, &x2)).unwrap();
            let rhs = comb(&depthwise_correlation(&z1, &x1).unwrap(), &depthwise_correlation(&z1, &x2).unwrap());
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
        }
    }
}
