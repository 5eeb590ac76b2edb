//! The full network: backbone, correlation, transformer and heads, wired for
//! sequential per-frame inference and for unrolled clip training.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::at_trans::{AtTrans, TemporalPrior, TransformerConfig};
use crate::backbone::{
    map_size, Backbone, BackboneConfig, BackboneState, BackboneStateNode, Correlation, SEARCH_SIZE,
    TEMPLATE_SIZE,
};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::heads::{HeadNodes, HeadOutputs, Heads, MapGeometry};
use crate::params::{ParamStore, TensorArchive};
use crate::tensor::FeatureMap;

/// Patches hold intensities in `[0, 1]`; the network sees them centred.
const PIXEL_MEAN: f64 = 0.45;
const PIXEL_STD: f64 = 0.25;

fn normalize(g: &mut Graph, x: NodeId) -> NodeId {
    let c = g.add_scalar(x, -PIXEL_MEAN);
    g.scale(c, 1.0 / PIXEL_STD)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub transformer: TransformerConfig,
}

impl ModelConfig {
    /// Narrow widths for desk-scale tests and training.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            transformer: TransformerConfig::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.transformer.validate()
    }
}

/// Graph handles carried from frame to frame of one sequence.
#[derive(Clone, Debug)]
pub struct SequenceNodes {
    pub template: NodeId,
    pub backbone: BackboneStateNode,
    pub prior: NodeId,
}

/// Per-sequence temporal state: template feature, backbone calibration
/// state and the transformer prior. Its size does not grow with the number
/// of frames processed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub template: FeatureMap,
    pub backbone: BackboneState,
    pub prior: TemporalPrior,
}

impl TrackState {
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = self.backbone.to_archive();
        a.push("template", self.template.clone());
        for (n, t) in self.prior.to_archive().entries() {
            a.push(format!("prior.{n}"), t.clone());
        }
        a
    }

    pub fn serialized_len(&self) -> usize {
        self.to_archive().to_bytes().len()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub params: ParamStore,
    pub backbone: Backbone,
    pub corr: Correlation,
    pub trans: AtTrans,
    pub heads: Heads,
    pub cfg: ModelConfig,
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::init(&mut params, &cfg.backbone, &mut rng)?;
        let c = backbone.out_channels();
        let corr = Correlation::init(&mut params, c, &mut rng);
        let trans = AtTrans::init(&mut params, c, &cfg.transformer, &mut rng)?;
        let heads = Heads::init(&mut params, cfg.transformer.channels, &mut rng);
        Ok(Self {
            params,
            backbone,
            corr,
            trans,
            heads,
            cfg: *cfg,
        })
    }

    pub fn geometry(&self) -> MapGeometry {
        MapGeometry::search()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.to_archive().save(path)
    }

    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        self.params.load_archive(&TensorArchive::load(path)?)
    }

    /// Frame 1: template feature, backbone state initialisation and the
    /// initial prior from the first raw correlation map.
    pub fn start_node(&self, g: &mut Graph, z: NodeId, x1: NodeId) -> SequenceNodes {
        let z = normalize(g, z);
        let x1 = normalize(g, x1);
        let template = self.backbone.blind_node(g, z);
        let (fx, state) = self.backbone.search_node(g, x1, None);
        let raw = g.depthwise_xcorr(template, fx);
        let prior = self.trans.init_prior_node(g, raw);
        SequenceNodes {
            template,
            backbone: state,
            prior,
        }
    }

    /// Frame `t >= 2`: advances `s` and returns the head outputs.
    pub fn frame_node(&self, g: &mut Graph, s: &mut SequenceNodes, x: NodeId) -> HeadNodes {
        let x = normalize(g, x);
        let state = std::mem::replace(&mut s.backbone, BackboneStateNode(Vec::new()));
        let (fx, state) = self.backbone.search_node(g, x, Some(state));
        s.backbone = state;
        let (_, adjusted) = self.corr.node(g, s.template, fx);
        let ft = self.trans.input_node(g, adjusted);
        let (prior, refined) = self.trans.step_node(g, s.prior, ft);
        s.prior = prior;
        let n = map_size();
        let map = g.map_from_tokens(refined, n, n);
        self.heads.node(g, map)
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

    pub fn start(&self, z: &FeatureMap, x1: &FeatureMap) -> Result<TrackState> {
        Self::check_patch(z, TEMPLATE_SIZE, "template patch")?;
        Self::check_patch(x1, SEARCH_SIZE, "search patch")?;
        let mut g = Graph::inference(&self.params);
        let (zn, xn) = (g.input(z.clone()), g.input(x1.clone()));
        let s = self.start_node(&mut g, zn, xn);
        let n = map_size();
        Ok(TrackState {
            template: g.value(s.template).clone(),
            backbone: s.backbone.extract(&g),
            prior: TemporalPrior::from_tokens(g.value(s.prior).clone(), n, n)?,
        })
    }

    pub fn step(&self, state: &mut TrackState, x: &FeatureMap) -> Result<HeadOutputs> {
        Self::check_patch(x, SEARCH_SIZE, "search patch")?;
        let mut g = Graph::inference(&self.params);
        let mut s = SequenceNodes {
            template: g.input(state.template.clone()),
            backbone: BackboneStateNode::bind(&mut g, &state.backbone)?,
            prior: g.input(state.prior.tokens().clone()),
        };
        let xn = g.input(x.clone());
        let h = self.frame_node(&mut g, &mut s, xn);
        let out = HeadOutputs {
            cls1: g.value(h.cls1).clone(),
            cls2: g.value(h.cls2).clone(),
            loc: g.value(h.loc).clone(),
        };
        if !(out.cls1.all_finite() && out.cls2.all_finite() && out.loc.all_finite()) {
            return Err(Error::NonFinite("head outputs"));
        }
        let n = map_size();
        *state = TrackState {
            template: state.template.clone(),
            backbone: s.backbone.extract(&g),
            prior: TemporalPrior::from_tokens(g.value(s.prior).clone(), n, n)?,
        };
        Ok(out)
    }
}
