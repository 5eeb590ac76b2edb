//! Two-level temporal tracking: temporally calibrated convolution features,
//! transformer-based similarity refinement and a latency-aware evaluation
//! harness.

pub mod at_trans;
pub mod attention;
pub mod backbone;
pub mod bbox;
pub mod crop;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod online;
pub mod params;
pub mod report;
pub mod selftest;
pub mod sequence;
pub mod synthetic;
pub mod temporal_conv;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use at_trans::{AtTrans, GateMode, QueryRole, TemporalPrior, TransformerConfig};
pub use attention::{multi_head, scaled_dot_attention, AttentionParams, TokenSequence};
pub use backbone::{Backbone, BackboneConfig, BackboneState, SimilarityMap};
pub use bbox::BoundingBox;
pub use crop::CropWindow;
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use heads::{HeadOutputs, Heads, MapGeometry};
pub use losses::{GroundTruthTargets, LossParts};
pub use metrics::{compute_metrics, EvalMode, MetricsReport};
pub use model::{Model, ModelConfig, TrackState};
pub use online::{LatencyProfile, Scheduling};
pub use params::{ParamGroup, ParamId, ParamStore, TensorArchive};
pub use report::{eval_offline, eval_online, EvalReport};
pub use sequence::Sequence;
pub use temporal_conv::{CalibConfig, TemporalCalibState, TemporalMode};
pub use tensor::{FeatureMap, Tensor};
pub use tracker::{Tracker, TrackerConfig};
pub use training::{TrainConfig, Trainer};
