//! Offline and online evaluation of one sequence, and the JSON report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, EvalMode, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::online::{evaluate_online, LatencyProfile, ProcessedFrame, Scheduling};
use crate::sequence::Sequence;
use crate::tracker::{track_offline, TrackerConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingEntry {
    /// 1-based ground-truth frame.
    pub gt_frame: usize,
    /// 1-based frame whose prediction is scored; `null` for the initial box.
    pub prediction_frame: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub model: ModelConfig,
    pub tracker: TrackerConfig,
    pub fps: f64,
    pub latency: Option<String>,
    pub scheduling: Option<Scheduling>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: EvalMode,
    pub sequence: String,
    pub metrics: MetricsReport,
    pub pairing: Vec<PairingEntry>,
    /// Online mode only: the simulated processing timeline.
    pub processed: Option<Vec<ProcessedFrame>>,
    pub config: ConfigSnapshot,
}

impl EvalReport {
    /// Same sequence, same pairing and identical scores.
    pub fn same_scores(&self, o: &Self) -> bool {
        self.sequence == o.sequence
            && self.pairing == o.pairing
            && self.metrics.same_scores(&o.metrics)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invariant(format!("report serialisation: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("report: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

fn snapshot(model: &Model, cfg: &TrackerConfig, seq: &Sequence) -> ConfigSnapshot {
    ConfigSnapshot {
        model: model.cfg,
        tracker: *cfg,
        fps: seq.fps,
        latency: None,
        scheduling: None,
    }
}

pub fn eval_offline(model: &Model, seq: &Sequence, cfg: &TrackerConfig) -> Result<EvalReport> {
    let out = track_offline(model, seq, cfg)?;
    let metrics = compute_metrics(&out.boxes, seq.gts(), EvalMode::Offline, out.mean_fps())?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: EvalMode::Offline,
        sequence: seq.name.clone(),
        metrics,
        pairing: (1..=seq.len())
            .map(|k| PairingEntry {
                gt_frame: k,
                prediction_frame: Some(k),
            })
            .collect(),
        processed: None,
        config: snapshot(model, cfg, seq),
    })
}

pub fn eval_online(
    model: &Model,
    seq: &Sequence,
    cfg: &TrackerConfig,
    profile: &LatencyProfile,
    policy: Scheduling,
) -> Result<EvalReport> {
    let run = evaluate_online(model, seq, cfg, profile, policy)?;
    let metrics = compute_metrics(&run.boxes, seq.gts(), EvalMode::Online, run.mean_fps())?;
    let mut config = snapshot(model, cfg, seq);
    config.latency = Some(profile.describe());
    config.scheduling = Some(policy);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: EvalMode::Online,
        sequence: seq.name.clone(),
        metrics,
        pairing: run
            .pairing
            .pairs
            .iter()
            .enumerate()
            .map(|(k, p)| PairingEntry {
                gt_frame: k + 1,
                prediction_frame: p.map(|j| j + 1),
            })
            .collect(),
        processed: Some(run.pairing.processed),
        config,
    })
}
