//! The per-sequence tracking loop and test-time box selection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::crop::CropWindow;
use crate::error::{Error, Result};
use crate::heads::{HeadOutputs, MapGeometry};
use crate::model::{Model, TrackState};
use crate::sequence::Sequence;
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Weight of the cosine window in the selection score.
    pub window_influence: f64,
    /// Smallest box side kept after decoding, in image pixels.
    pub min_size: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            window_influence: 0.3,
            min_size: 2.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.window_influence) {
            return Err(Error::Config("window_influence must lie in [0, 1]".into()));
        }
        if !(self.min_size > 0.0) {
            return Err(Error::Config("min_size must be positive".into()));
        }
        Ok(())
    }
}

fn hanning(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Per-cell score `p_fg * sigmoid(q)` blended with a cosine window.
pub fn selection_scores(out: &HeadOutputs, window_influence: f64) -> Vec<f64> {
    let n = out.map_size();
    let nn = n * n;
    let (c1, c2) = (out.cls1.data(), out.cls2.data());
    let han = hanning(n);
    (0..nn)
        .map(|i| {
            let fg = 1.0 / (1.0 + (c1[i] - c1[nn + i]).exp());
            let q = 1.0 / (1.0 + (-c2[i]).exp());
            let win = han[i / n] * han[i % n];
            (1.0 - window_influence) * fg * q + window_influence * win
        })
        .collect()
}

/// Best cell and its decoded box in patch coordinates.
pub fn select_box(
    out: &HeadOutputs,
    geom: &MapGeometry,
    window_influence: f64,
) -> (usize, BoundingBox) {
    let scores = selection_scores(out, window_influence);
    let idx = scores
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &s)| {
            if s > best.1 {
                (i, s)
            } else {
                best
            }
        })
        .0;
    (idx, geom.decode(idx, out.loc_at(idx)))
}

/// Keeps a prediction usable as the next crop anchor.
fn sanitize(b: BoundingBox, width: f64, height: f64, min_size: f64) -> BoundingBox {
    BoundingBox {
        cx: b.cx.clamp(0.0, width),
        cy: b.cy.clamp(0.0, height),
        w: b.w.clamp(min_size, width.max(min_size)),
        h: b.h.clamp(min_size, height.max(min_size)),
    }
}

/// Sequential tracker over a sequence; frame indices are 0-based.
pub struct Tracker<'m> {
    model: &'m Model,
    cfg: TrackerConfig,
    state: Option<TrackState>,
    last: Option<BoundingBox>,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            state: None,
            last: None,
        })
    }

    /// Initialises on the first frame; the returned box is `init` itself.
    pub fn init(&mut self, frame: &FeatureMap, init: BoundingBox) -> Result<BoundingBox> {
        let z = CropWindow::template(&init).extract(frame)?;
        let x = CropWindow::search(&init).extract(frame)?;
        self.state = Some(self.model.start(&z, &x)?);
        self.last = Some(init);
        Ok(init)
    }

    /// Tracks in a new frame, anchored on the latest prediction.
    pub fn update(&mut self, frame: &FeatureMap) -> Result<BoundingBox> {
        let (Some(state), Some(prev)) = (self.state.as_mut(), self.last) else {
            return Err(Error::Uninitialized);
        };
        let win = CropWindow::search(&prev);
        let x = win.extract(frame)?;
        let out = self.model.step(state, &x)?;
        let (_, patch_box) = select_box(&out, &self.model.geometry(), self.cfg.window_influence);
        let s = frame.shape();
        let b = sanitize(
            win.to_image(&patch_box),
            s[2] as f64,
            s[1] as f64,
            self.cfg.min_size,
        );
        self.last = Some(b);
        Ok(b)
    }

    pub fn state(&self) -> Option<&TrackState> {
        self.state.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackOutput {
    pub boxes: Vec<BoundingBox>,
    /// Wall-clock processing time per frame in milliseconds.
    pub latencies_ms: Vec<f64>,
}

impl TrackOutput {
    /// Frames per second of wall-clock processing; 0 when nothing was timed.
    pub fn mean_fps(&self) -> f64 {
        let total: f64 = self.latencies_ms.iter().sum();
        if total > 0.0 {
            1000.0 * self.latencies_ms.len() as f64 / total
        } else {
            0.0
        }
    }
}

/// Runs the tracker over every frame in order.
pub fn track_offline(model: &Model, seq: &Sequence, cfg: &TrackerConfig) -> Result<TrackOutput> {
    let mut tracker = Tracker::new(model, *cfg)?;
    let mut boxes = Vec::with_capacity(seq.len());
    let mut latencies_ms = Vec::with_capacity(seq.len());
    for k in 0..seq.len() {
        let frame = seq.frame(k)?;
        let t = Instant::now();
        let b = if k == 0 {
            tracker.init(&frame, seq.gts()[0])?
        } else {
            tracker.update(&frame)?
        };
        latencies_ms.push(t.elapsed().as_secs_f64() * 1e3);
        boxes.push(b);
    }
    Ok(TrackOutput {
        boxes,
        latencies_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthetic::{moving_square, SquareConfig};
    use crate::tensor::Tensor;

    fn outputs(n: usize, peak: usize) -> HeadOutputs {
        let nn = n * n;
        let mut cls1 = Tensor::zeros(&[2, n, n]);
        cls1.data_mut()[nn + peak] = 5.0;
        HeadOutputs {
            cls1,
            cls2: Tensor::zeros(&[1, n, n]),
            loc: Tensor::zeros(&[4, n, n]),
        }
    }

    #[test]
    fn selection_follows_the_score_peak() {
        let g = MapGeometry {
            n: 5,
            stride: 8.0,
            offset: 4.0,
            base: 10.0,
        };
        let (idx, b) = select_box(&outputs(5, 3), &g, 0.0);
        assert_eq!(idx, 3);
        assert_eq!((b.cx, b.cy, b.w), (28.0, 4.0, 10.0));
        // A full-weight window picks the centre regardless of scores.
        assert_eq!(select_box(&outputs(5, 3), &g, 1.0).0, 12);
    }

    #[test]
    fn hanning_window_shape() {
        let h = hanning(5);
        assert_eq!(h[0], 0.0);
        assert!((h[2] - 1.0).abs() < 1e-15);
        assert!((h[1] - h[3]).abs() < 1e-15);
    }

    #[test]
    fn first_box_is_the_init_box_and_runs_repeat() {
        let sq = SquareConfig {
            frames: 3,
            ..Default::default()
        };
        let seq = moving_square(&sq, 2).unwrap();
        let m = Model::init(&ModelConfig::toy(), 1).unwrap();
        let a = track_offline(&m, &seq, &TrackerConfig::default()).unwrap();
        assert_eq!(a.boxes[0], seq.gts()[0]);
        assert_eq!(a.boxes.len(), 3);
        let b = track_offline(&m, &seq, &TrackerConfig::default()).unwrap();
        assert_eq!(a.boxes, b.boxes);
        assert!(a.latencies_ms.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn update_before_init_fails() {
        let m = Model::init(&ModelConfig::toy(), 1).unwrap();
        let mut t = Tracker::new(&m, TrackerConfig::default()).unwrap();
        assert!(matches!(
            t.update(&Tensor::zeros(&[3, 8, 8])),
            Err(Error::Uninitialized)
        ));
    }
}
