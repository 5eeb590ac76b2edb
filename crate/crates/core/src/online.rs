//! Latency-aware online evaluation by discrete-event simulation.
//!
//! Frame `k` (0-based) arrives at `k * P`, `P = 1000 / fps` ms. The tracker
//! handles one frame at a time. Whenever it is free it takes the newest
//! arrived, unprocessed frame and skips older ones; if none is waiting it
//! idles until the next arrival. Ground truth `k` is scored at `(k + 1) * P`
//! against the prediction of the latest processed frame `j <= k` that has
//! completed by then, or against the initial box if there is none.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sequence::Sequence;
use crate::tensor::FeatureMap;
use crate::tracker::{Tracker, TrackerConfig};

/// Slack for comparisons of simulated times in ms.
const TIME_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum LatencyProfile {
    Constant {
        ms: f64,
    },
    /// Per processed frame, wrapping around when exhausted.
    Trace(Vec<f64>),
    /// Wall-clock time of each processing call.
    Measured,
}

impl LatencyProfile {
    /// Parses `constant:<ms>`, `trace:<file>` or `measured`.
    pub fn parse(spec: &str) -> Result<Self> {
        let p = if spec == "measured" {
            Self::Measured
        } else if let Some(ms) = spec.strip_prefix("constant:") {
            let ms = ms
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Profile(format!("`{spec}`: {e}")))?;
            Self::Constant { ms }
        } else if let Some(path) = spec.strip_prefix("trace:") {
            Self::load_trace(Path::new(path))?
        } else {
            return Err(Error::Profile(format!(
                "`{spec}`: expected constant:<ms>, trace:<file> or measured"
            )));
        };
        p.validate()?;
        Ok(p)
    }

    /// One latency in ms per non-empty line.
    pub fn load_trace(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut v = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            v.push(line.parse::<f64>().map_err(|e| Error::GroundTruth {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("latency `{line}`: {e}"),
            })?);
        }
        let p = Self::Trace(v);
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match self {
            Self::Constant { ms } if !ok(*ms) => Err(Error::Profile(format!(
                "latency {ms} ms must be finite and >= 0"
            ))),
            Self::Trace(v) if v.is_empty() => Err(Error::Profile("empty latency trace".into())),
            Self::Trace(v) => match v.iter().find(|&&x| !ok(x)) {
                Some(x) => Err(Error::Profile(format!(
                    "trace latency {x} ms must be finite and >= 0"
                ))),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Latency of the `ordinal`-th processing call given its measured time.
    pub fn latency_ms(&self, ordinal: usize, measured_ms: f64) -> f64 {
        match self {
            Self::Constant { ms } => *ms,
            Self::Trace(v) => v[ordinal % v.len()],
            Self::Measured => measured_ms,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Constant { ms } => format!("constant:{ms}"),
            Self::Trace(v) => format!("trace({} entries)", v.len()),
            Self::Measured => "measured".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduling {
    /// Take the newest arrived frame, skipping stale ones.
    #[default]
    LatestWithSkip,
    /// Process every frame in arrival order.
    Fifo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessedFrame {
    /// 0-based frame index.
    pub frame: usize,
    pub start_ms: f64,
    pub done_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlinePairing {
    pub processed: Vec<ProcessedFrame>,
    /// For each ground-truth frame, the frame whose prediction is scored;
    /// `None` means the initial box.
    pub pairs: Vec<Option<usize>>,
}

/// Runs the scheduler over `n` frames. `process(frame, ordinal)` performs
/// the work and returns its latency in ms.
pub fn run_schedule(
    n: usize,
    fps: f64,
    policy: Scheduling,
    mut process: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<Vec<ProcessedFrame>> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    let period = 1000.0 / fps;
    let arrival = |k: usize| k as f64 * period;
    let mut out: Vec<ProcessedFrame> = Vec::new();
    let mut free = 0.0;
    loop {
        let next = match out.last() {
            None => 0,
            Some(p) => p.frame + 1,
        };
        if next >= n {
            break;
        }
        let frame = match policy {
            Scheduling::Fifo => next,
            Scheduling::LatestWithSkip => {
                let newest = (((free + TIME_EPS) / period).floor() as usize).min(n - 1);
                newest.max(next)
            }
        };
        let start = f64::max(free, arrival(frame));
        let latency = process(frame, out.len())?;
        if !(latency.is_finite() && latency >= 0.0) {
            return Err(Error::Profile(format!(
                "latency {latency} ms for frame {}",
                frame + 1
            )));
        }
        free = start + latency;
        out.push(ProcessedFrame {
            frame,
            start_ms: start,
            done_ms: free,
        });
    }
    Ok(out)
}

/// Pairs each ground-truth frame with the latest usable prediction.
pub fn pair(processed: &[ProcessedFrame], n: usize, fps: f64) -> Vec<Option<usize>> {
    let period = 1000.0 / fps;
    (0..n)
        .map(|k| {
            let t = (k + 1) as f64 * period + TIME_EPS;
            processed
                .iter()
                .filter(|p| p.frame <= k && p.done_ms <= t)
                .map(|p| p.frame)
                .max()
        })
        .collect()
}

/// Pairing from latencies alone; `measured_ms[k]` is used for frame `k`
/// in measured mode.
pub fn simulate_online(
    n: usize,
    fps: f64,
    profile: &LatencyProfile,
    measured_ms: &[f64],
    policy: Scheduling,
) -> Result<OnlinePairing> {
    profile.validate()?;
    if matches!(profile, LatencyProfile::Measured) && measured_ms.len() < n {
        return Err(Error::Profile(format!(
            "{} measured latencies for {n} frames",
            measured_ms.len()
        )));
    }
    let processed = run_schedule(n, fps, policy, |frame, ord| {
        Ok(profile.latency_ms(ord, measured_ms.get(frame).copied().unwrap_or(0.0)))
    })?;
    let pairs = pair(&processed, n, fps);
    Ok(OnlinePairing { processed, pairs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineRun {
    pub pairing: OnlinePairing,
    /// Scored box for each ground-truth frame.
    pub boxes: Vec<BoundingBox>,
    /// Wall-clock processing time of each processed frame.
    pub wall_ms: Vec<f64>,
}

impl OnlineRun {
    pub fn mean_fps(&self) -> f64 {
        let total: f64 = self.wall_ms.iter().sum();
        if total > 0.0 {
            1000.0 * self.wall_ms.len() as f64 / total
        } else {
            0.0
        }
    }
}

/// Runs the tracker only on the frames the scheduler picks; each search
/// crop is anchored on the latest available prediction.
pub fn evaluate_online(
    model: &Model,
    seq: &Sequence,
    cfg: &TrackerConfig,
    profile: &LatencyProfile,
    policy: Scheduling,
) -> Result<OnlineRun> {
    let mut tracker = Tracker::new(model, *cfg)?;
    let init = seq.gts()[0];
    evaluate_online_with(seq, profile, policy, |ord, _, image| {
        if ord == 0 {
            tracker.init(image, init)
        } else {
            tracker.update(image)
        }
    })
}

/// Online evaluation of any per-frame predictor. `predict(ordinal, frame,
/// image)` is called once per processed frame, in processing order.
pub fn evaluate_online_with<F>(
    seq: &Sequence,
    profile: &LatencyProfile,
    policy: Scheduling,
    mut predict: F,
) -> Result<OnlineRun>
where
    F: FnMut(usize, usize, &FeatureMap) -> Result<BoundingBox>,
{
    profile.validate()?;
    let init = seq.gts()[0];
    let mut predicted = vec![None; seq.len()];
    let mut wall_ms = Vec::new();
    let processed = run_schedule(seq.len(), seq.fps, policy, |frame, ord| {
        let image = seq.frame(frame)?;
        let t = Instant::now();
        let b = predict(ord, frame, &image)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        wall_ms.push(ms);
        predicted[frame] = Some(b);
        Ok(profile.latency_ms(ord, ms))
    })?;
    let pairs = pair(&processed, seq.len(), seq.fps);
    let boxes = pairs
        .iter()
        .map(|p| p.and_then(|j| predicted[j]).unwrap_or(init))
        .collect();
    Ok(OnlineRun {
        pairing: OnlinePairing { processed, pairs },
        boxes,
        wall_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(ms: f64) -> LatencyProfile {
        LatencyProfile::Constant { ms }
    }

    #[test]
    fn zero_latency_is_the_identity() {
        let p = simulate_online(8, 30.0, &constant(0.0), &[], Scheduling::LatestWithSkip).unwrap();
        assert_eq!(p.pairs, (0..8).map(Some).collect::<Vec<_>>());
        assert_eq!(p.processed.len(), 8);
    }

    #[test]
    fn two_period_latency_by_hand() {
        // Frames 1, 3, 5 (1-based) finish in time; frame 6 starts once frame 5
        // is done and lands after the sequence ends.
        let p = simulate_online(
            6,
            30.0,
            &constant(2000.0 / 30.0),
            &[],
            Scheduling::LatestWithSkip,
        )
        .unwrap();
        let frames: Vec<usize> = p.processed.iter().map(|f| f.frame).collect();
        assert_eq!(frames, vec![0, 2, 4, 5]);
        assert_eq!(
            p.pairs,
            vec![None, Some(0), Some(0), Some(2), Some(2), Some(4)]
        );
    }

    #[test]
    fn sub_period_latency_keeps_the_current_frame() {
        let p = simulate_online(5, 30.0, &constant(3.4), &[], Scheduling::LatestWithSkip).unwrap();
        assert_eq!(p.pairs, (0..5).map(Some).collect::<Vec<_>>());
    }

    #[test]
    fn fifo_processes_everything() {
        let p = simulate_online(6, 30.0, &constant(2000.0 / 30.0), &[], Scheduling::Fifo).unwrap();
        assert_eq!(p.processed.len(), 6);
        assert_eq!(
            p.pairs,
            vec![None, Some(0), Some(0), Some(1), Some(1), Some(2)]
        );
    }

    #[test]
    fn trace_wraps_and_measured_uses_frame_times() {
        let period = 1000.0 / 30.0;
        let trace = LatencyProfile::Trace(vec![0.0, 2.0 * period]);
        let p = simulate_online(6, 30.0, &trace, &[], Scheduling::LatestWithSkip).unwrap();
        let frames: Vec<usize> = p.processed.iter().map(|f| f.frame).collect();
        assert_eq!(frames, vec![0, 1, 3, 4, 5]);
        let m = simulate_online(
            3,
            30.0,
            &LatencyProfile::Measured,
            &[0.0, 0.0, 0.0],
            Scheduling::Fifo,
        )
        .unwrap();
        assert_eq!(m.pairs, vec![Some(0), Some(1), Some(2)]);
        assert!(
            simulate_online(3, 30.0, &LatencyProfile::Measured, &[0.0], Scheduling::Fifo).is_err()
        );
    }

    #[test]
    fn profile_parsing() {
        assert_eq!(
            LatencyProfile::parse("constant:3.4").unwrap(),
            constant(3.4)
        );
        assert_eq!(
            LatencyProfile::parse("measured").unwrap(),
            LatencyProfile::Measured
        );
        assert!(LatencyProfile::parse("constant:-1").is_err());
        assert!(LatencyProfile::parse("constant:x").is_err());
        assert!(LatencyProfile::parse("fast").is_err());
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("t.txt");
        std::fs::write(&f, "1.5\n\n2\n").unwrap();
        let spec = format!("trace:{}", f.display());
        assert_eq!(
            LatencyProfile::parse(&spec).unwrap(),
            LatencyProfile::Trace(vec![1.5, 2.0])
        );
        std::fs::write(&f, "1.5\n-2\n").unwrap();
        assert!(LatencyProfile::parse(&spec).is_err());
        std::fs::write(&f, "1.5\nabc\n").unwrap();
        assert!(matches!(
            LatencyProfile::parse(&spec),
            Err(Error::GroundTruth { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn pairing_invariants(
            lat in prop::collection::vec(0.0f64..200.0, 1..6),
            n in 2usize..40,
            fps in 5.0f64..60.0,
            fifo in any::<bool>(),
        ) {
            let policy = if fifo { Scheduling::Fifo } else { Scheduling::LatestWithSkip };
            let p = simulate_online(n, fps, &LatencyProfile::Trace(lat), &[], policy).unwrap();
            let period = 1000.0 / fps;
            let mut last = None;
            for (k, j) in p.pairs.iter().enumerate() {
                prop_assert!(*j >= last);
                last = *j;
                if let Some(j) = j {
                    prop_assert!(*j <= k);
                    let done = p.processed.iter().find(|f| f.frame == *j).unwrap().done_ms;
                    prop_assert!(done <= (k + 1) as f64 * period + 1e-6);
                }
            }
            prop_assert!(p.processed.windows(2).all(|w| w[0].frame < w[1].frame && w[0].done_ms <= w[1].start_ms + 1e-9));
            for f in &p.processed {
                prop_assert!(f.start_ms + 1e-9 >= f.frame as f64 * period);
            }
        }
    }
}
