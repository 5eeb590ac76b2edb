//! One-pass evaluation metrics.
//!
//! * precision: fraction of frames with centre error `<= t` px, `t = 0..=50`;
//!   the headline value is read at 20 px.
//! * normalized precision: centre error divided by `sqrt(w * h)` of the
//!   ground-truth box, thresholds `0, 0.01, ..., 0.5`, read at 0.2.
//! * success: fraction of frames with IoU `>= t`, `t = 0, 0.05, ..., 1`;
//!   AUC is the mean of the curve.
//! * AO is the mean IoU; `SR_t` is the fraction of frames with IoU `> t`.

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};

pub const PRECISION_THRESHOLDS: usize = 51;
pub const NORM_PRECISION_STEPS: usize = 51;
pub const SUCCESS_STEPS: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Offline,
    Online,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub frames: usize,
    pub precision_20: f64,
    pub norm_precision: f64,
    pub success_auc: f64,
    pub ao: f64,
    pub sr_50: f64,
    pub sr_75: f64,
    pub mean_fps: f64,
    pub precision_curve: Vec<f64>,
    pub norm_precision_curve: Vec<f64>,
    pub success_curve: Vec<f64>,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
}

impl MetricsReport {
    /// Equality of every score field; `mode` and the timing-dependent
    /// `mean_fps` are ignored.
    pub fn same_scores(&self, o: &Self) -> bool {
        self.frames == o.frames
            && self.precision_20 == o.precision_20
            && self.norm_precision == o.norm_precision
            && self.success_auc == o.success_auc
            && self.ao == o.ao
            && self.sr_50 == o.sr_50
            && self.sr_75 == o.sr_75
            && self.precision_curve == o.precision_curve
            && self.norm_precision_curve == o.norm_precision_curve
            && self.success_curve == o.success_curve
            && self.ious == o.ious
            && self.center_errors == o.center_errors
    }
}

pub fn success_threshold(i: usize) -> f64 {
    i as f64 / (SUCCESS_STEPS - 1) as f64
}

pub fn norm_precision_threshold(i: usize) -> f64 {
    i as f64 / 100.0
}

fn rate(n: usize, hits: usize) -> f64 {
    hits as f64 / n as f64
}

pub fn compute_metrics(
    preds: &[BoundingBox],
    gts: &[BoundingBox],
    mode: EvalMode,
    mean_fps: f64,
) -> Result<MetricsReport> {
    if preds.is_empty() || gts.is_empty() {
        return Err(Error::Empty("prediction or ground-truth list"));
    }
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} ground-truth boxes",
            preds.len(),
            gts.len()
        )));
    }
    let n = preds.len();
    let ious: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| p.iou(g)).collect();
    let cle: Vec<f64> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| p.center_distance(g))
        .collect();
    let ncle: Vec<f64> = cle
        .iter()
        .zip(gts)
        .map(|(c, g)| c / g.area().sqrt())
        .collect();
    let precision_curve: Vec<f64> = (0..PRECISION_THRESHOLDS)
        .map(|t| rate(n, cle.iter().filter(|&&c| c <= t as f64).count()))
        .collect();
    let norm_precision_curve: Vec<f64> = (0..NORM_PRECISION_STEPS)
        .map(|i| {
            rate(
                n,
                ncle.iter()
                    .filter(|&&c| c <= norm_precision_threshold(i))
                    .count(),
            )
        })
        .collect();
    let success_curve: Vec<f64> = (0..SUCCESS_STEPS)
        .map(|i| {
            rate(
                n,
                ious.iter().filter(|&&v| v >= success_threshold(i)).count(),
            )
        })
        .collect();
    Ok(MetricsReport {
        mode,
        frames: n,
        precision_20: precision_curve[20],
        norm_precision: norm_precision_curve[20],
        success_auc: success_curve.iter().sum::<f64>() / SUCCESS_STEPS as f64,
        ao: ious.iter().sum::<f64>() / n as f64,
        sr_50: rate(n, ious.iter().filter(|&&v| v > 0.5).count()),
        sr_75: rate(n, ious.iter().filter(|&&v| v > 0.75).count()),
        mean_fps,
        precision_curve,
        norm_precision_curve,
        success_curve,
        ious,
        center_errors: cle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn perfect_tracking() {
        let g = vec![b(10.0, 10.0, 4.0, 6.0), b(30.0, 12.0, 8.0, 2.0)];
        let r = compute_metrics(&g, &g, EvalMode::Offline, 0.0).unwrap();
        assert!(r.precision_curve.iter().all(|&p| p == 1.0));
        assert_eq!(
            (r.success_auc, r.ao, r.sr_50, r.sr_75),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn ao_and_sr_arithmetic() {
        // Both predictions lie inside the target, so IoU is their area ratio.
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let p1 = b(0.0, 0.0, 10.0, 6.0);
        let p2 = b(0.0, 0.0, 10.0, 8.0);
        let r = compute_metrics(&[p1, p2], &[gt, gt], EvalMode::Offline, 0.0).unwrap();
        assert!((r.ious[0] - 0.6).abs() < 1e-15 && (r.ious[1] - 0.8).abs() < 1e-15);
        assert!((r.ao - 0.7).abs() < 1e-15);
        assert_eq!((r.sr_50, r.sr_75), (1.0, 0.5));
    }

    #[test]
    fn twenty_pixels_counts_as_precise() {
        let r = compute_metrics(
            &[b(20.0, 0.0, 4.0, 4.0)],
            &[b(0.0, 0.0, 4.0, 4.0)],
            EvalMode::Offline,
            0.0,
        )
        .unwrap();
        assert_eq!(r.precision_20, 1.0);
        assert_eq!(r.precision_curve[19], 0.0);
    }

    #[test]
    fn input_validation() {
        assert!(compute_metrics(&[], &[], EvalMode::Offline, 0.0).is_err());
        let x = b(0.0, 0.0, 1.0, 1.0);
        assert!(compute_metrics(&[x], &[x, x], EvalMode::Offline, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn curves_are_monotone_and_bounded(
            boxes in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0, 1.0f64..40.0, 1.0f64..40.0), 2..30),
        ) {
            let bs: Vec<_> = boxes.iter().map(|&(x, y, w, h)| b(x, y, w, h)).collect();
            let (p, g) = bs.split_at(bs.len() / 2);
            let g = &g[..p.len()];
            let r = compute_metrics(p, g, EvalMode::Online, 1.0).unwrap();
            prop_assert!(r.precision_curve.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.norm_precision_curve.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.success_curve.windows(2).all(|w| w[0] >= w[1]));
            for v in [r.precision_20, r.norm_precision, r.success_auc, r.ao, r.sr_50, r.sr_75] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
