//! Clip-unrolled training with a video-length curriculum, log-space learning
//! rate decay, momentum SGD and an initial backbone freeze.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::crop::CropWindow;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{loss_nodes, GroundTruthTargets, LossParts};
use crate::model::Model;
use crate::params::ParamGroup;
use crate::sequence::Sequence;
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub enabled: bool,
    /// Last epoch of each stage but the final one.
    pub boundaries: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Clip length when the curriculum is disabled.
    pub fixed_length: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            enabled: true,
            boundaries: vec![33, 50],
            lengths: vec![2, 3, 4],
            fixed_length: 4,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("curriculum: {m}")));
        if self.lengths.len() != self.boundaries.len() + 1 {
            return bad(format!(
                "{} lengths need {} boundaries, got {}",
                self.lengths.len(),
                self.lengths.len().saturating_sub(1),
                self.boundaries.len()
            ));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) || self.boundaries.first() == Some(&0) {
            return bad("boundaries must be positive and strictly increasing".into());
        }
        if self.lengths.windows(2).any(|w| w[0] > w[1]) {
            return bad("lengths must be non-decreasing".into());
        }
        if self
            .lengths
            .iter()
            .chain([&self.fixed_length])
            .any(|&l| l < 2)
        {
            return bad("clips need at least 2 frames".into());
        }
        Ok(())
    }
}

/// Clip length at a 1-based epoch. A stage boundary `b` is the last epoch
/// of its stage.
pub fn video_length(epoch: usize, sched: &CurriculumSchedule) -> Result<usize> {
    if epoch == 0 {
        return Err(Error::Config("epochs are 1-based".into()));
    }
    sched.validate()?;
    if !sched.enabled {
        return Ok(sched.fixed_length);
    }
    let stage = sched.boundaries.iter().take_while(|&&b| epoch > b).count();
    Ok(sched.lengths[stage])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub start: f64,
    pub end: f64,
    pub momentum: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            start: 0.005,
            end: 0.0005,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
}

/// `start * (end / start)^((e - 1) / (E - 1))`.
pub fn learning_rate(epoch: usize, s: &LrSchedule) -> f64 {
    if s.epochs <= 1 {
        return s.start;
    }
    let frac = (epoch.max(1) - 1) as f64 / (s.epochs - 1) as f64;
    s.start * (s.end / s.start).powf(frac)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// The backbone group is frozen while `epoch <= freeze_epochs`.
    pub freeze_epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Uniform search-centre jitter as a fraction of the previous box size.
    pub jitter: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub curriculum: CurriculumSchedule,
    pub lr: LrConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            freeze_epochs: 10,
            batch_size: 124,
            steps_per_epoch: 1,
            seed: 0,
            jitter: 0.1,
            clip_norm: 0.0,
            curriculum: CurriculumSchedule::default(),
            lr: LrConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.curriculum.validate()?;
        let lr = &self.lr;
        if !(lr.start > 0.0 && lr.end > 0.0 && lr.start.is_finite() && lr.end.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&lr.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "epochs, batch_size and steps_per_epoch must be positive".into(),
            ));
        }
        if self.jitter < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config(
                "jitter and clip_norm must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            start: self.lr.start,
            end: self.lr.end,
            epochs: self.epochs,
        }
    }
}

/// Network inputs and labels for one clip.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub template: FeatureMap,
    pub searches: Vec<FeatureMap>,
    /// Labels for `searches[1..]`.
    pub targets: Vec<GroundTruthTargets>,
}

/// Crops a clip: the template and first search patch centre on the first
/// box; later search patches centre on the previous box plus jitter.
pub fn prepare_clip(
    model: &Model,
    clip: &Sequence,
    jitter: f64,
    rng: &mut impl Rng,
) -> Result<PreparedClip> {
    if clip.len() < 2 {
        return Err(Error::Config(
            "training clips need at least 2 frames".into(),
        ));
    }
    let gts = clip.gts();
    let first = clip.frame(0)?;
    let template = CropWindow::template(&gts[0]).extract(&first)?;
    let mut searches = vec![CropWindow::search(&gts[0]).extract(&first)?];
    let mut targets = Vec::with_capacity(clip.len() - 1);
    for t in 1..clip.len() {
        let prev = gts[t - 1];
        let mut shift = |s: f64| {
            if jitter > 0.0 {
                rng.random_range(-jitter..=jitter) * s
            } else {
                0.0
            }
        };
        let centre = BoundingBox {
            cx: prev.cx + shift(prev.w),
            cy: prev.cy + shift(prev.h),
            ..prev
        };
        let win = CropWindow {
            cx: centre.cx,
            cy: centre.cy,
            ..CropWindow::search(&prev)
        };
        searches.push(win.extract(&clip.frame(t)?)?);
        targets.push(GroundTruthTargets::from_box(
            win.to_patch(&gts[t]),
            model.geometry(),
        )?);
    }
    Ok(PreparedClip {
        template,
        searches,
        targets,
    })
}

/// Builds the unrolled clip loss (mean over supervised frames) into `g`.
pub fn clip_loss_node(model: &Model, g: &mut Graph, clip: &PreparedClip) -> (NodeId, LossParts) {
    let z = g.input(clip.template.clone());
    let x1 = g.input(clip.searches[0].clone());
    let mut s = model.start_node(g, z, x1);
    let mut totals = Vec::new();
    let mut parts = LossParts::default();
    let n = clip.targets.len() as f64;
    for (x, t) in clip.searches[1..].iter().zip(&clip.targets) {
        let xn = g.input(x.clone());
        let h = model.frame_node(g, &mut s, xn);
        let l = loss_nodes(g, &h, t);
        let p = l.parts(g);
        parts.cls1 += p.cls1 / n;
        parts.cls2 += p.cls2 / n;
        parts.loc1 += p.loc1 / n;
        parts.loc2 += p.loc2 / n;
        totals.push(l.total);
    }
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = g.add(acc, t);
    }
    (g.scale(acc, 1.0 / n), parts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub epoch: usize,
    pub loss: f64,
    pub parts: LossParts,
    pub lr: f64,
    pub video_length: usize,
    pub grad_norm: f64,
    /// Largest graph footprint in bytes over the clips of the step.
    pub peak_bytes: usize,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    velocity: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = model
            .params
            .ids()
            .map(|id| Tensor::zeros(model.params.get(id).shape()))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            cfg,
            velocity,
            rng,
        })
    }

    pub fn backbone_frozen(&self, epoch: usize) -> bool {
        epoch <= self.cfg.freeze_epochs
    }

    /// One momentum-SGD step on the mean loss of `clips`.
    pub fn train_step(&mut self, clips: &[Sequence], epoch: usize) -> Result<StepReport> {
        if clips.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let frozen = self.backbone_frozen(epoch);
        let trainable = |g: ParamGroup| !(frozen && g == ParamGroup::Backbone);
        let ids: Vec<_> = self.model.params.ids().collect();
        let mut grads: Vec<Tensor> = ids
            .iter()
            .map(|&id| Tensor::zeros(self.model.params.get(id).shape()))
            .collect();
        let (mut loss, mut parts, mut peak, mut length) = (0.0, LossParts::default(), 0, 0);
        let w = 1.0 / clips.len() as f64;
        for clip in clips {
            length = length.max(clip.len());
            let prepared = prepare_clip(&self.model, clip, self.cfg.jitter, &mut self.rng)?;
            let mut g = Graph::with_trainable(&self.model.params, trainable);
            let (total, p) = clip_loss_node(&self.model, &mut g, &prepared);
            let value = g.value(total).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            peak = peak.max(g.bytes());
            let gr = g.backward(total);
            for (acc, &id) in grads.iter_mut().zip(&ids) {
                if let Some(d) = gr.param(id) {
                    acc.data_mut()
                        .iter_mut()
                        .zip(d.data())
                        .for_each(|(a, b)| *a += w * b);
                }
            }
            loss += w * value;
            parts.cls1 += w * p.cls1;
            parts.cls2 += w * p.cls2;
            parts.loc1 += w * p.loc1;
            parts.loc2 += w * p.loc2;
        }
        let norm = grads
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradients"));
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = learning_rate(epoch, &self.cfg.lr_schedule());
        let mu = self.cfg.lr.momentum;
        for ((&id, gr), v) in ids.iter().zip(&grads).zip(&mut self.velocity) {
            if !trainable(self.model.params.group(id)) {
                continue;
            }
            v.data_mut()
                .iter_mut()
                .zip(gr.data())
                .for_each(|(v, g)| *v = mu * *v + clip * g);
            let p = self.model.params.get_mut(id);
            p.data_mut()
                .iter_mut()
                .zip(v.data())
                .for_each(|(p, v)| *p -= lr * v);
        }
        Ok(StepReport {
            epoch,
            loss,
            parts,
            lr,
            video_length: length,
            grad_norm: norm,
            peak_bytes: peak,
        })
    }

    /// Samples clips of the curriculum length from `data` and runs the
    /// configured number of steps.
    pub fn train_epoch(&mut self, data: &[Sequence], epoch: usize) -> Result<Vec<StepReport>> {
        let len = video_length(epoch, &self.cfg.curriculum)?;
        let usable: Vec<&Sequence> = data.iter().filter(|s| s.len() >= len).collect();
        if usable.is_empty() {
            return Err(Error::Empty(
                "sequences long enough for the current clip length",
            ));
        }
        let mut reports = Vec::with_capacity(self.cfg.steps_per_epoch);
        for _ in 0..self.cfg.steps_per_epoch {
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            for _ in 0..self.cfg.batch_size {
                let s = usable[self.rng.random_range(0..usable.len())];
                let start = self.rng.random_range(0..=s.len() - len);
                batch.push(s.slice(start, start + len)?);
            }
            reports.push(self.train_step(&batch, epoch)?);
        }
        Ok(reports)
    }
}

/// Mean loss over clips without jitter or parameter updates.
pub fn evaluate_loss(model: &Model, clips: &[Sequence]) -> Result<(f64, LossParts)> {
    if clips.is_empty() {
        return Err(Error::Empty("evaluation clips"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = 1.0 / clips.len() as f64;
    let (mut loss, mut parts) = (0.0, LossParts::default());
    for clip in clips {
        let prepared = prepare_clip(model, clip, 0.0, &mut rng)?;
        let mut g = Graph::inference(&model.params);
        let (total, p) = clip_loss_node(model, &mut g, &prepared);
        loss += w * g.value(total).data()[0];
        parts.cls1 += w * p.cls1;
        parts.cls2 += w * p.cls2;
        parts.loc1 += w * p.loc1;
        parts.loc2 += w * p.loc2;
    }
    Ok((loss, parts))
}
