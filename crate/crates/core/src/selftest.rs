//! Quick oracle fixtures behind the `selftest` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, SEARCH_SIZE, TEMPLATE_SIZE};
use crate::bbox::BoundingBox;
use crate::error::Result;
use crate::gradcheck::{standard_suite, DEFAULT_TOLERANCE};
use crate::metrics::{compute_metrics, EvalMode};
use crate::model::{Model, ModelConfig};
use crate::online::{simulate_online, LatencyProfile, Scheduling};
use crate::params::ParamStore;
use crate::report::{eval_offline, eval_online};
use crate::synthetic::{moving_square, SquareConfig};
use crate::tensor::Tensor;
use crate::tracker::TrackerConfig;
use crate::training::{learning_rate, video_length, CurriculumSchedule, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SelfTestRow {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn row(name: &'static str, r: Result<(bool, String)>) -> SelfTestRow {
    match r {
        Ok((passed, detail)) => SelfTestRow {
            name,
            passed,
            detail,
        },
        Err(e) => SelfTestRow {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn gradients() -> Result<(bool, String)> {
    let all = standard_suite();
    let worst = all.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let bad: Vec<&str> = all
        .iter()
        .filter(|c| !c.passed(DEFAULT_TOLERANCE))
        .map(|c| c.name.as_str())
        .collect();
    Ok((
        bad.is_empty(),
        format!(
            "{} suites, worst rel err {worst:.1e}, failing {bad:?}",
            all.len()
        ),
    ))
}

fn blind_twin(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = Backbone::init(&mut store, &BackboneConfig::toy(), &mut rng)?;
    let x1 = Tensor::uniform(&[3, SEARCH_SIZE, SEARCH_SIZE], 0.0, 1.0, &mut rng);
    let (f, mut s) = b.init_search(&store, &x1)?;
    let mut worst = f.max_abs_diff(&b.extract_blind(&store, &x1)?);
    for _ in 0..2 {
        let x = Tensor::uniform(&[3, SEARCH_SIZE, SEARCH_SIZE], 0.0, 1.0, &mut rng);
        let (f, next) = b.extract_search(&store, &x, &s)?;
        worst = worst.max(f.max_abs_diff(&b.extract_blind(&store, &x)?));
        s = next;
    }
    Ok((worst < 1e-6, format!("max diff {worst:.1e}")))
}

fn state_size(seed: u64) -> Result<(bool, String)> {
    let m = Model::init(&ModelConfig::toy(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::uniform(&[3, TEMPLATE_SIZE, TEMPLATE_SIZE], 0.0, 1.0, &mut rng);
    let mut s = m.start(
        &z,
        &Tensor::uniform(&[3, SEARCH_SIZE, SEARCH_SIZE], 0.0, 1.0, &mut rng),
    )?;
    let first = s.serialized_len();
    let mut same = true;
    for _ in 0..4 {
        m.step(
            &mut s,
            &Tensor::uniform(&[3, SEARCH_SIZE, SEARCH_SIZE], 0.0, 1.0, &mut rng),
        )?;
        same &= s.serialized_len() == first;
    }
    Ok((same, format!("{first} bytes after 1 and 5 frames")))
}

fn hand_pairing() -> Result<(bool, String)> {
    let p = simulate_online(
        6,
        30.0,
        &LatencyProfile::Constant { ms: 2000.0 / 30.0 },
        &[],
        Scheduling::LatestWithSkip,
    )?;
    let got: Vec<Option<usize>> = p.pairs.iter().map(|x| x.map(|j| j + 1)).collect();
    let want = [None, Some(1), Some(1), Some(3), Some(3), Some(5)];
    Ok((got == want, format!("{got:?}")))
}

fn zero_latency(seed: u64) -> Result<(bool, String)> {
    let seq = moving_square(
        &SquareConfig {
            frames: 4,
            ..Default::default()
        },
        seed,
    )?;
    let m = Model::init(&ModelConfig::toy(), seed)?;
    let cfg = TrackerConfig::default();
    let off = eval_offline(&m, &seq, &cfg)?;
    let on = eval_online(
        &m,
        &seq,
        &cfg,
        &LatencyProfile::Constant { ms: 0.0 },
        Scheduling::LatestWithSkip,
    )?;
    Ok((
        on.same_scores(&off),
        format!("AUC {:.4} both ways", off.metrics.success_auc),
    ))
}

fn ao_arithmetic() -> Result<(bool, String)> {
    let gt = BoundingBox::from_top_left(0.0, 0.0, 10.0, 10.0)?;
    let p = [
        BoundingBox::from_top_left(0.0, 0.0, 10.0, 6.0)?,
        BoundingBox::from_top_left(0.0, 0.0, 10.0, 8.0)?,
    ];
    let r = compute_metrics(&p, &[gt, gt], EvalMode::Offline, 0.0)?;
    let ok = (r.ao - 0.7).abs() < 1e-15 && r.sr_50 == 1.0 && r.sr_75 == 0.5;
    Ok((ok, format!("AO {} SR50 {} SR75 {}", r.ao, r.sr_50, r.sr_75)))
}

fn schedules() -> Result<(bool, String)> {
    let sched = CurriculumSchedule::default();
    let lens = [
        video_length(1, &sched)?,
        video_length(40, &sched)?,
        video_length(60, &sched)?,
    ];
    let lr = TrainConfig::default().lr_schedule();
    let (a, b) = (learning_rate(1, &lr), learning_rate(100, &lr));
    let ok = lens == [2, 3, 4] && (a - 0.005).abs() < 1e-12 && (b - 0.0005).abs() < 1e-12;
    Ok((ok, format!("lengths {lens:?}, lr {a} .. {b}")))
}

/// Runs every fixture; never panics on a failing one.
pub fn run_selftest(seed: u64) -> Vec<SelfTestRow> {
    vec![
        row("gradient checks", gradients()),
        row("zero-init backbone == blind twin", blind_twin(seed)),
        row("temporal state size constant", state_size(seed)),
        row("online pairing at 2 periods", hand_pairing()),
        row("zero latency == offline", zero_latency(seed)),
        row("AO / SR arithmetic", ao_arithmetic()),
        row("curriculum and lr schedule", schedules()),
    ]
}
