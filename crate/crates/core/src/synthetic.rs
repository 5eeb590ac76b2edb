//! Synthetic moving-square sequences with exact ground truth.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::sequence::{Frame, Sequence};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SquareConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Square side in pixels.
    pub side: f64,
    /// Displacement per frame in pixels.
    pub speed: f64,
    /// Std of the per-pixel background noise.
    pub noise: f64,
    pub fps: f64,
}

impl Default for SquareConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 160,
            frames: 8,
            side: 24.0,
            speed: 4.0,
            noise: 0.05,
            fps: 30.0,
        }
    }
}

/// Fraction of the unit pixel `[p, p + 1)` covered by `[lo, hi]`.
fn coverage(p: usize, lo: f64, hi: f64) -> f64 {
    (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0)
}

/// Renders a square with area-weighted (exact) edges over a noisy
/// background.
pub fn render(
    cfg: &SquareConfig,
    b: &BoundingBox,
    fg: [f64; 3],
    bg: [f64; 3],
    rng: &mut impl Rng,
) -> Tensor {
    let (w, h) = (cfg.width, cfg.height);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite std");
    let mut data = vec![0.0; 3 * w * h];
    let cov_x: Vec<f64> = (0..w).map(|x| coverage(x, b.left(), b.right())).collect();
    for y in 0..h {
        let cy = coverage(y, b.top(), b.bottom());
        for x in 0..w {
            let a = cy * cov_x[x];
            let n = if cfg.noise > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            for c in 0..3 {
                data[c * w * h + y * w + x] = (a * fg[c] + (1.0 - a) * bg[c] + n).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// One sequence of a square moving with constant speed and bouncing off the
/// image border.
pub fn moving_square(cfg: &SquareConfig, seed: u64) -> Result<Sequence> {
    if cfg.side <= 0.0 || cfg.side * 2.0 >= cfg.width.min(cfg.height) as f64 {
        return Err(Error::Config(format!(
            "square side {} does not fit a {}x{} frame",
            cfg.side, cfg.width, cfg.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = cfg.side / 2.0;
    let (xmax, ymax) = (cfg.width as f64 - half, cfg.height as f64 - half);
    let mut x = rng.random_range(half + 1.0..xmax - 1.0);
    let mut y = rng.random_range(half + 1.0..ymax - 1.0);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (mut vx, mut vy) = (cfg.speed * theta.cos(), cfg.speed * theta.sin());
    let fg = [
        rng.random_range(0.6..1.0),
        rng.random_range(0.0..0.4),
        rng.random_range(0.2..0.8),
    ];
    let bg = [
        rng.random_range(0.1..0.4),
        rng.random_range(0.4..0.7),
        rng.random_range(0.2..0.5),
    ];
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gts = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        let b = BoundingBox::new(x, y, cfg.side, cfg.side)?;
        frames.push(Frame::Memory(Arc::new(render(cfg, &b, fg, bg, &mut rng))));
        gts.push(b);
        x += vx;
        y += vy;
        if x < half || x > xmax {
            vx = -vx;
            x = x.clamp(half, xmax);
        }
        if y < half || y > ymax {
            vy = -vy;
            y = y.clamp(half, ymax);
        }
    }
    Sequence::new(format!("square-{seed}"), cfg.fps, frames, gts)
}

/// `n` independent sequences with seeds `seed, seed + 1, ...`.
pub fn dataset(cfg: &SquareConfig, n: usize, seed: u64) -> Result<Vec<Sequence>> {
    (0..n as u64)
        .map(|i| moving_square(cfg, seed.wrapping_add(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_matches_rendered_mass() {
        let cfg = SquareConfig {
            noise: 0.0,
            ..Default::default()
        };
        let seq = moving_square(&cfg, 3).unwrap();
        for k in [0, seq.len() - 1] {
            let img = seq.frame(k).unwrap();
            let b = seq.gts()[k];
            let (w, h) = (cfg.width, cfg.height);
            let bg = img.data()[0];
            let fg_minus_bg = {
                let (x, y) = (b.cx as usize, b.cy as usize);
                img.data()[y * w + x] - bg
            };
            let (mut mass, mut mx, mut my) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = (img.data()[y * w + x] - bg) / fg_minus_bg;
                    mass += a;
                    mx += a * (x as f64 + 0.5);
                    my += a * (y as f64 + 0.5);
                }
            }
            assert!((mass - b.area()).abs() < 1e-6 * b.area());
            assert!((mx / mass - b.cx).abs() < 1e-6 && (my / mass - b.cy).abs() < 1e-6);
        }
    }

    #[test]
    fn stays_inside_and_is_deterministic() {
        let cfg = SquareConfig {
            frames: 60,
            speed: 9.0,
            ..Default::default()
        };
        let a = moving_square(&cfg, 11).unwrap();
        let b = moving_square(&cfg, 11).unwrap();
        assert_eq!(a.gts(), b.gts());
        assert_eq!(a.frame(7).unwrap(), b.frame(7).unwrap());
        for g in a.gts() {
            assert!(g.left() >= 0.0 && g.top() >= 0.0);
            assert!(g.right() <= cfg.width as f64 && g.bottom() <= cfg.height as f64);
        }
        assert!(a.gts()[0] != a.gts()[1]);
    }

    #[test]
    fn rejects_oversized_squares() {
        let cfg = SquareConfig {
            side: 100.0,
            ..Default::default()
        };
        assert!(moving_square(&cfg, 0).is_err());
    }
}
