//! Square context crops around a box, resampled to the network input sizes.

use crate::backbone::{SEARCH_SIZE, TEMPLATE_SIZE};
use crate::bbox::BoundingBox;
use crate::error::{dim_err, Result};
use crate::tensor::{FeatureMap, Tensor};

/// A square window of the source image, mapped onto an `out x out` patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    /// Window side in image pixels.
    pub side: f64,
    pub out: usize,
}

/// Context-padded side `2 * sqrt((w + p) * (h + p))`, `p = (w + h) / 2`.
pub fn search_side(b: &BoundingBox) -> f64 {
    let p = (b.w + b.h) / 2.0;
    2.0 * ((b.w + p) * (b.h + p)).sqrt()
}

impl CropWindow {
    pub fn search(center: &BoundingBox) -> Self {
        Self {
            cx: center.cx,
            cy: center.cy,
            side: search_side(center),
            out: SEARCH_SIZE,
        }
    }

    /// Template window: the search window scaled by the patch-size ratio, so
    /// the target has the same pixel scale in both patches.
    pub fn template(target: &BoundingBox) -> Self {
        Self {
            cx: target.cx,
            cy: target.cy,
            side: search_side(target) * TEMPLATE_SIZE as f64 / SEARCH_SIZE as f64,
            out: TEMPLATE_SIZE,
        }
    }

    /// Image pixels per patch pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.out as f64
    }

    pub fn to_patch(&self, b: &BoundingBox) -> BoundingBox {
        let s = self.scale();
        let half = self.out as f64 / 2.0;
        BoundingBox {
            cx: (b.cx - self.cx) / s + half,
            cy: (b.cy - self.cy) / s + half,
            w: b.w / s,
            h: b.h / s,
        }
    }

    pub fn to_image(&self, b: &BoundingBox) -> BoundingBox {
        let s = self.scale();
        let half = self.out as f64 / 2.0;
        BoundingBox {
            cx: self.cx + (b.cx - half) * s,
            cy: self.cy + (b.cy - half) * s,
            w: b.w * s,
            h: b.h * s,
        }
    }

    /// Bilinear resampling of a `3 x H x W` image; samples outside the
    /// image take the per-channel image mean.
    pub fn extract(&self, image: &FeatureMap) -> Result<FeatureMap> {
        let s = image.shape();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return Err(dim_err(format!("image must be C x H x W, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = image.data();
        let plane = h * w;
        let mean: Vec<f64> = src
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let (scale, half) = (self.scale(), self.out as f64 / 2.0);
        let n = self.out;
        let mut out = vec![0.0; c * n * n];
        // Sample positions in source pixel-centre coordinates.
        let coord = |u: usize, centre: f64| centre + (u as f64 + 0.5 - half) * scale - 0.5;
        let xs: Vec<f64> = (0..n).map(|u| coord(u, self.cx)).collect();
        for v in 0..n {
            let y = coord(v, self.cy);
            for (u, &x) in xs.iter().enumerate() {
                if x < -0.5 || y < -0.5 || x > w as f64 - 0.5 || y > h as f64 - 0.5 {
                    for ch in 0..c {
                        out[ch * n * n + v * n + u] = mean[ch];
                    }
                    continue;
                }
                let xc = x.clamp(0.0, (w - 1) as f64);
                let yc = y.clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
                for ch in 0..c {
                    let p = &src[ch * plane..(ch + 1) * plane];
                    let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                    let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                    out[ch * n * n + v * n + u] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Ok(Tensor::from_parts(vec![c, n, n], out))
    }
}
