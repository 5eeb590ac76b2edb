//! Annotated frame sequences: in-memory or OTB-style directories
//! (`img/*.jpg|png` plus `groundtruth.txt` with top-left `x,y,w,h` lines).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Tensor};

pub const DEFAULT_FPS: f64 = 30.0;

#[derive(Clone, Debug)]
pub enum Frame {
    Memory(Arc<FeatureMap>),
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub fps: f64,
    frames: Vec<Frame>,
    gts: Vec<BoundingBox>,
}

impl Sequence {
    pub fn new(
        name: impl Into<String>,
        fps: f64,
        frames: Vec<Frame>,
        gts: Vec<BoundingBox>,
    ) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        if frames.len() < 2 {
            return Err(Error::Config(format!(
                "a sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        if frames.len() != gts.len() {
            return Err(Error::Config(format!(
                "{} frames but {} ground-truth boxes",
                frames.len(),
                gts.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            fps,
            frames,
            gts,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn gts(&self) -> &[BoundingBox] {
        &self.gts
    }

    /// Frame `k` (0-based) as a `3 x H x W` image in `[0, 1]`.
    pub fn frame(&self, k: usize) -> Result<FeatureMap> {
        match &self.frames[k] {
            Frame::Memory(t) => Ok((**t).clone()),
            Frame::File(p) => read_image(p),
        }
    }

    /// Frames `start..end` as a new sequence sharing the same sources.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Self::new(
            format!("{}[{start}..{end}]", self.name),
            self.fps,
            self.frames[start..end].to_vec(),
            self.gts[start..end].to_vec(),
        )
    }

    /// Loads an OTB-style directory.
    pub fn load(dir: &Path, fps: f64) -> Result<Self> {
        let gt_path = dir.join("groundtruth.txt");
        let text = fs::read_to_string(&gt_path).map_err(|e| Error::Ingestion {
            path: gt_path.clone(),
            msg: e.to_string(),
        })?;
        let gts = parse_groundtruth(&text, &gt_path)?;
        let img_dir = dir.join("img");
        let mut images: Vec<PathBuf> = fs::read_dir(&img_dir)
            .map_err(|e| Error::Ingestion {
                path: img_dir.clone(),
                msg: e.to_string(),
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                    matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png")
                })
            })
            .collect();
        images.sort();
        if images.len() < gts.len() {
            return Err(Error::GroundTruth {
                path: gt_path,
                line: images.len() + 1,
                msg: format!(
                    "no image for this line ({} images in {})",
                    images.len(),
                    img_dir.display()
                ),
            });
        }
        if images.len() > gts.len() {
            return Err(Error::GroundTruth {
                path: gt_path,
                line: gts.len() + 1,
                msg: format!(
                    "missing ground-truth line for {}",
                    images[gts.len()].display()
                ),
            });
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        let frames = images.into_iter().map(Frame::File).collect();
        Self::new(name, fps, frames, gts).map_err(|e| Error::Ingestion {
            path: dir.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Writes the sequence as an OTB-style directory with PNG frames.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("img");
        fs::create_dir_all(&img_dir)?;
        for k in 0..self.len() {
            write_image(&self.frame(k)?, &img_dir.join(format!("{:04}.png", k + 1)))?;
        }
        let lines: Vec<String> = self
            .gts
            .iter()
            .map(|b| format!("{},{},{},{}", b.left(), b.top(), b.w, b.h))
            .collect();
        fs::write(dir.join("groundtruth.txt"), lines.join("\n") + "\n")?;
        Ok(())
    }
}

/// Parses top-left `x,y,w,h` lines (comma, tab or space separated) into
/// centre-format boxes. Blank lines are skipped.
pub fn parse_groundtruth(text: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::GroundTruth {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| err(format!("`{s}`: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 4 {
            return Err(err(format!(
                "expected 4 values x,y,w,h, got {}",
                vals.len()
            )));
        }
        let b = BoundingBox::from_top_left(vals[0], vals[1], vals[2], vals[3])
            .map_err(|e| err(e.to_string()))?;
        out.push(b);
    }
    if out.is_empty() {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            msg: "no ground-truth boxes".into(),
        });
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<FeatureMap> {
    let img = image::open(path)
        .map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_image(t: &FeatureMap, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!(
            "expected a 3 x H x W image, got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (t.data()[c * h * w + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round()
                as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
