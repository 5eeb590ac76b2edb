use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels, centre format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Validated constructor: finite centre, strictly positive size.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidTarget(format!(
                "non-finite box ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidTarget(format!(
                "box size {w}x{h} must be positive"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// From the top-left `x, y, w, h` convention of ground-truth files.
    pub fn from_top_left(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.left() && x <= self.right() && y >= self.top() && y <= self.bottom()
    }

    pub fn intersection(&self, o: &Self) -> f64 {
        let iw = (self.right().min(o.right()) - self.left().max(o.left())).max(0.0);
        let ih = (self.bottom().min(o.bottom()) - self.top().max(o.top())).max(0.0);
        iw * ih
    }

    pub fn iou(&self, o: &Self) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Euclidean distance between centres.
    pub fn center_distance(&self, o: &Self) -> f64 {
        (self.cx - o.cx).hypot(self.cy - o.cy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn top_left_conversion() {
        let b = BoundingBox::from_top_left(0.0, 0.0, 4.0, 4.0).unwrap();
        assert_eq!(
            b,
            BoundingBox {
                cx: 2.0,
                cy: 2.0,
                w: 4.0,
                h: 4.0
            }
        );
        assert!(BoundingBox::from_top_left(0.0, 0.0, 0.0, 4.0).is_err());
    }

    #[test]
    fn iou_closed_forms() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        let far = BoundingBox::new(10.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(a.iou(&far), 0.0);
    }

    proptest! {
        #[test]
        fn iou_matches_pixel_count(
            x0 in 0i32..20, y0 in 0i32..20, w0 in 1i32..=20, h0 in 1i32..=20,
            x1 in 0i32..20, y1 in 0i32..20, w1 in 1i32..=20, h1 in 1i32..=20,
        ) {
            let a = BoundingBox::from_top_left(x0 as f64, y0 as f64, w0 as f64, h0 as f64).unwrap();
            let b = BoundingBox::from_top_left(x1 as f64, y1 as f64, w1 as f64, h1 as f64).unwrap();
            let inside = |px: i32, py: i32, x: i32, y: i32, w: i32, h: i32| px >= x && px < x + w && py >= y && py < y + h;
            let (mut inter, mut union) = (0usize, 0usize);
            for py in 0..40 {
                for px in 0..40 {
                    let (ia, ib) = (inside(px, py, x0, y0, w0, h0), inside(px, py, x1, y1, w1, h1));
                    inter += (ia && ib) as usize;
                    union += (ia || ib) as usize;
                }
            }
            let grid = inter as f64 / union as f64;
            let tol = 2.0 / a.area().min(b.area());
            prop_assert!((a.iou(&b) - grid).abs() <= tol);
            prop_assert!((a.iou(&b) - b.iou(&a)).abs() < 1e-15);
        }
    }
}
