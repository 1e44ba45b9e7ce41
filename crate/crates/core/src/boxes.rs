//! Axis-aligned boxes in continuous image coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Log-scale clamp on decoded width/height deltas.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !(x_min < x_max && y_min < y_max) || !b.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!("degenerate box {:?}", b.to_array())));
        }
        Ok(b)
    }

    pub const fn from_corners_unchecked(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Clips to `[0, width] x [0, height]`, keeping at least `min_size` of
    /// extent on each axis.
    pub fn clip(&self, width: f64, height: f64, min_size: f64) -> Self {
        let mut x0 = self.x_min.clamp(0.0, width);
        let mut y0 = self.y_min.clamp(0.0, height);
        let mut x1 = self.x_max.clamp(0.0, width);
        let mut y1 = self.y_max.clamp(0.0, height);
        if x1 - x0 < min_size {
            let cx = (0.5 * (x0 + x1)).clamp(min_size / 2.0, width - min_size / 2.0);
            x0 = cx - min_size / 2.0;
            x1 = cx + min_size / 2.0;
        }
        if y1 - y0 < min_size {
            let cy = (0.5 * (y0 + y1)).clamp(min_size / 2.0, height - min_size / 2.0);
            y0 = cy - min_size / 2.0;
            y1 = cy + min_size / 2.0;
        }
        Self::from_corners_unchecked(x0, y0, x1, y1)
    }

    /// `(dx, dy, dw, dh)` regression target that maps `self` onto `gt`.
    pub fn encode(&self, gt: &BoundingBox) -> [f64; 4] {
        let (pcx, pcy) = self.center();
        let (gcx, gcy) = gt.center();
        let (pw, ph) = (self.width(), self.height());
        [
            (gcx - pcx) / pw,
            (gcy - pcy) / ph,
            (gt.width() / pw).ln(),
            (gt.height() / ph).ln(),
        ]
    }

    /// Inverse of [`BoundingBox::encode`].
    pub fn decode(&self, deltas: [f64; 4]) -> BoundingBox {
        let (pcx, pcy) = self.center();
        let (pw, ph) = (self.width(), self.height());
        let cx = pcx + deltas[0] * pw;
        let cy = pcy + deltas[1] * ph;
        let w = pw * deltas[2].min(MAX_LOG_SCALE).exp();
        let h = ph * deltas[3].min(MAX_LOG_SCALE).exp();
        Self::from_corners_unchecked(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

/// Intersection over union. Symmetric, 1 for equal boxes, 0 for disjoint
/// interiors.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Greedy non-maximum suppression. Returns kept indices ordered by
/// nonincreasing score; no two kept boxes overlap by more than `threshold`.
/// Ties in score keep the lower index first.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            keep.push(i);
        }
    }
    keep
}
