//! RoIAlign as a sparse bilinear sampling plan.
//!
//! Box coordinates are mapped to the feature grid with `x * scale - 0.5`, so
//! feature cell `u` is centered on image coordinate `(u + 0.5) * stride`.
//! Each output bin averages `sampling^2` bilinear samples.

use ndarray::{Array3, Array4};

use crate::autograd::{SpatialPlan, Tape};
use crate::boxes::BoundingBox;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAlignConfig {
    pub output_size: usize,
    pub sampling_ratio: usize,
    /// Feature cells per image pixel, `1 / stride`.
    pub spatial_scale: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiDiagnostics {
    /// Indices of boxes whose extent was clamped to one pixel.
    pub clamped_boxes: Vec<usize>,
}

pub fn roi_align_plan(
    feature_hw: (usize, usize),
    boxes: &[BoundingBox],
    cfg: &RoiAlignConfig,
) -> (SpatialPlan, RoiDiagnostics) {
    let (h, w) = feature_hw;
    let s = cfg.output_size;
    let sr = cfg.sampling_ratio.max(1);
    let mut diag = RoiDiagnostics::default();
    let mut taps = Vec::with_capacity(boxes.len() * s * s);
    let norm = 1.0 / (sr * sr) as f64;
    for (n, b) in boxes.iter().enumerate() {
        let (mut x0, mut x1) = (b.x_min, b.x_max);
        let (mut y0, mut y1) = (b.y_min, b.y_max);
        if x1 - x0 < 1.0 || y1 - y0 < 1.0 {
            diag.clamped_boxes.push(n);
            if x1 - x0 < 1.0 {
                let c = 0.5 * (x0 + x1);
                x0 = c - 0.5;
                x1 = c + 0.5;
            }
            if y1 - y0 < 1.0 {
                let c = 0.5 * (y0 + y1);
                y0 = c - 0.5;
                y1 = c + 0.5;
            }
        }
        let fx0 = x0 * cfg.spatial_scale - 0.5;
        let fy0 = y0 * cfg.spatial_scale - 0.5;
        let bin_w = (x1 - x0) * cfg.spatial_scale / s as f64;
        let bin_h = (y1 - y0) * cfg.spatial_scale / s as f64;
        for ph in 0..s {
            for pw in 0..s {
                let mut cell: Vec<(usize, f64)> = Vec::with_capacity(4 * sr * sr);
                for iy in 0..sr {
                    let y = fy0 + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sr as f64;
                    for ix in 0..sr {
                        let x = fx0 + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sr as f64;
                        bilinear_taps(y, x, h, w, norm, &mut cell);
                    }
                }
                taps.push(merge_taps(cell));
            }
        }
    }
    (
        SpatialPlan {
            out_shape: vec![boxes.len(), s, s],
            taps,
        },
        diag,
    )
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, scale: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y_lo = y.floor() as usize;
    let x_lo = x.floor() as usize;
    let y_hi = (y_lo + 1).min(h - 1);
    let x_hi = (x_lo + 1).min(w - 1);
    let ly = y - y_lo as f64;
    let lx = x - x_lo as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (yy, xx, wgt) in [
        (y_lo, x_lo, hy * hx),
        (y_lo, x_hi, hy * lx),
        (y_hi, x_lo, ly * hx),
        (y_hi, x_hi, ly * lx),
    ] {
        if wgt != 0.0 {
            out.push((yy * w + xx, wgt * scale));
        }
    }
}

fn merge_taps(mut cell: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    cell.sort_by_key(|t| t.0);
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(cell.len());
    for (i, wgt) in cell {
        match merged.last_mut() {
            Some(last) if last.0 == i => last.1 += wgt,
            _ => merged.push((i, wgt)),
        }
    }
    merged
}

/// Pools a fixed-size `[N, C, S, S]` tensor from a `[C, H, W]` feature map.
pub fn roi_extract(
    features: &Array3<f64>,
    boxes: &[BoundingBox],
    cfg: &RoiAlignConfig,
) -> (Array4<f64>, RoiDiagnostics) {
    let (c, h, w) = features.dim();
    let (plan, diag) = roi_align_plan((h, w), boxes, cfg);
    let s = cfg.output_size;
    let mut tape = Tape::new();
    let x = tape.constant(features.clone().into_dyn());
    let pooled = tape.spatial_sample(x, plan);
    let pooled = tape.swap_leading(pooled);
    let out = tape
        .value(pooled)
        .clone()
        .into_shape_with_order((boxes.len(), c, s, s))
        .expect("pooled shape");
    (out, diag)
}
