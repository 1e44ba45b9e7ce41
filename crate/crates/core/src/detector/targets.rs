//! Anchor and RoI assignment plus minibatch sampling.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::boxes::{iou, BoundingBox};
use crate::dataset::Instance;

/// Normalization applied to RoI-head regression targets.
pub const ROI_DELTA_STDS: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Best-overlapping ground truth for each candidate box.
pub fn match_boxes(candidates: &[BoundingBox], gts: &[Instance]) -> Vec<Option<(usize, f64)>> {
    candidates
        .iter()
        .map(|c| {
            gts.iter().enumerate().map(|(k, g)| (k, iou(c, &g.bbox))).fold(
                None,
                |best: Option<(usize, f64)>, (k, o)| match best {
                    Some((_, bo)) if bo >= o => best,
                    _ => Some((k, o)),
                },
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    /// Sampled anchor indices.
    pub indices: Vec<usize>,
    /// 1 for foreground, 0 for background, aligned with `indices`.
    pub labels: Vec<f64>,
    /// Regression targets for each sampled anchor; only foreground rows
    /// contribute.
    pub deltas: Vec<[f64; 4]>,
}

pub struct SamplingConfig {
    pub batch: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

pub fn sample_rpn_targets<R: Rng>(
    anchors: &[BoundingBox],
    gts: &[Instance],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> RpnTargets {
    let matches = match_boxes(anchors, gts);
    let mut fg: Vec<usize> = Vec::new();
    let mut bg: Vec<usize> = Vec::new();
    for (i, m) in matches.iter().enumerate() {
        match m {
            Some((_, o)) if *o >= cfg.fg_iou => fg.push(i),
            Some((_, o)) if *o < cfg.bg_iou => bg.push(i),
            None => bg.push(i),
            _ => {}
        }
    }
    // every ground truth keeps its best anchor
    for g in gts {
        let best = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (i, iou(a, &g.bbox)))
            .fold((0usize, -1.0), |b, c| if c.1 > b.1 { c } else { b });
        if best.1 > 0.0 && !fg.contains(&best.0) {
            fg.push(best.0);
            bg.retain(|&i| i != best.0);
        }
    }
    fg.sort_unstable();
    let max_fg = ((cfg.batch as f64) * cfg.fg_fraction).round() as usize;
    fg.shuffle(rng);
    fg.truncate(max_fg);
    bg.shuffle(rng);
    bg.truncate(cfg.batch - fg.len());

    let mut indices = Vec::with_capacity(fg.len() + bg.len());
    let mut labels = Vec::with_capacity(indices.capacity());
    let mut deltas = Vec::with_capacity(indices.capacity());
    for &i in &fg {
        let gt = best_gt_for(&anchors[i], gts);
        indices.push(i);
        labels.push(1.0);
        deltas.push(anchors[i].encode(&gts[gt].bbox));
    }
    for &i in &bg {
        indices.push(i);
        labels.push(0.0);
        deltas.push([0.0; 4]);
    }
    RpnTargets {
        indices,
        labels,
        deltas,
    }
}

fn best_gt_for(b: &BoundingBox, gts: &[Instance]) -> usize {
    gts.iter()
        .enumerate()
        .map(|(k, g)| (k, iou(b, &g.bbox)))
        .fold((0usize, -1.0), |best, c| if c.1 > best.1 { c } else { best })
        .0
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiTargets {
    pub boxes: Vec<BoundingBox>,
    /// Class index, `C` for background.
    pub labels: Vec<usize>,
    /// Normalized regression targets; zero for background rows.
    pub deltas: Vec<[f64; 4]>,
}

impl RoiTargets {
    pub fn num_foreground(&self, num_classes: usize) -> usize {
        self.labels.iter().filter(|&&l| l < num_classes).count()
    }
}

/// Labels proposals (plus the ground-truth boxes themselves) and samples a
/// fixed-size RoI minibatch with a capped foreground share.
pub fn sample_roi_targets<R: Rng>(
    proposals: &[BoundingBox],
    gts: &[Instance],
    num_classes: usize,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> RoiTargets {
    let mut candidates: Vec<BoundingBox> = proposals.to_vec();
    candidates.extend(gts.iter().map(|g| g.bbox));
    let matches = match_boxes(&candidates, gts);
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, m) in matches.iter().enumerate() {
        match m {
            Some((_, o)) if *o >= cfg.fg_iou => fg.push(i),
            Some((_, o)) if *o < cfg.bg_iou => bg.push(i),
            None => bg.push(i),
            _ => {}
        }
    }
    let max_fg = ((cfg.batch as f64) * cfg.fg_fraction).round() as usize;
    fg.shuffle(rng);
    fg.truncate(max_fg);
    bg.shuffle(rng);
    bg.truncate(cfg.batch - fg.len());

    let mut out = RoiTargets {
        boxes: Vec::new(),
        labels: Vec::new(),
        deltas: Vec::new(),
    };
    for &i in &fg {
        let (k, _) = matches[i].expect("foreground has a match");
        let raw = candidates[i].encode(&gts[k].bbox);
        let mut d = [0.0; 4];
        for j in 0..4 {
            d[j] = raw[j] / ROI_DELTA_STDS[j];
        }
        out.boxes.push(candidates[i]);
        out.labels.push(gts[k].class_id);
        out.deltas.push(d);
    }
    for &i in &bg {
        out.boxes.push(candidates[i]);
        out.labels.push(num_classes);
        out.deltas.push([0.0; 4]);
    }
    out
}
