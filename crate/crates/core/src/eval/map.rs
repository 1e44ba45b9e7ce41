//! VOC-style average precision with all-points interpolation.

use serde::{Deserialize, Serialize};

use crate::boxes::iou;
use crate::dataset::Instance;
use crate::detector::Detection;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// AP per class; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
}

/// Ranks one class's detections over all images and marks each as a true
/// positive or not. Each ground truth is matched at most once, by the
/// highest-scoring detection whose best overlap reaches the threshold.
fn rank_and_match(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Instance>],
    class: usize,
    iou_threshold: f64,
) -> Vec<bool> {
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img, dets) in detections.iter().enumerate() {
        for (k, d) in dets.iter().enumerate() {
            if d.class_id == class {
                ranked.push((d.score, img, k));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|&(_, img, k)| {
            let det = &detections[img][k];
            let gts = ground_truth.get(img).map_or(&[][..], |g| &g[..]);
            let best = gts
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class_id == class)
                .map(|(j, g)| (j, iou(&det.bbox, &g.bbox)))
                .fold(None, |b: Option<(usize, f64)>, c| match b {
                    Some(bb) if bb.1 >= c.1 => Some(bb),
                    _ => Some(c),
                });
            match best {
                Some((j, o)) if o >= iou_threshold && !used[img][j] => {
                    used[img][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Area under the monotone precision envelope of a ranked hit list.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Per-class AP and their mean over classes that have ground truth.
pub fn map_score(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Instance>],
    num_classes: usize,
    iou_threshold: f64,
) -> MapResult {
    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let num_gt = ground_truth.iter().flatten().filter(|g| g.class_id == c).count();
            (num_gt > 0).then(|| average_precision(&rank_and_match(detections, ground_truth, c, iou_threshold), num_gt))
        })
        .collect();
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MapResult { per_class_ap, map }
}
