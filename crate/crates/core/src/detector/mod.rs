//! Minimal two-stage detector: a 4-layer stride-8 backbone, an anchor RPN,
//! and a RoIAlign head with `C + 1` classes (index `C` is background).

mod anchors;
mod roi_align;
mod targets;

use ndarray::{Array2, Array3, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::boxes::{nms, BoundingBox};
use crate::dataset::{DetectionSample, Image, Instance};
use crate::error::Result;
use crate::nn::{Conv2d, Graph, Linear, ParamStore};
use crate::numeric;

pub use anchors::generate_anchors;
pub use roi_align::{roi_align_plan, roi_extract, RoiAlignConfig, RoiDiagnostics};
pub use targets::{
    match_boxes, sample_roi_targets, sample_rpn_targets, RoiTargets, RpnTargets, SamplingConfig, ROI_DELTA_STDS,
};

/// Output stride of the backbone.
pub const STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub num_classes: usize,
    pub image_size: usize,
    /// Output widths of the four backbone conv layers.
    pub channels: [usize; 4],
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub rpn_channels: usize,
    pub roi_size: usize,
    pub roi_sampling: usize,
    pub head_hidden: usize,
    pub rpn_pre_nms: usize,
    pub rpn_post_nms_train: usize,
    pub rpn_post_nms_test: usize,
    pub rpn_nms: f64,
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub score_threshold: f64,
    pub test_nms: f64,
    pub max_detections: usize,
}

impl DetectorConfig {
    pub fn new(num_classes: usize, image_size: usize) -> Self {
        let k = image_size as f64 / 64.0;
        Self {
            num_classes,
            image_size,
            channels: [16, 32, 32, 32],
            anchor_scales: vec![12.0 * k, 18.0 * k, 26.0 * k],
            anchor_ratios: vec![1.0],
            rpn_channels: 32,
            roi_size: 7,
            roi_sampling: 2,
            head_hidden: 64,
            rpn_pre_nms: 200,
            rpn_post_nms_train: 48,
            rpn_post_nms_test: 32,
            rpn_nms: 0.7,
            rpn_batch: 64,
            rpn_fg_fraction: 0.5,
            roi_batch: 32,
            roi_fg_fraction: 0.25,
            fg_iou: 0.5,
            bg_iou: 0.3,
            score_threshold: 0.05,
            test_nms: 0.3,
            max_detections: 20,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels[3]
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        let s = self.image_size.div_ceil(STRIDE);
        (s, s)
    }

    pub fn num_anchor_shapes(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// Flattened RoI feature width `d * S * S`.
    pub fn roi_feature_dim(&self) -> usize {
        self.feature_dim() * self.roi_size * self.roi_size
    }

    pub fn roi_align(&self) -> RoiAlignConfig {
        RoiAlignConfig {
            output_size: self.roi_size,
            sampling_ratio: self.roi_sampling,
            spatial_scale: 1.0 / STRIDE as f64,
        }
    }
}

/// Last-conv-layer activations, channel-first `[d, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneFeatures {
    pub feature_map: Array3<f64>,
    pub stride: usize,
}

/// Region proposals with their head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalBatch {
    pub boxes: Vec<BoundingBox>,
    pub objectness: Vec<f64>,
    /// Flattened `[d * S * S]` RoI features, one row per box.
    pub roi_features: Array2<f64>,
    /// Softmax posteriors over `C + 1` classes, one row per box.
    pub class_posteriors: Array2<f64>,
    /// Class-specific normalized deltas, `4 * C` per box.
    pub box_deltas: Array2<f64>,
}

impl ProposalBatch {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

/// Graph handles of one backbone pass.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOut {
    pub features: Var,
    /// Output of the second conv layer (stride 4).
    pub mid: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RpnOut {
    /// `[A, h, w]` objectness logits.
    pub logits: Var,
    /// `[4A, h, w]` anchor deltas.
    pub deltas: Var,
    pub feature_hw: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct RoiOut {
    pub boxes: Vec<BoundingBox>,
    /// `[N, d * S * S]` pooled features.
    pub pooled: Var,
    /// `[N, C + 1]`.
    pub cls_logits: Var,
    /// `[N, 4C]`.
    pub deltas: Var,
    pub diagnostics: RoiDiagnostics,
}

/// Detection loss components on the graph.
pub struct DetectionLoss {
    pub total: Var,
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub roi_cls: f64,
    pub roi_box: f64,
    /// The sampled RoI minibatch the head was trained on.
    pub rois: RoiOut,
    pub roi_labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    backbone: [Conv2d; 4],
    rpn_conv: Conv2d,
    rpn_cls: Conv2d,
    rpn_box: Conv2d,
    head_fc: Linear,
    head_cls: Linear,
    head_box: Linear,
}

/// `[3, h, w]` network input, channels first, values as stored.
pub fn image_tensor(image: &Image) -> Tensor {
    let (h, w, _) = image.dim();
    let mut t = Tensor::zeros(IxDyn(&[3, h, w]));
    for ((y, x, c), &v) in image.indexed_iter() {
        t[[c, y, x]] = v;
    }
    t
}

impl Detector {
    pub fn new<R: Rng>(config: DetectorConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let ch = config.channels;
        let backbone = [
            Conv2d::new(store, rng, "backbone.conv1", 3, ch[0], 3, 2, None),
            Conv2d::new(store, rng, "backbone.conv2", ch[0], ch[1], 3, 2, None),
            Conv2d::new(store, rng, "backbone.conv3", ch[1], ch[2], 3, 2, None),
            Conv2d::new(store, rng, "backbone.conv4", ch[2], ch[3], 3, 1, None),
        ];
        let a = config.num_anchor_shapes();
        let rpn_conv = Conv2d::new(store, rng, "rpn.conv", ch[3], config.rpn_channels, 3, 1, None);
        let rpn_cls = Conv2d::new(store, rng, "rpn.cls", config.rpn_channels, a, 1, 1, Some(0.01));
        let rpn_box = Conv2d::new(store, rng, "rpn.box", config.rpn_channels, 4 * a, 1, 1, Some(0.01));
        let head_fc = Linear::new(
            store,
            rng,
            "head.fc",
            config.roi_feature_dim(),
            config.head_hidden,
            None,
        );
        let head_cls = Linear::new(
            store,
            rng,
            "head.cls",
            config.head_hidden,
            config.num_classes + 1,
            Some(0.01),
        );
        let head_box = Linear::new(
            store,
            rng,
            "head.box",
            config.head_hidden,
            4 * config.num_classes,
            Some(0.001),
        );
        Self {
            config,
            backbone,
            rpn_conv,
            rpn_cls,
            rpn_box,
            head_fc,
            head_cls,
            head_box,
        }
    }

    pub fn backbone(&self, g: &mut Graph, image: &Image) -> BackboneOut {
        let x = g.tape.constant(image_tensor(image));
        let mut h = x;
        let mut mid = x;
        for (i, conv) in self.backbone.iter().enumerate() {
            h = conv.forward(g, h);
            h = g.tape.relu(h);
            if i == 1 {
                mid = h;
            }
        }
        BackboneOut { features: h, mid }
    }

    /// Value-only backbone pass.
    pub fn backbone_forward(&self, store: &ParamStore, image: &Image) -> BackboneFeatures {
        let mut g = Graph::inference(store);
        let out = self.backbone(&mut g, image);
        let fm = g.tape.value(out.features).clone();
        BackboneFeatures {
            feature_map: fm.into_dimensionality().expect("rank-3 features"),
            stride: STRIDE,
        }
    }

    pub fn rpn(&self, g: &mut Graph, features: Var) -> RpnOut {
        let shape = g.tape.value(features).shape().to_vec();
        let h = self.rpn_conv.forward(g, features);
        let h = g.tape.relu(h);
        let logits = self.rpn_cls.forward(g, h);
        let deltas = self.rpn_box.forward(g, h);
        RpnOut {
            logits,
            deltas,
            feature_hw: (shape[1], shape[2]),
        }
    }

    pub fn anchors(&self, feature_hw: (usize, usize)) -> Vec<BoundingBox> {
        generate_anchors(
            feature_hw,
            STRIDE as f64,
            &self.config.anchor_scales,
            &self.config.anchor_ratios,
        )
    }

    /// Flat index into the `[A, h, w]` logit map for anchor `i`.
    fn logit_index(&self, i: usize, hw: (usize, usize)) -> usize {
        let a = self.config.num_anchor_shapes();
        let (cell, k) = (i / a, i % a);
        k * hw.0 * hw.1 + cell
    }

    fn delta_index(&self, i: usize, j: usize, hw: (usize, usize)) -> usize {
        let a = self.config.num_anchor_shapes();
        let (cell, k) = (i / a, i % a);
        (4 * k + j) * hw.0 * hw.1 + cell
    }

    /// Decodes, clips, ranks and suppresses anchors into at most `post_nms`
    /// proposals ordered by nonincreasing objectness.
    pub fn propose(
        &self,
        g: &Graph,
        rpn: &RpnOut,
        image_hw: (usize, usize),
        post_nms: usize,
    ) -> (Vec<BoundingBox>, Vec<f64>) {
        let anchors = self.anchors(rpn.feature_hw);
        let logits = g.tape.value(rpn.logits);
        let deltas = g.tape.value(rpn.deltas);
        let lflat = logits.as_standard_layout();
        let lflat = lflat.as_slice().unwrap();
        let dflat = deltas.as_standard_layout();
        let dflat = dflat.as_slice().unwrap();
        let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
        let mut scored: Vec<(BoundingBox, f64)> = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let d = [0, 1, 2, 3].map(|j| dflat[self.delta_index(i, j, rpn.feature_hw)]);
                let b = a.decode(d).clip(iw, ih, 2.0);
                (b, numeric::sigmoid(lflat[self.logit_index(i, rpn.feature_hw)]))
            })
            .collect();
        // stable sort keeps anchor order on ties
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(self.config.rpn_pre_nms);
        let boxes: Vec<BoundingBox> = scored.iter().map(|s| s.0).collect();
        let scores: Vec<f64> = scored.iter().map(|s| s.1).collect();
        let keep = nms(&boxes, &scores, self.config.rpn_nms, post_nms);
        (
            keep.iter().map(|&k| boxes[k]).collect(),
            keep.iter().map(|&k| scores[k]).collect(),
        )
    }

    pub fn roi_head(&self, g: &mut Graph, features: Var, boxes: &[BoundingBox]) -> RoiOut {
        let shape = g.tape.value(features).shape().to_vec();
        let (plan, diagnostics) = roi_align_plan((shape[1], shape[2]), boxes, &self.config.roi_align());
        let pooled = g.tape.spatial_sample(features, plan);
        let pooled = g.tape.swap_leading(pooled);
        let pooled = g.tape.reshape(pooled, &[boxes.len(), self.config.roi_feature_dim()]);
        let h = self.head_fc.forward(g, pooled);
        let h = g.tape.relu(h);
        let cls_logits = self.head_cls.forward(g, h);
        let deltas = self.head_box.forward(g, h);
        RoiOut {
            boxes: boxes.to_vec(),
            pooled,
            cls_logits,
            deltas,
            diagnostics,
        }
    }

    pub fn sampling(&self, rpn: bool) -> SamplingConfig {
        let c = &self.config;
        SamplingConfig {
            batch: if rpn { c.rpn_batch } else { c.roi_batch },
            fg_fraction: if rpn { c.rpn_fg_fraction } else { c.roi_fg_fraction },
            fg_iou: c.fg_iou,
            bg_iou: c.bg_iou,
        }
    }

    /// `L_det = rpn_cls + rpn_box + roi_cls + roi_box` for one source image.
    /// Reading the annotations of a target sample is refused.
    pub fn detection_loss<R: Rng>(
        &self,
        g: &mut Graph,
        backbone: &BackboneOut,
        sample: &DetectionSample,
        rng: &mut R,
    ) -> Result<DetectionLoss> {
        let gts = sample.training_instances()?;
        let rpn = self.rpn(g, backbone.features);
        let anchors = self.anchors(rpn.feature_hw);
        let rpn_t = sample_rpn_targets(&anchors, gts, &self.sampling(true), rng);
        let n_rpn = rpn_t.indices.len().max(1) as f64;

        let logit_idx: Vec<usize> = rpn_t
            .indices
            .iter()
            .map(|&i| self.logit_index(i, rpn.feature_hw))
            .collect();
        let picked = g.tape.gather_flat(rpn.logits, &logit_idx);
        let rpn_cls = g
            .tape
            .bce_logits_sum(picked, rpn_t.labels.clone(), vec![1.0 / n_rpn; rpn_t.labels.len()]);

        let mut delta_idx = Vec::with_capacity(4 * rpn_t.indices.len());
        let mut delta_tgt = Vec::with_capacity(delta_idx.capacity());
        let mut delta_w = Vec::with_capacity(delta_idx.capacity());
        for ((&i, &l), d) in rpn_t.indices.iter().zip(&rpn_t.labels).zip(&rpn_t.deltas) {
            for (j, &dj) in d.iter().enumerate() {
                delta_idx.push(self.delta_index(i, j, rpn.feature_hw));
                delta_tgt.push(dj);
                delta_w.push(l);
            }
        }
        let picked = g.tape.gather_flat(rpn.deltas, &delta_idx);
        let rpn_box = g.tape.smooth_l1_sum(picked, delta_tgt, delta_w, 1.0 / 9.0, n_rpn);

        let hw = (sample.height(), sample.width());
        let (proposals, _) = self.propose(g, &rpn, hw, self.config.rpn_post_nms_train);
        let roi_t = sample_roi_targets(&proposals, gts, self.config.num_classes, &self.sampling(false), rng);
        let rois = self.roi_head(g, backbone.features, &roi_t.boxes);
        let roi_cls = g.tape.softmax_cross_entropy(rois.cls_logits, &roi_t.labels);
        let c = self.config.num_classes;
        let n_roi = roi_t.boxes.len();
        let mut tgt = vec![0.0; n_roi * 4 * c];
        let mut wts = vec![0.0; n_roi * 4 * c];
        for (r, (&l, d)) in roi_t.labels.iter().zip(&roi_t.deltas).enumerate() {
            if l < c {
                for j in 0..4 {
                    tgt[r * 4 * c + 4 * l + j] = d[j];
                    wts[r * 4 * c + 4 * l + j] = 1.0;
                }
            }
        }
        let roi_box = g.tape.smooth_l1_sum(rois.deltas, tgt, wts, 1.0, n_roi.max(1) as f64);

        let total = g.tape.sum_vars(&[rpn_cls, rpn_box, roi_cls, roi_box]);
        Ok(DetectionLoss {
            total,
            rpn_cls: g.tape.scalar(rpn_cls),
            rpn_box: g.tape.scalar(rpn_box),
            roi_cls: g.tape.scalar(roi_cls),
            roi_box: g.tape.scalar(roi_box),
            rois,
            roi_labels: roi_t.labels,
        })
    }

    /// The top `count` proposals of an image pushed through the RoI head,
    /// without any supervision.
    pub fn unsupervised_rois(
        &self,
        g: &mut Graph,
        backbone: &BackboneOut,
        image_hw: (usize, usize),
        count: usize,
    ) -> (RoiOut, Vec<f64>) {
        let rpn = self.rpn(g, backbone.features);
        let (boxes, scores) = self.propose(g, &rpn, image_hw, count);
        (self.roi_head(g, backbone.features, &boxes), scores)
    }

    /// Snapshot of a [`RoiOut`] as plain values.
    pub fn proposal_batch(&self, g: &Graph, rois: &RoiOut, objectness: Vec<f64>) -> ProposalBatch {
        let n = rois.boxes.len();
        let matrix = |v: Var, cols: usize| {
            g.tape
                .value(v)
                .clone()
                .into_shape_with_order((n, cols))
                .expect("row matrix")
        };
        let logits = matrix(rois.cls_logits, self.config.num_classes + 1);
        let mut posteriors = logits.clone();
        for mut row in posteriors.axis_iter_mut(Axis(0)) {
            let p = numeric::softmax(row.as_slice().unwrap());
            row.assign(&ndarray::Array1::from(p));
        }
        ProposalBatch {
            boxes: rois.boxes.clone(),
            objectness,
            roi_features: matrix(rois.pooled, self.config.roi_feature_dim()),
            class_posteriors: posteriors,
            box_deltas: matrix(rois.deltas, 4 * self.config.num_classes),
        }
    }

    /// Full inference: proposals, per-class decoding, score threshold and
    /// per-class NMS.
    pub fn detect(&self, store: &ParamStore, image: &Image) -> Vec<Detection> {
        let mut g = Graph::inference(store);
        let bb = self.backbone(&mut g, image);
        let rpn = self.rpn(&mut g, bb.features);
        let hw = (image.shape()[0], image.shape()[1]);
        let (boxes, scores) = self.propose(&g, &rpn, hw, self.config.rpn_post_nms_test);
        if boxes.is_empty() {
            return Vec::new();
        }
        let rois = self.roi_head(&mut g, bb.features, &boxes);
        let batch = self.proposal_batch(&g, &rois, scores);
        self.postprocess(&batch, hw)
    }

    pub fn postprocess(&self, batch: &ProposalBatch, image_hw: (usize, usize)) -> Vec<Detection> {
        let c = self.config.num_classes;
        let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
        let mut out = Vec::new();
        for class in 0..c {
            let mut boxes = Vec::new();
            let mut scores = Vec::new();
            for (r, prop) in batch.boxes.iter().enumerate() {
                let s = batch.class_posteriors[[r, class]];
                if s < self.config.score_threshold {
                    continue;
                }
                let d = [0, 1, 2, 3].map(|j| batch.box_deltas[[r, 4 * class + j]] * ROI_DELTA_STDS[j]);
                boxes.push(prop.decode(d).clip(iw, ih, 1.0));
                scores.push(s);
            }
            for k in nms(&boxes, &scores, self.config.test_nms, usize::MAX) {
                out.push(Detection {
                    bbox: boxes[k],
                    class_id: class,
                    score: scores[k],
                });
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.truncate(self.config.max_detections);
        out
    }

    /// RoI features of arbitrary boxes (e.g. ground truth), flattened.
    pub fn roi_features(&self, store: &ParamStore, image: &Image, boxes: &[BoundingBox]) -> Array2<f64> {
        let feats = self.backbone_forward(store, image);
        let (pooled, _) = roi_extract(&feats.feature_map, boxes, &self.config.roi_align());
        let n = boxes.len();
        pooled
            .into_shape_with_order((n, self.config.roi_feature_dim()))
            .expect("flatten")
    }
}

/// Mean RoI classification cross-entropy of explicit posteriors.
pub fn roi_classification_loss(posteriors: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len().max(1) as f64;
    posteriors
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &l)| numeric::cross_entropy(row.as_slice().unwrap(), l))
        .sum::<f64>()
        / n
}

/// Smooth-L1 box loss over foreground rows, normalized by the row count.
pub fn box_regression_loss(pred: &[[f64; 4]], target: &[[f64; 4]], foreground: &[bool], beta: f64) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target)
        .zip(foreground)
        .filter(|(_, &fg)| fg)
        .map(|((p, t), _)| (0..4).map(|j| numeric::smooth_l1(p[j] - t[j], beta)).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Ground-truth boxes of a sample as a plain list (evaluation use).
pub fn instance_boxes(instances: &[Instance]) -> Vec<BoundingBox> {
    instances.iter().map(|i| i.bbox).collect()
}
