//! Image-level categorical regularization: a multi-label classifier on
//! globally pooled backbone features, supervised by source image labels.

use ndarray::{Array1, Array3, Axis};
use rand::Rng;

use crate::autograd::Var;
use crate::dataset::{DetectionSample, Domain};
use crate::detector::BackboneFeatures;
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamStore, SigmoidOutput};
use crate::numeric::{bce, clamp_prob, sigmoid};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageLevelPrediction {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    /// Domain of the image the prediction was made on.
    pub domain: Domain,
}

/// GAP followed by a 1x1 convolution, stored as a `C x d` linear map.
#[derive(Clone, Copy, Debug)]
pub struct IcrHead {
    classifier: Linear,
}

impl IcrHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, in_ch: usize, num_classes: usize) -> Self {
        Self {
            classifier: Linear::new(store, rng, "icr.classifier", in_ch, num_classes, Some(0.01)),
        }
    }

    /// `[1, C]` class scores.
    pub fn forward(&self, g: &mut Graph, features: Var) -> SigmoidOutput {
        let pooled = g.tape.global_avg_pool(features);
        let d = g.tape.value(pooled).len();
        let pooled = g.tape.reshape(pooled, &[1, d]);
        let logits = self.classifier.forward(g, pooled);
        SigmoidOutput::new(g, logits)
    }

    fn weights(&self, store: &ParamStore) -> (ndarray::Array2<f64>, Array1<f64>) {
        let w = store.get(self.classifier.weight).clone();
        let b = store.get(self.classifier.bias).clone();
        let (c, d) = (w.shape()[0], w.shape()[1]);
        (
            w.into_shape_with_order((c, d)).expect("matrix"),
            b.into_shape_with_order(c).expect("vector"),
        )
    }

    pub fn num_classes(&self, store: &ParamStore) -> usize {
        store.get(self.classifier.bias).len()
    }

    /// Value-only forward pass on precomputed backbone features.
    pub fn icr_forward(&self, store: &ParamStore, features: &BackboneFeatures, domain: Domain) -> ImageLevelPrediction {
        let (w, b) = self.weights(store);
        let pooled = features
            .feature_map
            .mean_axis(Axis(2))
            .and_then(|m| m.mean_axis(Axis(1)))
            .expect("non-empty map");
        let logits = w.dot(&pooled) + &b;
        ImageLevelPrediction {
            probs: logits.iter().map(|&z| clamp_prob(sigmoid(z))).collect(),
            logits: logits.to_vec(),
            domain,
        }
    }

    /// Classifier response at every location before pooling, `[C, h, w]`.
    /// Averaging a map over its locations gives that class's logit.
    pub fn class_evidence_maps(&self, store: &ParamStore, features: &BackboneFeatures) -> Array3<f64> {
        let (w, b) = self.weights(store);
        let (d, h, wd) = features.feature_map.dim();
        let flat = features
            .feature_map
            .to_shape((d, h * wd))
            .expect("contiguous map")
            .to_owned();
        let mut out = w.dot(&flat);
        for (mut row, bias) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row += *bias;
        }
        out.into_shape_with_order((w.nrows(), h, wd)).expect("maps")
    }
}

/// Image coordinates `(x, y)` of the centre of the strongest cell in
/// class `class`'s evidence map. Ties go to the first cell in row-major order.
pub fn evidence_peak(maps: &Array3<f64>, class: usize, stride: usize) -> (f64, f64) {
    let map = maps.index_axis(Axis(0), class);
    let mut best = (0, 0, f64::NEG_INFINITY);
    for ((r, c), &v) in map.indexed_iter() {
        if v > best.2 {
            best = (r, c, v);
        }
    }
    let s = stride as f64;
    ((best.1 as f64 + 0.5) * s, (best.0 as f64 + 0.5) * s)
}

/// `-sum_c [y_c log p_c + (1 - y_c) log(1 - p_c)]`.
pub fn icr_loss_values(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} class probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce(clamp_prob(p), y as f64))
        .sum())
}

/// ICR loss of a prediction against a sample's image labels. Source only.
pub fn icr_loss(prediction: &ImageLevelPrediction, sample: &DetectionSample) -> Result<f64> {
    let labels = sample.training_image_labels()?;
    icr_loss_values(&prediction.probs, labels)
}

/// Graph form of the ICR loss, differentiated through the logits; refuses
/// target samples.
pub fn icr_term(g: &mut Graph, scores: SigmoidOutput, sample: &DetectionSample) -> Result<Var> {
    let labels = sample.training_image_labels()?;
    let n = labels.len();
    if g.tape.value(scores.logits).len() != n {
        return Err(Error::contract("ICR head width differs from the label vector"));
    }
    Ok(g.tape
        .bce_logits_sum(scores.logits, labels.iter().map(|&y| y as f64).collect(), vec![1.0; n]))
}
