//! Categorical consistency regularization: target foreground proposals whose
//! detection-head confidence disagrees with the image-level classifier get a
//! larger instance-alignment weight `d = exp(|p - y|)`.

use serde::{Deserialize, Serialize};

use crate::alignment::{instance_align_loss, instance_align_term, GrlConfig, InstanceDomainClassifier};
use crate::autograd::Var;
use crate::dataset::Domain;
use crate::detector::ProposalBatch;
use crate::error::{Error, Result};
use crate::icr::ImageLevelPrediction;
use crate::nn::{Graph, SigmoidOutput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceWeight {
    pub proposal_index: usize,
    /// Chosen foreground class, `None` for background or source proposals.
    pub class: Option<usize>,
    pub weight: f64,
}

/// `exp(|p_hat - y_hat|)`, in `[1, e]`.
pub fn ccr_weight(p_hat: f64, y_hat: f64) -> Result<f64> {
    for (name, v) in [("p_hat", p_hat), ("y_hat", y_hat)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(format!("{name} = {v} is not a probability")));
        }
    }
    Ok((p_hat - y_hat).abs().exp())
}

/// Per-proposal weights. Source proposals and proposals whose posterior
/// argmax is background keep weight 1.
pub fn assign_weights(
    proposals: &ProposalBatch,
    image_pred: &ImageLevelPrediction,
    domain: Domain,
) -> Result<Vec<InstanceWeight>> {
    if image_pred.domain != domain {
        return Err(Error::contract(format!(
            "image-level prediction is for the {} domain, proposals for the {domain} domain",
            image_pred.domain
        )));
    }
    let k = proposals.class_posteriors.ncols();
    if !proposals.is_empty() && k != image_pred.probs.len() + 1 {
        return Err(Error::contract(format!(
            "{k} posterior columns for {} image-level classes",
            image_pred.probs.len()
        )));
    }
    let background = k.saturating_sub(1);
    proposals
        .class_posteriors
        .rows()
        .into_iter()
        .enumerate()
        .map(|(j, row)| {
            let unit = InstanceWeight {
                proposal_index: j,
                class: None,
                weight: 1.0,
            };
            if domain == Domain::Source || argmax(row.iter()) == background {
                return Ok(unit);
            }
            let c = argmax(row.iter().take(background));
            Ok(InstanceWeight {
                class: Some(c),
                weight: ccr_weight(row[c].clamp(0.0, 1.0), image_pred.probs[c])?,
                ..unit
            })
        })
        .collect()
}

/// First index of the maximum.
fn argmax<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    values
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Instance-level alignment loss with CCR weights.
pub fn weighted_instance_align(
    instance_domain_probs: &[f64],
    weights: &[InstanceWeight],
    domain: Domain,
) -> Result<f64> {
    let w: Vec<f64> = weights.iter().map(|w| w.weight).collect();
    instance_align_loss(instance_domain_probs, domain, Some(&w))
}

/// Loss-side realization: plain gradient reversal, weights on the loss.
/// Returns the loss and the classifier's `[N, 1]` scores.
pub fn loss_weighted_instance_term(
    g: &mut Graph,
    classifier: &InstanceDomainClassifier,
    roi_features: Var,
    weights: &[f64],
    domain: Domain,
    grl: GrlConfig,
) -> Result<(Var, SigmoidOutput)> {
    let x = grl.apply(g, roi_features);
    let scores = classifier.forward(g, x);
    Ok((instance_align_term(g, scores, domain, Some(weights))?, scores))
}

/// Gradient-side realization: the reversal scales each proposal's
/// gradient by its weight and the loss itself is unweighted. Feature
/// gradients match [`loss_weighted_instance_term`]; classifier gradients
/// and the loss value do not.
pub fn gradient_weighted_instance_term(
    g: &mut Graph,
    classifier: &InstanceDomainClassifier,
    roi_features: Var,
    weights: &[f64],
    domain: Domain,
    grl: GrlConfig,
) -> Result<(Var, SigmoidOutput)> {
    let n = g.tape.value(roi_features).shape()[0];
    if weights.len() != n {
        return Err(Error::contract(format!(
            "{} instance weights for {n} proposals",
            weights.len()
        )));
    }
    let x = g.tape.grl_rows(roi_features, grl.lambda_weight, weights.to_vec());
    let scores = classifier.forward(g, x);
    Ok((instance_align_term(g, scores, domain, None)?, scores))
}

/// Batch summary for the metrics log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Share of proposals treated as foreground.
    pub fg_fraction: f64,
    pub count: usize,
}

impl WeightStats {
    pub fn from_weights(weights: &[InstanceWeight]) -> Self {
        if weights.is_empty() {
            return Self::default();
        }
        let n = weights.len() as f64;
        let vals = weights.iter().map(|w| w.weight);
        Self {
            min: vals.clone().fold(f64::INFINITY, f64::min),
            mean: vals.clone().sum::<f64>() / n,
            max: vals.fold(f64::NEG_INFINITY, f64::max),
            fg_fraction: weights.iter().filter(|w| w.class.is_some()).count() as f64 / n,
            count: weights.len(),
        }
    }
}
