//! Adversarial domain alignment: gradient reversal, the per-activation
//! image-level domain classifier, the per-RoI instance-level classifier, and
//! the image/instance consistency term.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::dataset::Domain;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Linear, ParamStore, SigmoidOutput};
use crate::numeric::{self, clamp_prob};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrlConfig {
    pub lambda_weight: f64,
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self { lambda_weight: 1.0 }
    }
}

impl GrlConfig {
    pub fn new(lambda_weight: f64) -> Result<Self> {
        if !lambda_weight.is_finite() || lambda_weight < 0.0 {
            return Err(Error::config("lambda_weight", "must be a finite value >= 0"));
        }
        Ok(Self { lambda_weight })
    }

    pub fn grl_forward(&self, x: &Tensor) -> Tensor {
        x.clone()
    }

    pub fn grl_backward(&self, upstream: &Tensor) -> Tensor {
        upstream * -self.lambda_weight
    }

    /// Inserts the reversal into a graph.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.tape.grl(x, self.lambda_weight)
    }
}

/// Domain-classifier outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentOutputs {
    /// `h x w` per-activation probabilities of the target domain.
    pub image_domain_map: Array2<f64>,
    pub instance_domain_probs: Vec<f64>,
    pub domain: Domain,
}

fn domain_bce(p: f64, domain: Domain) -> f64 {
    numeric::bce(clamp_prob(p), domain.label())
}

/// `-sum_{u,v} [D log p + (1 - D) log(1 - p)]`, summed over locations.
pub fn image_align_loss(image_domain_map: &Array2<f64>, domain: Domain) -> f64 {
    image_domain_map.iter().map(|&p| domain_bce(p, domain)).sum()
}

/// Weighted instance-level loss `-sum_j w_j [D log p_j + (1 - D) log(1 - p_j)]`.
/// `None` means unit weights.
pub fn instance_align_loss(probs: &[f64], domain: Domain, weights: Option<&[f64]>) -> Result<f64> {
    if let Some(w) = weights {
        if w.len() != probs.len() {
            return Err(Error::contract(format!(
                "{} instance weights for {} proposals",
                w.len(),
                probs.len()
            )));
        }
    }
    Ok(probs
        .iter()
        .enumerate()
        .map(|(j, &p)| weights.map_or(1.0, |w| w[j]) * domain_bce(p, domain))
        .sum())
}

/// `sum_j |mean(map) - p_j|`; zero for an empty proposal set.
pub fn consistency_loss(image_domain_map: &Array2<f64>, instance_probs: &[f64]) -> f64 {
    if instance_probs.is_empty() || image_domain_map.is_empty() {
        return 0.0;
    }
    let mean = image_domain_map.mean().expect("non-empty");
    instance_probs.iter().map(|p| (mean - p).abs()).sum()
}

/// Two 1x1 convolutions applied at every backbone activation.
#[derive(Clone, Copy, Debug)]
pub struct ImageDomainClassifier {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ImageDomainClassifier {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, in_ch: usize, hidden: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, "image_dc.conv1", in_ch, hidden, 1, 1, None),
            conv2: Conv2d::new(store, rng, "image_dc.conv2", hidden, 1, 1, 1, Some(0.01)),
        }
    }

    /// `[1, h, w]` target-domain scores.
    pub fn forward(&self, g: &mut Graph, features: Var) -> SigmoidOutput {
        let h = self.conv1.forward(g, features);
        let h = g.tape.relu(h);
        let logits = self.conv2.forward(g, h);
        SigmoidOutput::new(g, logits)
    }
}

/// Two-layer perceptron on flattened RoI features.
#[derive(Clone, Copy, Debug)]
pub struct InstanceDomainClassifier {
    fc1: Linear,
    fc2: Linear,
}

impl InstanceDomainClassifier {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, in_dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, "instance_dc.fc1", in_dim, hidden, None),
            fc2: Linear::new(store, rng, "instance_dc.fc2", hidden, 1, Some(0.01)),
        }
    }

    /// `[N, 1]` target-domain scores.
    pub fn forward(&self, g: &mut Graph, roi_features: Var) -> SigmoidOutput {
        let h = self.fc1.forward(g, roi_features);
        let h = g.tape.relu(h);
        let logits = self.fc2.forward(g, h);
        SigmoidOutput::new(g, logits)
    }
}

/// Graph form of [`image_align_loss`], differentiated through the logits.
pub fn image_align_term(g: &mut Graph, scores: SigmoidOutput, domain: Domain) -> Var {
    let n = g.tape.value(scores.logits).len();
    g.tape
        .bce_logits_sum(scores.logits, vec![domain.label(); n], vec![1.0; n])
}

/// Graph form of [`instance_align_loss`], differentiated through the logits.
pub fn instance_align_term(
    g: &mut Graph,
    scores: SigmoidOutput,
    domain: Domain,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let n = g.tape.value(scores.logits).len();
    let w = match weights {
        Some(w) if w.len() != n => {
            return Err(Error::contract(format!(
                "{} instance weights for {n} proposals",
                w.len()
            )))
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    Ok(g.tape.bce_logits_sum(scores.logits, vec![domain.label(); n], w))
}

/// Graph form of [`consistency_loss`].
pub fn consistency_term(g: &mut Graph, map: Var, instance_probs: Var) -> Var {
    g.tape.mean_abs_gap(map, instance_probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, IxDyn};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, LN_2};

    #[test]
    fn grl_examples() {
        let x = Tensor::from_shape_vec(IxDyn(&[2]), vec![1.0, 2.0]).unwrap();
        let id = GrlConfig::new(1.0).unwrap();
        assert_eq!(id.grl_forward(&x), x);
        assert_eq!(id.grl_backward(&x), -&x);
        let g = GrlConfig::new(0.1).unwrap().grl_backward(&x);
        assert_eq!(g, x.mapv(|v| v * -0.1));
        assert!(GrlConfig::new(-0.5).is_err());
    }

    #[test]
    fn image_loss_examples() {
        assert!((image_align_loss(&arr2(&[[0.5]]), Domain::Source) - LN_2).abs() < 1e-12);
        let m = Array2::from_elem((2, 2), 0.5);
        for d in [Domain::Source, Domain::Target] {
            assert!((image_align_loss(&m, d) - 4.0 * LN_2).abs() < 1e-12);
        }
        let confident = arr2(&[[1.0 - 1e-7]]);
        assert!(image_align_loss(&confident, Domain::Target) < 1e-6);
    }

    #[test]
    fn instance_loss_examples() {
        let l = instance_align_loss(&[0.5], Domain::Source, None).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
        let p = [0.3, 0.8, 0.55];
        let a = instance_align_loss(&p, Domain::Target, None).unwrap();
        let b = instance_align_loss(&p, Domain::Target, Some(&[1.0; 3])).unwrap();
        assert!((a - b).abs() < 1e-15);
        let w = instance_align_loss(&[0.5, 0.5], Domain::Target, Some(&[1.0, E])).unwrap();
        assert!((w - LN_2 * (1.0 + E)).abs() < 1e-12);
        assert!(matches!(
            instance_align_loss(&[0.5], Domain::Target, Some(&[1.0, 1.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn consistency_examples() {
        let m = Array2::from_elem((2, 2), 0.5);
        assert_eq!(consistency_loss(&m, &[0.5, 0.5]), 0.0);
        assert!((consistency_loss(&m, &[0.7]) - 0.2).abs() < 1e-12);
        assert!((consistency_loss(&m, &[0.4, 0.6]) - 0.2).abs() < 1e-12);
        assert_eq!(consistency_loss(&m, &[]), 0.0);
    }

    #[test]
    fn graph_terms_match_value_forms() {
        let map = Tensor::from_shape_vec(IxDyn(&[1, 2, 2]), vec![0.2, 0.9, 0.4, 0.6]).unwrap();
        let inst = Tensor::from_shape_vec(IxDyn(&[3, 1]), vec![0.1, 0.5, 0.7]).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::train(&store);
        let logit = |t: &Tensor| t.mapv(|p: f64| (p / (1.0 - p)).ln());
        let mz = g.tape.variable(logit(&map));
        let iz = g.tape.variable(logit(&inst));
        let mv = SigmoidOutput::new(&mut g, mz);
        let iv = SigmoidOutput::new(&mut g, iz);
        let li = image_align_term(&mut g, mv, Domain::Target);
        let ln = instance_align_term(&mut g, iv, Domain::Source, Some(&[1.0, 2.0, 1.5])).unwrap();
        let lc = consistency_term(&mut g, mv.probs, iv.probs);
        let m2 = map.clone().into_shape_with_order((2, 2)).unwrap();
        let p: Vec<f64> = inst.iter().cloned().collect();
        assert!((g.tape.scalar(li) - image_align_loss(&m2, Domain::Target)).abs() < 1e-12);
        // logit-level gradient equals the gradient through the sigmoid
        let grads = g.tape.backward(ln);
        let dz = grads.get(iz).unwrap();
        for (j, (&p, w)) in p.iter().zip([1.0, 2.0, 1.5]).enumerate() {
            assert!((dz[[j, 0]] - w * p).abs() < 1e-12);
        }
        let want = instance_align_loss(&p, Domain::Source, Some(&[1.0, 2.0, 1.5])).unwrap();
        assert!((g.tape.scalar(ln) - want).abs() < 1e-12);
        assert!((g.tape.scalar(lc) - consistency_loss(&m2, &p)).abs() < 1e-12);
    }

    #[test]
    fn domain_classifier_step_is_adversarial() {
        // one descent step on the classifier lowers the loss, one descent
        // step on the features through the reversal raises it
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let dc = ImageDomainClassifier::new(&mut store, &mut rng, 4, 8);
        let feats = Tensor::from_shape_fn(IxDyn(&[4, 3, 3]), |i| {
            ((i[0] * 7 + i[1] * 3 + i[2]) as f64 * 0.37).sin().abs()
        });
        let loss_at = |store: &ParamStore, f: &Tensor| {
            let mut g = Graph::inference(store);
            let x = g.tape.constant(f.clone());
            let p = dc.forward(&mut g, x);
            let l = image_align_term(&mut g, p, Domain::Source);
            g.tape.scalar(l)
        };
        let base = loss_at(&store, &feats);
        let mut g = Graph::train(&store);
        let x = g.tape.variable(feats.clone());
        let r = GrlConfig::default().apply(&mut g, x);
        let p = dc.forward(&mut g, r);
        let l = image_align_term(&mut g, p, Domain::Source);
        let grads = g.tape.backward(l);
        let pg = g.param_grads(&grads);
        let dx = grads.get(x).unwrap().clone();
        let mut stepped = store.clone();
        for (v, gr) in stepped.values_mut().iter_mut().zip(pg) {
            if let Some(gr) = gr {
                *v -= &(gr * 1e-3);
            }
        }
        assert!(loss_at(&stepped, &feats) < base);
        let moved = &feats - &(dx * 1e-3);
        assert!(loss_at(&store, &moved) > base);
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_domain_symmetric(
            probs in proptest::collection::vec(0.0..=1.0f64, 1..12),
            mean in 0.0..=1.0f64,
        ) {
            let n = probs.len();
            let map = Array2::from_shape_vec((1, n), probs.clone()).unwrap();
            let flipped: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
            let fmap = Array2::from_shape_vec((1, n), flipped.clone()).unwrap();
            let a = image_align_loss(&map, Domain::Source);
            let b = image_align_loss(&fmap, Domain::Target);
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
            let ia = instance_align_loss(&probs, Domain::Target, None).unwrap();
            let ib = instance_align_loss(&flipped, Domain::Source, None).unwrap();
            prop_assert!(ia >= 0.0);
            prop_assert!((ia - ib).abs() <= 1e-9 * (1.0 + ia));
            let c = consistency_loss(&Array2::from_elem((2, 2), mean), &probs);
            prop_assert!(c >= 0.0);
        }

        #[test]
        fn reversal_negates_and_scales_the_upstream_gradient(
            x in proptest::collection::vec(-3.0..3.0f64, 1..10),
            lambda in 0.0..3.0f64,
        ) {
            let n = x.len();
            let x = Tensor::from_shape_vec(IxDyn(&[n]), x).unwrap();
            let grad = |reverse: bool| {
                let mut t = crate::autograd::Tape::new();
                let v = t.variable(x.clone());
                let y = if reverse { t.grl(v, lambda) } else { v };
                let s = t.sigmoid(y);
                let l = t.sum(s);
                t.backward(l).get(v).unwrap().clone()
            };
            let plain = grad(false);
            prop_assert_eq!(grad(true), plain.mapv(|g| g * -lambda));
            let cfg = GrlConfig::new(lambda).unwrap();
            prop_assert_eq!(cfg.grl_forward(&x), x.clone());
            prop_assert_eq!(cfg.grl_backward(&plain), plain.mapv(|g| g * -lambda));
        }
    }
}
