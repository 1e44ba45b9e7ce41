//! Injection points for externally defined alignment terms (`L_global`,
//! `L_local`) and a default pair.
//!
//! The defaults are simple stand-ins with the expected shape: a focal-loss
//! domain classifier on pooled last-layer features and a per-location
//! least-squares domain classifier on the stride-4 layer. They are not a
//! reimplementation of any particular published method.

use rand::Rng;

use crate::autograd::Var;
use crate::dataset::Domain;
use crate::detector::BackboneOut;
use crate::nn::{Conv2d, Graph, Linear, ParamStore};

/// A scalar domain-alignment loss of one image's backbone activations.
/// Implementations insert their own gradient reversal.
pub trait AlignmentTerm {
    fn name(&self) -> &'static str;
    fn loss(&self, g: &mut Graph, features: &BackboneOut, domain: Domain) -> Var;
}

pub const FOCAL_GAMMA: f64 = 5.0;

#[derive(Clone, Copy, Debug)]
pub struct FocalGlobalAlignment {
    fc1: Linear,
    fc2: Linear,
}

impl FocalGlobalAlignment {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, in_ch: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, "sw_global.fc1", in_ch, 16, None),
            fc2: Linear::new(store, rng, "sw_global.fc2", 16, 1, Some(0.01)),
        }
    }
}

impl AlignmentTerm for FocalGlobalAlignment {
    fn name(&self) -> &'static str {
        "l_global"
    }

    fn loss(&self, g: &mut Graph, features: &BackboneOut, domain: Domain) -> Var {
        let x = g.tape.grl(features.features, 1.0);
        let pooled = g.tape.global_avg_pool(x);
        let d = g.tape.value(pooled).len();
        let pooled = g.tape.reshape(pooled, &[1, d]);
        let h = self.fc1.forward(g, pooled);
        let h = g.tape.relu(h);
        let z = self.fc2.forward(g, h);
        let p = g.tape.sigmoid(z);
        g.tape.focal_sum(p, domain.label(), FOCAL_GAMMA)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LeastSquaresLocalAlignment {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl LeastSquaresLocalAlignment {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, in_ch: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, "sw_local.conv1", in_ch, 16, 1, 1, None),
            conv2: Conv2d::new(store, rng, "sw_local.conv2", 16, 1, 1, 1, Some(0.01)),
        }
    }
}

impl AlignmentTerm for LeastSquaresLocalAlignment {
    fn name(&self) -> &'static str {
        "l_local"
    }

    /// Mean over locations of `(p - D)^2`.
    fn loss(&self, g: &mut Graph, features: &BackboneOut, domain: Domain) -> Var {
        let x = g.tape.grl(features.mid, 1.0);
        let h = self.conv1.forward(g, x);
        let h = g.tape.relu(h);
        let z = self.conv2.forward(g, h);
        let p = g.tape.sigmoid(z);
        let n = g.tape.value(p).len() as f64;
        let s = g.tape.squared_error_sum(p, domain.label());
        g.tape.scale(s, 1.0 / n)
    }
}
