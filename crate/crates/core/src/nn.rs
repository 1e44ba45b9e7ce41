//! Parameter storage and the two layer shapes every head is built from.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// A tape plus lazily bound parameters.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Graph<'s> {
    /// Parameters are differentiable leaves.
    pub fn train(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Parameters are constants; no backward closures are recorded unless
    /// the caller adds its own variables.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::train(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients, `None` for parameters the loss never touched.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

/// Logits of a sigmoid output layer together with the probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SigmoidOutput {
    pub logits: Var,
    pub probs: Var,
}

impl SigmoidOutput {
    pub fn new(g: &mut Graph, logits: Var) -> Self {
        let probs = g.tape.sigmoid(logits);
        Self { logits, probs }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        std: Option<f64>,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let std = std.unwrap_or_else(|| (2.0 / fan_in as f64).sqrt());
        let weight = store.add(
            format!("{name}.weight"),
            normal(&[out_ch, in_ch, kernel, kernel], std, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[out_ch])));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: Option<f64>,
    ) -> Self {
        let std = std.unwrap_or_else(|| (2.0 / in_dim as f64).sqrt());
        let weight = store.add(format!("{name}.weight"), normal(&[out_dim, in_dim], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[out_dim])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.tape.linear(x, w, b)
    }
}

fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}
