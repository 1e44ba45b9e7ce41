use crate::autograd::Tensor;
use crate::nn::ParamStore;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- mu * v + (g + wd * w)`, `w <- w - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.values().iter().map(|v| Tensor::zeros(v.raw_dim())).collect(),
        }
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        for ((w, v), g) in params.values_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            let Some(g) = g else { continue };
            let (mu, wd) = (self.momentum, self.weight_decay);
            ndarray::Zip::from(&mut *v)
                .and(g)
                .and(&*w)
                .for_each(|v, &g, &w| *v = mu * *v + g + wd * w);
            ndarray::Zip::from(w).and(&*v).for_each(|w, &v| *w -= lr * v);
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn two_steps_by_hand() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_elem(IxDyn(&[1]), 1.0));
        store.add("unused", Tensor::from_elem(IxDyn(&[1]), 3.0));
        let mut opt = Sgd::new(&store, 0.9, 0.1);
        let g = vec![Some(Tensor::from_elem(IxDyn(&[1]), 0.5)), None];
        opt.step(&mut store, &g, 0.1);
        // v = 0.5 + 0.1 = 0.6, w = 1 - 0.06
        assert!((store.values()[0][[0]] - 0.94).abs() < 1e-12);
        opt.step(&mut store, &g, 0.1);
        // v = 0.54 + 0.5 + 0.094 = 1.134, w = 0.94 - 0.1134
        assert!((store.values()[0][[0]] - 0.8266).abs() < 1e-12);
        assert_eq!(store.values()[1][[0]], 3.0);
    }

    #[test]
    fn clipping_caps_joint_norm() {
        let mut g = vec![
            Some(Tensor::from_elem(IxDyn(&[1]), 3.0)),
            None,
            Some(Tensor::from_elem(IxDyn(&[1]), 4.0)),
        ];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].as_ref().unwrap()[[0]], 3.0);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[2].as_ref().unwrap()[[0]] - 0.8).abs() < 1e-15);
    }
}
