//! A small define-by-run reverse-mode autodiff tape over `f64` tensors.
//!
//! Every forward op records its output value, its parents, and a backward
//! closure. [`Tape::backward`] walks the tape in reverse and accumulates
//! gradients in a fixed order, so repeated runs are bit-identical.
//!
//! Image tensors are laid out channel-first (`[C, H, W]`), row batches as
//! `[N, D]`.

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use crate::numeric;

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Sparse linear sampling plan over the spatial grid of a `[C, H, W]` map:
/// output cell `k` is `sum_i weight_i * map[c, index_i]` for every channel.
#[derive(Clone, Debug, Default)]
pub struct SpatialPlan {
    pub out_shape: Vec<usize>,
    pub taps: Vec<Vec<(usize, f64)>>,
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length mismatch")
}

fn as_matrix(t: &Tensor, rows: usize, cols: usize) -> Array2<f64> {
    let data = t.as_standard_layout().iter().cloned().collect();
    Array2::from_shape_vec((rows, cols), data).expect("matrix view")
}

fn to_dyn(m: Array2<f64>, shape: &[usize]) -> Tensor {
    let (data, _) = m.into_raw_vec_and_offset();
    tensor(shape, data)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; gradients are not tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.iter().next().copied().unwrap_or(0.0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &parent_values, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // ---------------------------------------------------------------------
    // elementwise and reductions
    // ---------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sum_vars(&mut self, vars: &[Var]) -> Var {
        let mut it = vars.iter();
        let first = *it.next().expect("sum of no vars");
        it.fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, &[a], Box::new(move |g, _, _| vec![Some(g * s)]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = tensor(&[1], vec![self.value(a).sum()]);
        self.push(
            out,
            &[a],
            Box::new(|g, p, _| vec![Some(Tensor::from_elem(p[0].raw_dim(), g[[0]]))]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            out,
            &[a],
            Box::new(|g, p, _| {
                let mut dx = g.clone();
                dx.zip_mut_with(p[0], |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(numeric::sigmoid);
        let y = out.clone();
        self.push(
            out,
            &[a],
            Box::new(move |g, _, _| {
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &s| *d *= s * (1.0 - s));
                vec![Some(dx)]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = self.value(a);
        let in_shape = src.shape().to_vec();
        let out = tensor(shape, src.as_standard_layout().iter().cloned().collect());
        self.push(
            out,
            &[a],
            Box::new(move |g, _, _| {
                vec![Some(tensor(
                    &in_shape,
                    g.as_standard_layout().iter().cloned().collect(),
                ))]
            }),
        )
    }

    /// Gradient reversal: identity forward, `-lambda * g` backward.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Var {
        let out = self.value(a).clone();
        self.push(out, &[a], Box::new(move |g, _, _| vec![Some(g * -lambda)]))
    }

    /// Gradient reversal with a per-row factor: row `j` of the incoming
    /// gradient is scaled by `-lambda * weights[j]`.
    pub fn grl_rows(&mut self, a: Var, lambda: f64, weights: Vec<f64>) -> Var {
        let out = self.value(a).clone();
        assert_eq!(out.shape()[0], weights.len(), "row weight count");
        self.push(
            out,
            &[a],
            Box::new(move |g, _, _| {
                let mut dx = g.clone();
                for (j, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    let s = -lambda * weights[j];
                    row.mapv_inplace(|v| v * s);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Identity forward; severs the gradient.
    pub fn detach(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.constant(out)
    }

    /// Selects entries of the flattened tensor.
    pub fn gather_flat(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let in_shape = src.shape().to_vec();
        let flat: Vec<f64> = src.as_standard_layout().iter().cloned().collect();
        let out = tensor(&[idx.len()], idx.iter().map(|&i| flat[i]).collect());
        let idx = idx.to_vec();
        self.push(
            out,
            &[a],
            Box::new(move |g, _, _| {
                let n: usize = in_shape.iter().product();
                let mut d = vec![0.0; n];
                for (k, &i) in idx.iter().enumerate() {
                    d[i] += g[[k]];
                }
                vec![Some(tensor(&in_shape, d))]
            }),
        )
    }

    /// Selects rows (first axis).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let out = src.select(Axis(0), rows);
        let in_dim = src.raw_dim();
        let rows = rows.to_vec();
        self.push(
            out,
            &[a],
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(in_dim.clone());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.index_axis_mut(Axis(0), r);
                    dst += &g.index_axis(Axis(0), k);
                }
                vec![Some(d)]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // layers
    // ---------------------------------------------------------------------

    /// 2-D convolution of a `[C, H, W]` map with `[O, C, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (o, k) = (wv.shape()[0], wv.shape()[2]);
        assert_eq!(wv.shape()[1], c, "conv channel mismatch");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(xv, &geom);
        let w2 = as_matrix(wv, o, c * k * k);
        let mut out = w2.dot(&cols);
        let bv = self.value(b);
        for (mut row, &bias) in out.axis_iter_mut(Axis(0)).zip(bv.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let out = to_dyn(out, &[o, ho, wo]);
        self.push(
            out,
            &[x, w, b],
            Box::new(move |g, p, needs| {
                let g2 = as_matrix(g, o, ho * wo);
                let dx = if needs[0] {
                    let w2 = as_matrix(p[1], o, c * k * k);
                    let dcols = w2.t().dot(&g2);
                    Some(col2im(&dcols, &geom))
                } else {
                    None
                };
                let dw = needs[1].then(|| to_dyn(g2.dot(&cols.t()), &[o, c, k, k]));
                let db = needs[2].then(|| g2.sum_axis(Axis(1)).into_dyn());
                vec![dx, dw, db]
            }),
        )
    }

    /// `x [N, D] * w[M, D]^T + b[M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let m = wv.shape()[0];
        assert_eq!(wv.shape()[1], d, "linear input width mismatch");
        let xm = as_matrix(xv, n, d);
        let wm = as_matrix(wv, m, d);
        let mut out = xm.dot(&wm.t());
        out += &as_matrix(self.value(b), 1, m);
        let out = to_dyn(out, &[n, m]);
        self.push(
            out,
            &[x, w, b],
            Box::new(move |g, p, needs| {
                let gm = as_matrix(g, n, m);
                let dx = needs[0].then(|| to_dyn(gm.dot(&as_matrix(p[1], m, d)), &[n, d]));
                let dw = needs[1].then(|| to_dyn(gm.t().dot(&as_matrix(p[0], n, d)), &[m, d]));
                let db = needs[2].then(|| gm.sum_axis(Axis(0)).into_dyn());
                vec![dx, dw, db]
            }),
        )
    }

    /// Global average pool `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let hw = (h * w) as f64;
        let out: Vec<f64> = xv.axis_iter(Axis(0)).map(|plane| plane.sum() / hw).collect();
        self.push(
            tensor(&[c], out),
            &[x],
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(IxDyn(&[c, h, w]));
                for (ci, mut plane) in d.axis_iter_mut(Axis(0)).enumerate() {
                    plane.fill(g[[ci]] / hw);
                }
                vec![Some(d)]
            }),
        )
    }

    /// Linear spatial resampling of a `[C, H, W]` map according to `plan`.
    /// Output shape is `[C] ++ plan.out_shape`, flattened cell index matches
    /// `plan.taps`.
    pub fn spatial_sample(&mut self, x: Var, plan: SpatialPlan) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let hw = h * w;
        let src = xv.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let cells = plan.taps.len();
        let mut out = vec![0.0; c * cells];
        for ch in 0..c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            let dst = &mut out[ch * cells..(ch + 1) * cells];
            for (cell, taps) in plan.taps.iter().enumerate() {
                dst[cell] = taps.iter().map(|&(i, wgt)| wgt * plane[i]).sum();
            }
        }
        let mut shape = vec![c];
        shape.extend_from_slice(&plan.out_shape);
        self.push(
            tensor(&shape, out),
            &[x],
            Box::new(move |g, _, _| {
                let gs = g.as_standard_layout();
                let gs = gs.as_slice().expect("standard layout");
                let mut d = vec![0.0; c * hw];
                for ch in 0..c {
                    let plane = &mut d[ch * hw..(ch + 1) * hw];
                    let gsrc = &gs[ch * cells..(ch + 1) * cells];
                    for (cell, taps) in plan.taps.iter().enumerate() {
                        let gv = gsrc[cell];
                        for &(i, wgt) in taps {
                            plane[i] += wgt * gv;
                        }
                    }
                }
                vec![Some(tensor(&[c, h, w], d))]
            }),
        )
    }

    /// Swaps the first two axes of a tensor of rank >= 2.
    pub fn swap_leading(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.swap_axes(0, 1);
        let out = v.as_standard_layout().into_owned();
        self.push(
            out,
            &[a],
            Box::new(|g, _, _| {
                let mut d = g.clone();
                d.swap_axes(0, 1);
                vec![Some(d.as_standard_layout().into_owned())]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // fused losses
    // ---------------------------------------------------------------------

    /// `sum_i w_i * bce(p_i, t_i)` over the flattened probabilities.
    pub fn bce_sum(&mut self, probs: Var, targets: Vec<f64>, weights: Vec<f64>) -> Var {
        let pv = self.value(probs);
        let p: Vec<f64> = pv.as_standard_layout().iter().cloned().collect();
        assert_eq!(p.len(), targets.len(), "bce target length");
        assert_eq!(p.len(), weights.len(), "bce weight length");
        let loss = numeric::weighted_bce_sum(&p, &targets, &weights);
        let shape = pv.shape().to_vec();
        self.push(
            tensor(&[1], vec![loss]),
            &[probs],
            Box::new(move |g, _, _| {
                let s = g[[0]];
                let d = p
                    .iter()
                    .zip(&targets)
                    .zip(&weights)
                    .map(|((&pi, &ti), &wi)| s * wi * numeric::bce_grad(pi, ti))
                    .collect();
                vec![Some(tensor(&shape, d))]
            }),
        )
    }

    /// Weighted BCE of `sigmoid(logits)` with clamped probabilities, as in
    /// [`Tape::bce_sum`]. The gradient with respect to each logit is
    /// `w (sigmoid(z) - t)`, also where the clamp is active.
    pub fn bce_logits_sum(&mut self, logits: Var, targets: Vec<f64>, weights: Vec<f64>) -> Var {
        let zv = self.value(logits);
        let p: Vec<f64> = zv.as_standard_layout().iter().map(|&z| numeric::sigmoid(z)).collect();
        assert_eq!(p.len(), targets.len(), "bce target length");
        assert_eq!(p.len(), weights.len(), "bce weight length");
        let loss = numeric::weighted_bce_sum(&p, &targets, &weights);
        let shape = zv.shape().to_vec();
        self.push(
            tensor(&[1], vec![loss]),
            &[logits],
            Box::new(move |g, _, _| {
                let s = g[[0]];
                let d = p
                    .iter()
                    .zip(&targets)
                    .zip(&weights)
                    .map(|((&pi, &ti), &wi)| s * wi * (pi - ti))
                    .collect();
                vec![Some(tensor(&shape, d))]
            }),
        )
    }

    /// Summed focal loss over flattened probabilities with a shared target.
    pub fn focal_sum(&mut self, probs: Var, target: f64, gamma: f64) -> Var {
        let pv = self.value(probs);
        let p: Vec<f64> = pv.as_standard_layout().iter().cloned().collect();
        let loss: f64 = p.iter().map(|&pi| numeric::focal_bce(pi, target, gamma)).sum();
        let shape = pv.shape().to_vec();
        self.push(
            tensor(&[1], vec![loss]),
            &[probs],
            Box::new(move |g, _, _| {
                let s = g[[0]];
                let d = p
                    .iter()
                    .map(|&pi| s * numeric::focal_bce_grad(pi, target, gamma))
                    .collect();
                vec![Some(tensor(&shape, d))]
            }),
        )
    }

    /// `sum_i (x_i - target)^2`.
    pub fn squared_error_sum(&mut self, x: Var, target: f64) -> Var {
        let xv = self.value(x);
        let loss = xv.iter().map(|&v| (v - target) * (v - target)).sum();
        self.push(
            tensor(&[1], vec![loss]),
            &[x],
            Box::new(move |g, p, _| {
                let s = g[[0]];
                vec![Some(p[0].mapv(|v| 2.0 * s * (v - target)))]
            }),
        )
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(n, labels.len(), "label count");
        let lm = as_matrix(lv, n, k);
        let probs: Vec<Vec<f64>> = lm
            .rows()
            .into_iter()
            .map(|r| numeric::softmax(r.as_slice().unwrap()))
            .collect();
        let loss = probs
            .iter()
            .zip(labels)
            .map(|(p, &l)| numeric::cross_entropy(p, l))
            .sum::<f64>()
            / n.max(1) as f64;
        let labels = labels.to_vec();
        self.push(
            tensor(&[1], vec![loss]),
            &[logits],
            Box::new(move |g, _, _| {
                let s = g[[0]] / n.max(1) as f64;
                let mut d = Vec::with_capacity(n * k);
                for (p, &l) in probs.iter().zip(&labels) {
                    for (j, &pj) in p.iter().enumerate() {
                        let y = if j == l { 1.0 } else { 0.0 };
                        d.push(s * (pj - y));
                    }
                }
                vec![Some(tensor(&[n, k], d))]
            }),
        )
    }

    /// `sum_i w_i * smooth_l1(x_i - t_i) / normalizer` over flattened entries.
    pub fn smooth_l1_sum(
        &mut self,
        pred: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
        normalizer: f64,
    ) -> Var {
        let pv = self.value(pred);
        let x: Vec<f64> = pv.as_standard_layout().iter().cloned().collect();
        assert_eq!(x.len(), targets.len());
        assert_eq!(x.len(), weights.len());
        let loss = x
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&xi, &ti), &wi)| wi * numeric::smooth_l1(xi - ti, beta))
            .sum::<f64>()
            / normalizer;
        let shape = pv.shape().to_vec();
        self.push(
            tensor(&[1], vec![loss]),
            &[pred],
            Box::new(move |g, _, _| {
                let s = g[[0]] / normalizer;
                let d = x
                    .iter()
                    .zip(&targets)
                    .zip(&weights)
                    .map(|((&xi, &ti), &wi)| s * wi * numeric::smooth_l1_grad(xi - ti, beta))
                    .collect();
                vec![Some(tensor(&shape, d))]
            }),
        )
    }

    /// `sum_j |mean(map) - p_j|` between an image-level probability map and
    /// per-instance probabilities.
    pub fn mean_abs_gap(&mut self, map: Var, inst: Var) -> Var {
        let mv = self.value(map);
        let iv = self.value(inst);
        let m_shape = mv.shape().to_vec();
        let i_shape = iv.shape().to_vec();
        let count = mv.len();
        let mean = mv.sum() / count as f64;
        let p: Vec<f64> = iv.iter().cloned().collect();
        let loss = p.iter().map(|&pj| (mean - pj).abs()).sum();
        self.push(
            tensor(&[1], vec![loss]),
            &[map, inst],
            Box::new(move |g, _, _| {
                let s = g[[0]];
                let signs: Vec<f64> = p
                    .iter()
                    .map(|&pj| {
                        let d = mean - pj;
                        if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let dm = s * signs.iter().sum::<f64>() / count as f64;
                let dmap = Tensor::from_elem(IxDyn(&m_shape), dm);
                let dinst = tensor(&i_shape, signs.iter().map(|v| -s * v).collect());
                vec![Some(dmap), Some(dinst)]
            }),
        )
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &Tensor, g: &ConvGeom) -> Array2<f64> {
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let rows = g.c * g.k * g.k;
    let cols = g.ho * g.wo;
    let mut out = vec![0.0; rows * cols];
    for c in 0..g.c {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), out).expect("im2col shape")
}

fn col2im(dcols: &Array2<f64>, g: &ConvGeom) -> Tensor {
    let cols = g.ho * g.wo;
    let dc = dcols.as_standard_layout();
    let src = dc.as_slice().expect("standard layout");
    let mut out = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let s = &src[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += s[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    tensor(&[g.c, g.h, g.w], out)
}

/// Central finite-difference gradient of a scalar function of one tensor.
/// Test helper; lives here so integration tests and examples can share it.
pub fn finite_difference<F>(x: &Tensor, step: f64, mut f: F) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let shape = x.shape().to_vec();
    let base: Vec<f64> = x.as_standard_layout().iter().cloned().collect();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        let up = f(&tensor(&shape, probe.clone()));
        probe[i] = base[i] - step;
        let down = f(&tensor(&shape, probe.clone()));
        probe[i] = base[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    tensor(&shape, grad)
}

/// Max elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
