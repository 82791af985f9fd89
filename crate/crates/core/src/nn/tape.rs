//! Reverse-mode automatic differentiation over a per-sample tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; [`Tape::backward`]
//! returns their gradients.

use crate::crf::{DenseCrf, MeanFieldTrace, UnaryField};
use crate::nn::kernels::{self, Window};
use crate::nn::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Probabilities are clamped to `[CE_FLOOR, 1 - CE_FLOOR]` inside
/// cross-entropy.
pub const CE_FLOOR: f64 = 1e-7;

/// Smoothing added to both numerator and denominator of the soft dice.
pub const DICE_EPS: f64 = 1e-6;

enum Op {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, win: Window },
    Depthwise { x: Var, w: Var, b: Option<Var>, win: Window },
    Relu(Var),
    Add(Vec<Var>),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Tensor),
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, win: Window },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Linear { x: Var, w: Var, b: Var },
    Softmax(Var),
    UpsampleNearest(Var, usize),
    Bilinear(Var),
    Crf { unary: Var, weights: Var, trace: Box<MeanFieldTrace> },
    CrossEntropy { probs: Var, label: usize },
    SoftDice { probs: Var, target: Vec<f64>, num: f64, den: f64 },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without a value"),
        }
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, win: Window) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &win);
        self.push(out, Op::Conv { x, w, b, win })
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, win: Window) -> Var {
        let out =
            kernels::depthwise_conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &win);
        self.push(out, Op::Depthwise { x, w, b, win })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.add_all(&[a, b])
    }

    pub fn add_all(&mut self, xs: &[Var]) -> Var {
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            assert_eq!(out.shape(), self.value(x).shape(), "add of mismatched shapes");
            out.add_assign(self.value(x));
        }
        self.push(out, Op::Add(xs.to_vec()))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Tensor) -> Var {
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        self.push(out, Op::MulConst(x, mask))
    }

    pub fn max_pool(&mut self, x: Var, win: Window) -> Var {
        let (out, argmax) = kernels::max_pool(self.value(x), &win);
        self.push(out, Op::MaxPool { x, argmax })
    }

    pub fn avg_pool(&mut self, x: Var, win: Window) -> Var {
        let out = kernels::avg_pool(self.value(x), &win);
        self.push(out, Op::AvgPool { x, win })
    }

    /// `[C, H, W]` to `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let n = (h * w) as f64;
        let out = (0..c).map(|ci| t.channel(ci).iter().sum::<f64>() / n).collect();
        self.push(Tensor::from_vec(out), Op::GlobalAvgPool(x))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let first = self.value(xs[0]).shape().to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            assert_eq!(&t.shape()[1..], &first[1..], "concat of mismatched shapes");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = lead;
        self.push(Tensor::new(shape, data).unwrap(), Op::Concat(xs.to_vec()))
    }

    /// `w x + b` with `w: [out, in]`; `x` is flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (out_dim, in_dim) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(xt.numel(), in_dim, "linear input width");
        let out = (0..out_dim)
            .map(|o| {
                bt.data()[o]
                    + wt.data()[o * in_dim..(o + 1) * in_dim]
                        .iter()
                        .zip(xt.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        self.push(Tensor::from_vec(out), Op::Linear { x, w, b })
    }

    /// Softmax over the leading axis (per pixel for feature maps).
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = kernels::softmax_channels(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let out = kernels::upsample_nearest(self.value(x), factor);
        self.push(out, Op::UpsampleNearest(x, factor))
    }

    pub fn bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let out = kernels::bilinear(self.value(x), out_h, out_w);
        self.push(out, Op::Bilinear(x))
    }

    /// Mean-field CRF over a `[L, H, W]` unary map; `weights` holds the two
    /// kernel weights.
    pub fn crf(&mut self, unary: Var, weights: Var, crf: &DenseCrf) -> Var {
        let u = self.value(unary);
        let shape = u.shape().to_vec();
        let field = UnaryField {
            labels: shape[0],
            scores: u.data().to_vec(),
        };
        let w = self.value(weights).data();
        let (marg, trace) = crf
            .infer_traced(&field, [w[0], w[1]])
            .expect("CRF lattice does not match the unary map");
        let out = Tensor::new(shape, marg.probs).unwrap();
        self.push(
            out,
            Op::Crf {
                unary,
                weights,
                trace: Box::new(trace),
            },
        )
    }

    /// `-ln p[label]` of a probability vector, with clamping.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Var {
        let p = self.value(probs).data()[label].clamp(CE_FLOOR, 1.0 - CE_FLOOR);
        self.push(Tensor::scalar(-p.ln()), Op::CrossEntropy { probs, label })
    }

    /// Soft dice between the foreground channel of `[2, H, W]`
    /// probabilities and a binary target.
    pub fn soft_dice(&mut self, probs: Var, target: &[f64]) -> Var {
        let p = self.value(probs).channel(1);
        assert_eq!(p.len(), target.len(), "dice of mismatched shapes");
        let inter: f64 = p.iter().zip(target).map(|(a, b)| a * b).sum();
        let num = 2.0 * inter + DICE_EPS;
        let den = target.iter().sum::<f64>() + p.iter().sum::<f64>() + DICE_EPS;
        self.push(
            Tensor::scalar(num / den),
            Op::SoftDice {
                probs,
                target: target.to_vec(),
                num,
                den,
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::zeros_like(self.params);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::Conv { x, w, b, win } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), win, &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Depthwise { x, w, b, win } => {
                    let (dx, dw, db) =
                        kernels::depthwise_conv2d_backward(self.value(*x), self.value(*w), win, &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Add(xs) => {
                    for &x in xs {
                        acc(&mut grads, x, g.clone());
                    }
                }
                Op::Scale(x, f) => {
                    let mut dx = g;
                    dx.scale_assign(*f);
                    acc(&mut grads, *x, dx);
                }
                Op::AddConst(x) => acc(&mut grads, *x, g),
                Op::MulConst(x, mask) => {
                    let mut dx = g;
                    for (d, m) in dx.data_mut().iter_mut().zip(mask.data()) {
                        *d *= m;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let shape = self.value(*x).chw();
                    acc(&mut grads, *x, kernels::max_pool_backward(shape, argmax, &g));
                }
                Op::AvgPool { x, win } => {
                    let shape = self.value(*x).chw();
                    acc(&mut grads, *x, kernels::avg_pool_backward(shape, win, &g));
                }
                Op::GlobalAvgPool(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let n = (h * w) as f64;
                    let mut dx = Vec::with_capacity(c * h * w);
                    for ci in 0..c {
                        dx.extend(std::iter::repeat(g.data()[ci] / n).take(h * w));
                    }
                    acc(&mut grads, *x, Tensor::new(vec![c, h, w], dx).unwrap());
                }
                Op::Concat(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let shape = self.value(x).shape().to_vec();
                        let len: usize = shape.iter().product();
                        let part = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        acc(&mut grads, x, Tensor::new(shape, part).unwrap());
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (out_dim, in_dim) = (wt.shape()[0], wt.shape()[1]);
                    let mut dx = vec![0.0; in_dim];
                    let mut dw = vec![0.0; out_dim * in_dim];
                    for o in 0..out_dim {
                        let go = g.data()[o];
                        let row = &wt.data()[o * in_dim..(o + 1) * in_dim];
                        for i in 0..in_dim {
                            dx[i] += go * row[i];
                            dw[o * in_dim + i] = go * xt.data()[i];
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(xt.shape().to_vec(), dx).unwrap());
                    acc(&mut grads, *w, Tensor::new(vec![out_dim, in_dim], dw).unwrap());
                    acc(&mut grads, *b, g);
                }
                Op::Softmax(x) => {
                    let probs = self.nodes[idx].value.as_ref().unwrap();
                    acc(&mut grads, *x, kernels::softmax_channels_backward(probs, &g));
                }
                Op::UpsampleNearest(x, f) => {
                    let shape = self.value(*x).chw();
                    acc(&mut grads, *x, kernels::upsample_nearest_backward(shape, *f, &g));
                }
                Op::Bilinear(x) => {
                    let shape = self.value(*x).chw();
                    acc(&mut grads, *x, kernels::bilinear_backward(shape, &g));
                }
                Op::Crf { unary, weights, trace } => {
                    let (du, dw) = trace.backward(g.data());
                    let shape = self.value(*unary).shape().to_vec();
                    acc(&mut grads, *unary, Tensor::new(shape, du).unwrap());
                    acc(&mut grads, *weights, Tensor::from_vec(dw.to_vec()));
                }
                Op::CrossEntropy { probs, label } => {
                    let pv = self.value(*probs);
                    let mut dp = Tensor::zeros(pv.shape());
                    let p = pv.data()[*label];
                    if p > CE_FLOOR && p < 1.0 - CE_FLOOR {
                        dp.data_mut()[*label] = -g.item() / p;
                    }
                    acc(&mut grads, *probs, dp);
                }
                Op::SoftDice { probs, target, num, den } => {
                    let pv = self.value(*probs);
                    let (_, h, w) = pv.chw();
                    let n = h * w;
                    let mut dp = Tensor::zeros(pv.shape());
                    let gv = g.item();
                    for i in 0..n {
                        dp.data_mut()[n + i] = gv * (2.0 * target[i] * den - num) / (den * den);
                    }
                    acc(&mut grads, *probs, dp);
                }
            }
        }
        out
    }
}
