//! Eager tape for the small set of differentiable ops the codec needs.
//!
//! A `Graph` records every op as it executes; `backward` replays the tape in
//! reverse. The op vocabulary is deliberately closed: convolutions, batch
//! norm, the quantizer surrogate, and the handful of elementwise/reduction
//! ops the MS-SSIM loss decomposes into. Accumulation order inside every op
//! is fixed, so forward values are bit-identical across runs; the entropy
//! coder relies on this when the same network runs on encoder and decoder.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    Conv2d { stride: usize, pad: usize },
    ConvDepthwise { pad: usize },
    LeakyRelu { slope: T },
    BnTrain { eps: T },
    BnEval { eps: T, mean: Vec<T>, var: Vec<T> },
    UpsampleNearest { factor: usize },
    AvgPool { factor: usize },
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(T),
    MulScalar(T),
    Clamp { lo: T, hi: T },
    /// Quantizer with the soft-round backward rule; forward is either
    /// integer rounding or the smooth surrogate, backward is identical.
    RoundSte { alpha: T },
    MeanAll,
    MeanSpatial,
    PowScalar(T),
    ConcatChannels,
    /// Per-position N-way classification loss over masked slots.
    MaskedCeLoss { n_classes: usize },
}

#[derive(Debug, Clone)]
enum Aux<T: Scalar> {
    None,
    Bn { mean: Vec<T>, inv_std: Vec<T> },
    Ce { probs: Vec<T>, targets: Vec<u16>, weights: Vec<T>, weight_sum: T },
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    aux: Aux<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by `Graph::backward`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Batch statistics captured by a `batchnorm_train` node: per-channel
    /// (mean, biased variance). Used to maintain running statistics.
    pub fn bn_batch_stats(&self, id: NodeId) -> (Vec<T>, Vec<T>) {
        match &self.nodes[id.0].aux {
            Aux::Bn { mean, inv_std } => {
                let eps = match self.nodes[id.0].op {
                    Op::BnTrain { eps } => eps,
                    _ => unreachable!(),
                };
                let var = inv_std
                    .iter()
                    .map(|&s| T::one() / (s * s) - eps)
                    .collect();
                (mean.clone(), var)
            }
            _ => panic!("bn_batch_stats on non-batchnorm node"),
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>, aux: Aux<T>) -> NodeId {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Input => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, vec![], value, Aux::None)
    }

    /// Input whose gradient is tracked (for checks of d loss / d input).
    pub fn input_tracked(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Input, vec![], value, Aux::None);
        self.nodes[id.0].needs_grad = true;
        id
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let value = store.value(id).clone();
        self.push(Op::Param(id), vec![], value, Aux::None)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert!(stride >= 1, "conv2d stride must be >= 1");
        assert_eq!(
            xv.c, wv.c,
            "conv2d: kernel input channels {} != input channels {}",
            wv.c, xv.c
        );
        let out = conv2d_forward(xv, wv, b.map(|b| &self.nodes[b.0].value), stride, pad);
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        self.push(Op::Conv2d { stride, pad }, inputs, out, Aux::None)
    }

    /// Per-channel convolution with a fixed (c,1,kh,kw) kernel; used for the
    /// Gaussian windows inside MS-SSIM.
    pub fn conv_depthwise(&mut self, x: NodeId, k: NodeId, pad: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[k.0].value;
        assert_eq!(kv.n, xv.c, "depthwise kernel count must match channels");
        assert_eq!(kv.c, 1);
        let out = conv_depthwise_forward(xv, kv, pad);
        self.push(Op::ConvDepthwise { pad }, vec![x, k], out, Aux::None)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data = xv
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let out = Tensor { data, ..xv.clone() };
        self.push(Op::LeakyRelu { slope }, vec![x], out, Aux::None)
    }

    /// Batch normalization over (n, h, w) per channel with batch statistics.
    /// Requires n*h*w >= 2 per channel.
    pub fn batchnorm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let m = xv.n * xv.h * xv.w;
        assert!(m >= 2, "batchnorm train mode needs at least 2 values per channel");
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        assert_eq!(gv.len(), xv.c);
        assert_eq!(bv.len(), xv.c);

        let mut mean = vec![T::zero(); xv.c];
        let mut var = vec![T::zero(); xv.c];
        let count = T::c(m as f64);
        for c in 0..xv.c {
            let mut s = T::zero();
            for n in 0..xv.n {
                for y in 0..xv.h {
                    for x_ in 0..xv.w {
                        s = s + xv.at(n, c, y, x_);
                    }
                }
            }
            let mu = s / count;
            let mut v = T::zero();
            for n in 0..xv.n {
                for y in 0..xv.h {
                    for x_ in 0..xv.w {
                        let d = xv.at(n, c, y, x_) - mu;
                        v = v + d * d;
                    }
                }
            }
            mean[c] = mu;
            var[c] = v / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut out = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
        for n in 0..xv.n {
            for c in 0..xv.c {
                for y in 0..xv.h {
                    for x_ in 0..xv.w {
                        let xhat = (xv.at(n, c, y, x_) - mean[c]) * inv_std[c];
                        out.set(n, c, y, x_, gv.data[c] * xhat + bv.data[c]);
                    }
                }
            }
        }
        self.push(
            Op::BnTrain { eps },
            vec![x, gamma, beta],
            out,
            Aux::Bn { mean, inv_std },
        )
    }

    /// Batch normalization with frozen statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    ) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(mean.len(), xv.c);
        assert_eq!(var.len(), xv.c);
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
        for n in 0..xv.n {
            for c in 0..xv.c {
                for y in 0..xv.h {
                    for x_ in 0..xv.w {
                        let xhat = (xv.at(n, c, y, x_) - mean[c]) * inv_std[c];
                        out.set(n, c, y, x_, gv.data[c] * xhat + bv.data[c]);
                    }
                }
            }
        }
        self.push(Op::BnEval { eps, mean, var }, vec![x, gamma, beta], out, Aux::None)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor::zeros(xv.n, xv.c, xv.h * factor, xv.w * factor);
        for n in 0..xv.n {
            for c in 0..xv.c {
                for y in 0..out.h {
                    for x_ in 0..out.w {
                        out.set(n, c, y, x_, xv.at(n, c, y / factor, x_ / factor));
                    }
                }
            }
        }
        self.push(Op::UpsampleNearest { factor }, vec![x], out, Aux::None)
    }

    /// Mean pooling over factor x factor blocks; trailing rows/columns that
    /// do not fill a block are dropped.
    pub fn avg_pool(&mut self, x: NodeId, factor: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let oh = xv.h / factor;
        let ow = xv.w / factor;
        let norm = T::c((factor * factor) as f64);
        let mut out = Tensor::zeros(xv.n, xv.c, oh, ow);
        for n in 0..xv.n {
            for c in 0..xv.c {
                for y in 0..oh {
                    for x_ in 0..ow {
                        let mut s = T::zero();
                        for dy in 0..factor {
                            for dx in 0..factor {
                                s = s + xv.at(n, c, y * factor + dy, x_ * factor + dx);
                            }
                        }
                        out.set(n, c, y, x_, s / norm);
                    }
                }
            }
        }
        self.push(Op::AvgPool { factor }, vec![x], out, Aux::None)
    }

    fn binary(&mut self, op: Op<T>, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "elementwise op shape mismatch");
        let data = av
            .data
            .iter()
            .zip(bv.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor { data, ..av.clone() };
        self.push(op, vec![a, b], out, Aux::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op<T>, x: NodeId, f: impl Fn(T) -> T) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|&v| f(v)).collect();
        let out = Tensor { data, ..xv.clone() };
        self.push(op, vec![x], out, Aux::None)
    }

    pub fn add_scalar(&mut self, x: NodeId, s: T) -> NodeId {
        self.unary(Op::AddScalar(s), x, |v| v + s)
    }
    pub fn mul_scalar(&mut self, x: NodeId, s: T) -> NodeId {
        self.unary(Op::MulScalar(s), x, |v| v * s)
    }

    /// Clamp with straight-through gradient strictly inside (lo, hi) and
    /// zero gradient at saturation.
    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        self.unary(Op::Clamp { lo, hi }, x, |v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        })
    }

    /// Hard quantizer forward (ceil(x - 0.5)) with soft-round backward.
    pub fn round_hard_ste(&mut self, x: NodeId, alpha: T) -> NodeId {
        self.unary(Op::RoundSte { alpha }, x, |v| (v - T::c(0.5)).ceil())
    }

    /// Soft-round forward (the training surrogate) with matching backward.
    pub fn round_soft_ste(&mut self, x: NodeId, alpha: T) -> NodeId {
        let two_pi = T::c(std::f64::consts::TAU);
        self.unary(Op::RoundSte { alpha }, x, move |v| {
            v - alpha * (two_pi * v).sin() / two_pi
        })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut s = T::zero();
        for &v in &xv.data {
            s = s + v;
        }
        let out = Tensor::scalar(s / T::c(xv.len() as f64));
        self.push(Op::MeanAll, vec![x], out, Aux::None)
    }

    /// Reduce h,w to 1,1 keeping (n, c).
    pub fn mean_spatial(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let norm = T::c((xv.h * xv.w) as f64);
        let mut out = Tensor::zeros(xv.n, xv.c, 1, 1);
        for n in 0..xv.n {
            for c in 0..xv.c {
                let mut s = T::zero();
                for y in 0..xv.h {
                    for x_ in 0..xv.w {
                        s = s + xv.at(n, c, y, x_);
                    }
                }
                out.set(n, c, 0, 0, s / norm);
            }
        }
        self.push(Op::MeanSpatial, vec![x], out, Aux::None)
    }

    /// Elementwise x^p; caller guarantees positive inputs.
    pub fn pow_scalar(&mut self, x: NodeId, p: T) -> NodeId {
        self.unary(Op::PowScalar(p), x, |v| v.powf(p))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let first = &self.nodes[parts[0].0].value;
        let (n, h, w) = (first.n, first.h, first.w);
        let c_total: usize = parts.iter().map(|p| self.nodes[p.0].value.c).sum();
        let mut out = Tensor::zeros(n, c_total, h, w);
        let mut c_off = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!((pv.n, pv.h, pv.w), (n, h, w), "concat spatial mismatch");
            for ni in 0..n {
                for c in 0..pv.c {
                    for y in 0..h {
                        for x_ in 0..w {
                            out.set(ni, c_off + c, y, x_, pv.at(ni, c, y, x_));
                        }
                    }
                }
            }
            c_off += pv.c;
        }
        self.push(Op::ConcatChannels, parts.to_vec(), out, Aux::None)
    }

    /// Cross-entropy over per-position N-way groups. `logits` has
    /// `groups * n_classes` channels; `targets`/`weights` are indexed by
    /// (n, group, y, x) row-major. Returns sum(w * -ln p_target) / sum(w).
    pub fn masked_ce_loss(
        &mut self,
        logits: NodeId,
        n_classes: usize,
        targets: Vec<u16>,
        weights: Vec<T>,
    ) -> NodeId {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.c % n_classes, 0, "logit channels not divisible by classes");
        let groups = lv.c / n_classes;
        let slots = lv.n * groups * lv.h * lv.w;
        assert_eq!(targets.len(), slots);
        assert_eq!(weights.len(), slots);

        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        let mut weight_sum = T::zero();
        for n in 0..lv.n {
            for g in 0..groups {
                for y in 0..lv.h {
                    for x_ in 0..lv.w {
                        let slot = ((n * groups + g) * lv.h + y) * lv.w + x_;
                        let mut mx = T::neg_infinity();
                        for k in 0..n_classes {
                            mx = mx.max(lv.at(n, g * n_classes + k, y, x_));
                        }
                        let mut z = T::zero();
                        for k in 0..n_classes {
                            z = z + (lv.at(n, g * n_classes + k, y, x_) - mx).exp();
                        }
                        for k in 0..n_classes {
                            let p = (lv.at(n, g * n_classes + k, y, x_) - mx).exp() / z;
                            probs[lv.idx(n, g * n_classes + k, y, x_)] = p;
                        }
                        let wgt = weights[slot];
                        if wgt != T::zero() {
                            let p_t = probs[lv.idx(n, g * n_classes + targets[slot] as usize, y, x_)];
                            loss = loss - wgt * p_t.max(T::c(1e-30)).ln();
                            weight_sum = weight_sum + wgt;
                        }
                    }
                }
            }
        }
        let denom = if weight_sum > T::zero() { weight_sum } else { T::one() };
        let out = Tensor::scalar(loss / denom);
        self.push(
            Op::MaskedCeLoss { n_classes },
            vec![logits],
            out,
            Aux::Ce {
                probs,
                targets,
                weights,
                weight_sum: denom,
            },
        )
    }

    /// Reverse sweep from `loss` (a scalar node). Returns per-node
    /// gradients; parameter gradients are read off via `Op::Param` nodes.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Adds parameter gradients from a backward sweep into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &grads.grads[i] {
                    store.add_grad(pid, g);
                }
            }
        }
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(delta.data.iter()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { stride, pad } => {
                let xv = &self.nodes[ins[0].0].value;
                let wv = &self.nodes[ins[1].0].value;
                if self.nodes[ins[0].0].needs_grad {
                    Self::accumulate(grads, ins[0], conv2d_backward_input(xv, wv, g, *stride, *pad));
                }
                if self.nodes[ins[1].0].needs_grad {
                    Self::accumulate(grads, ins[1], conv2d_backward_weight(xv, wv, g, *stride, *pad));
                }
                if ins.len() == 3 && self.nodes[ins[2].0].needs_grad {
                    let mut db = Tensor::zeros(1, g.c, 1, 1);
                    for n in 0..g.n {
                        for c in 0..g.c {
                            for y in 0..g.h {
                                for x_ in 0..g.w {
                                    db.data[c] = db.data[c] + g.at(n, c, y, x_);
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[2], db);
                }
            }
            Op::ConvDepthwise { pad } => {
                let xv = &self.nodes[ins[0].0].value;
                let kv = &self.nodes[ins[1].0].value;
                if self.nodes[ins[0].0].needs_grad {
                    Self::accumulate(grads, ins[0], conv_depthwise_backward_input(xv, kv, g, *pad));
                }
                // Kernel gradients unused: depthwise kernels are constants here.
            }
            Op::LeakyRelu { slope } => {
                let xv = &self.nodes[ins[0].0].value;
                let data = xv
                    .data
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { gv * *slope })
                    .collect();
                Self::accumulate(grads, ins[0], Tensor { data, ..xv.clone() });
            }
            Op::BnTrain { .. } => {
                let (mean, inv_std) = match &node.aux {
                    Aux::Bn { mean, inv_std } => (mean, inv_std),
                    _ => unreachable!(),
                };
                let xv = &self.nodes[ins[0].0].value;
                let gv = &self.nodes[ins[1].0].value;
                let m = T::c((xv.n * xv.h * xv.w) as f64);

                let mut dgamma = Tensor::zeros(1, xv.c, 1, 1);
                let mut dbeta = Tensor::zeros(1, xv.c, 1, 1);
                let mut sum_dy = vec![T::zero(); xv.c];
                let mut sum_dy_xhat = vec![T::zero(); xv.c];
                for n in 0..xv.n {
                    for c in 0..xv.c {
                        for y in 0..xv.h {
                            for x_ in 0..xv.w {
                                let xhat = (xv.at(n, c, y, x_) - mean[c]) * inv_std[c];
                                let dy = g.at(n, c, y, x_);
                                dgamma.data[c] = dgamma.data[c] + dy * xhat;
                                dbeta.data[c] = dbeta.data[c] + dy;
                                sum_dy[c] = sum_dy[c] + dy;
                                sum_dy_xhat[c] = sum_dy_xhat[c] + dy * xhat;
                            }
                        }
                    }
                }
                if self.nodes[ins[0].0].needs_grad {
                    let mut dx = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    for n in 0..xv.n {
                        for c in 0..xv.c {
                            for y in 0..xv.h {
                                for x_ in 0..xv.w {
                                    let xhat = (xv.at(n, c, y, x_) - mean[c]) * inv_std[c];
                                    let dy = g.at(n, c, y, x_);
                                    let t = dy - sum_dy[c] / m - xhat * sum_dy_xhat[c] / m;
                                    dx.set(n, c, y, x_, gv.data[c] * inv_std[c] * t);
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[0], dx);
                }
                if self.nodes[ins[1].0].needs_grad {
                    Self::accumulate(grads, ins[1], dgamma);
                }
                if self.nodes[ins[2].0].needs_grad {
                    Self::accumulate(grads, ins[2], dbeta);
                }
            }
            Op::BnEval { eps, mean, var } => {
                let xv = &self.nodes[ins[0].0].value;
                let gv = &self.nodes[ins[1].0].value;
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + *eps).sqrt()).collect();
                if self.nodes[ins[0].0].needs_grad {
                    let mut dx = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    for n in 0..xv.n {
                        for c in 0..xv.c {
                            for y in 0..xv.h {
                                for x_ in 0..xv.w {
                                    dx.set(n, c, y, x_, g.at(n, c, y, x_) * gv.data[c] * inv_std[c]);
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[0], dx);
                }
                if self.nodes[ins[1].0].needs_grad {
                    let mut dgamma = Tensor::zeros(1, xv.c, 1, 1);
                    for n in 0..xv.n {
                        for c in 0..xv.c {
                            for y in 0..xv.h {
                                for x_ in 0..xv.w {
                                    let xhat = (xv.at(n, c, y, x_) - mean[c]) * inv_std[c];
                                    dgamma.data[c] = dgamma.data[c] + g.at(n, c, y, x_) * xhat;
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[1], dgamma);
                }
                if self.nodes[ins[2].0].needs_grad {
                    let mut dbeta = Tensor::zeros(1, xv.c, 1, 1);
                    for n in 0..xv.n {
                        for c in 0..xv.c {
                            for y in 0..xv.h {
                                for x_ in 0..xv.w {
                                    dbeta.data[c] = dbeta.data[c] + g.at(n, c, y, x_);
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[2], dbeta);
                }
            }
            Op::UpsampleNearest { factor } => {
                let xv = &self.nodes[ins[0].0].value;
                let mut dx = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                for n in 0..g.n {
                    for c in 0..g.c {
                        for y in 0..g.h {
                            for x_ in 0..g.w {
                                let i = dx.idx(n, c, y / factor, x_ / factor);
                                dx.data[i] = dx.data[i] + g.at(n, c, y, x_);
                            }
                        }
                    }
                }
                Self::accumulate(grads, ins[0], dx);
            }
            Op::AvgPool { factor } => {
                let xv = &self.nodes[ins[0].0].value;
                let norm = T::c((factor * factor) as f64);
                let mut dx = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                for n in 0..g.n {
                    for c in 0..g.c {
                        for y in 0..g.h {
                            for x_ in 0..g.w {
                                let share = g.at(n, c, y, x_) / norm;
                                for dy in 0..*factor {
                                    for dxx in 0..*factor {
                                        let i = dx.idx(n, c, y * factor + dy, x_ * factor + dxx);
                                        dx.data[i] = dx.data[i] + share;
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, ins[0], dx);
            }
            Op::Add => {
                Self::accumulate(grads, ins[0], g.clone());
                Self::accumulate(grads, ins[1], g.clone());
            }
            Op::Sub => {
                Self::accumulate(grads, ins[0], g.clone());
                let data = g.data.iter().map(|&v| -v).collect();
                Self::accumulate(grads, ins[1], Tensor { data, ..g.clone() });
            }
            Op::Mul => {
                let av = &self.nodes[ins[0].0].value;
                let bv = &self.nodes[ins[1].0].value;
                if self.nodes[ins[0].0].needs_grad {
                    let data = g.data.iter().zip(bv.data.iter()).map(|(&gv, &b)| gv * b).collect();
                    Self::accumulate(grads, ins[0], Tensor { data, ..g.clone() });
                }
                if self.nodes[ins[1].0].needs_grad {
                    let data = g.data.iter().zip(av.data.iter()).map(|(&gv, &a)| gv * a).collect();
                    Self::accumulate(grads, ins[1], Tensor { data, ..g.clone() });
                }
            }
            Op::Div => {
                let av = &self.nodes[ins[0].0].value;
                let bv = &self.nodes[ins[1].0].value;
                if self.nodes[ins[0].0].needs_grad {
                    let data = g.data.iter().zip(bv.data.iter()).map(|(&gv, &b)| gv / b).collect();
                    Self::accumulate(grads, ins[0], Tensor { data, ..g.clone() });
                }
                if self.nodes[ins[1].0].needs_grad {
                    let data = g
                        .data
                        .iter()
                        .zip(av.data.iter().zip(bv.data.iter()))
                        .map(|(&gv, (&a, &b))| -gv * a / (b * b))
                        .collect();
                    Self::accumulate(grads, ins[1], Tensor { data, ..g.clone() });
                }
            }
            Op::AddScalar(_) => Self::accumulate(grads, ins[0], g.clone()),
            Op::MulScalar(s) => {
                let data = g.data.iter().map(|&v| v * *s).collect();
                Self::accumulate(grads, ins[0], Tensor { data, ..g.clone() });
            }
            Op::Clamp { lo, hi } => {
                let xv = &self.nodes[ins[0].0].value;
                let data = xv
                    .data
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&x, &gv)| if x > *lo && x < *hi { gv } else { T::zero() })
                    .collect();
                Self::accumulate(grads, ins[0], Tensor { data, ..g.clone() });
            }
            Op::RoundSte { alpha } => {
                let xv = &self.nodes[ins[0].0].value;
                let two_pi = T::c(std::f64::consts::TAU);
                let data = xv
                    .data
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&x, &gv)| gv * (T::one() - *alpha * (two_pi * x).cos()))
                    .collect();
                Self::accumulate(grads, ins[0], Tensor { data, ..g.clone() });
            }
            Op::MeanAll => {
                let xv = &self.nodes[ins[0].0].value;
                let share = g.item() / T::c(xv.len() as f64);
                Self::accumulate(grads, ins[0], Tensor::full(xv.n, xv.c, xv.h, xv.w, share));
            }
            Op::MeanSpatial => {
                let xv = &self.nodes[ins[0].0].value;
                let norm = T::c((xv.h * xv.w) as f64);
                let mut dx = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                for n in 0..xv.n {
                    for c in 0..xv.c {
                        let share = g.at(n, c, 0, 0) / norm;
                        for y in 0..xv.h {
                            for x_ in 0..xv.w {
                                dx.set(n, c, y, x_, share);
                            }
                        }
                    }
                }
                Self::accumulate(grads, ins[0], dx);
            }
            Op::PowScalar(p) => {
                let xv = &self.nodes[ins[0].0].value;
                let data = xv
                    .data
                    .iter()
                    .zip(g.data.iter())
                    .map(|(&x, &gv)| gv * *p * x.powf(*p - T::one()))
                    .collect();
                Self::accumulate(grads, ins[0], Tensor { data, ..g.clone() });
            }
            Op::ConcatChannels => {
                let mut c_off = 0;
                for p in ins {
                    let pv = &self.nodes[p.0].value;
                    let mut dp = Tensor::zeros(pv.n, pv.c, pv.h, pv.w);
                    for n in 0..pv.n {
                        for c in 0..pv.c {
                            for y in 0..pv.h {
                                for x_ in 0..pv.w {
                                    dp.set(n, c, y, x_, g.at(n, c_off + c, y, x_));
                                }
                            }
                        }
                    }
                    c_off += pv.c;
                    if self.nodes[p.0].needs_grad {
                        Self::accumulate(grads, *p, dp);
                    }
                }
            }
            Op::MaskedCeLoss { n_classes } => {
                let (probs, targets, weights, weight_sum) = match &node.aux {
                    Aux::Ce { probs, targets, weights, weight_sum } => {
                        (probs, targets, weights, *weight_sum)
                    }
                    _ => unreachable!(),
                };
                let lv = &self.nodes[ins[0].0].value;
                let groups = lv.c / n_classes;
                let gscale = g.item() / weight_sum;
                let mut dl = Tensor::zeros(lv.n, lv.c, lv.h, lv.w);
                for n in 0..lv.n {
                    for gi in 0..groups {
                        for y in 0..lv.h {
                            for x_ in 0..lv.w {
                                let slot = ((n * groups + gi) * lv.h + y) * lv.w + x_;
                                let wgt = weights[slot];
                                if wgt == T::zero() {
                                    continue;
                                }
                                for k in 0..*n_classes {
                                    let idx = lv.idx(n, gi * n_classes + k, y, x_);
                                    let one_hot = if k == targets[slot] as usize {
                                        T::one()
                                    } else {
                                        T::zero()
                                    };
                                    dl.data[idx] = dl.data[idx] + gscale * wgt * (probs[idx] - one_hot);
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, ins[0], dl);
            }
        }
    }
}

/// Output index range [lo, hi) for which `o*stride + k - pad` stays
/// inside [0, dim).
#[inline]
fn out_span(k: usize, stride: usize, pad: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let max_excl = in_dim + pad;
    let hi = if max_excl > k {
        ((max_excl - k - 1) / stride + 1).min(out_dim)
    } else {
        0
    };
    (lo, hi.max(lo))
}

// The convolution kernels iterate (channel, kernel row, kernel column)
// outermost and sweep whole output rows innermost. Every output cell still
// receives its terms in (ic, ky, kx) order, so results are bit-identical
// to the naive triple loop, but the inner sweeps vectorize.

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (kh, kw) = (w.h, w.w);
    let oh = (x.h + 2 * pad - kh) / stride + 1;
    let ow = (x.w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(x.n, w.n, oh, ow);
    for n in 0..x.n {
        for oc in 0..w.n {
            let bias = b.map(|b| b.data[oc]).unwrap_or_else(T::zero);
            let base = out.idx(n, oc, 0, 0);
            out.data[base..base + oh * ow].fill(bias);
            for ic in 0..x.c {
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = out_span(ky, stride, pad, x.h, oh);
                    for kx in 0..kw {
                        let wv = w.at(oc, ic, ky, kx);
                        let (ox_lo, ox_hi) = out_span(kx, stride, pad, x.w, ow);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let o0 = out.idx(n, oc, oy, ox_lo);
                            let i0 = x.idx(n, ic, iy, ox_lo * stride + kx - pad);
                            if stride == 1 {
                                let xrow = &x.data[i0..i0 + (ox_hi - ox_lo)];
                                let orow = &mut out.data[o0..o0 + (ox_hi - ox_lo)];
                                for (ov, xv) in orow.iter_mut().zip(xrow) {
                                    *ov = *ov + wv * *xv;
                                }
                            } else {
                                for (j, o) in (ox_lo..ox_hi).enumerate() {
                                    let _ = o;
                                    out.data[o0 + j] =
                                        out.data[o0 + j] + wv * x.data[i0 + j * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    for n in 0..g.n {
        for oc in 0..g.c {
            for ic in 0..x.c {
                for ky in 0..w.h {
                    let (oy_lo, oy_hi) = out_span(ky, stride, pad, x.h, g.h);
                    for kx in 0..w.w {
                        let wv = w.at(oc, ic, ky, kx);
                        let (ox_lo, ox_hi) = out_span(kx, stride, pad, x.w, g.w);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let g0 = g.idx(n, oc, oy, ox_lo);
                            let d0 = dx.idx(n, ic, iy, ox_lo * stride + kx - pad);
                            if stride == 1 {
                                let grow = &g.data[g0..g0 + (ox_hi - ox_lo)];
                                let drow = &mut dx.data[d0..d0 + (ox_hi - ox_lo)];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv = *dv + wv * *gv;
                                }
                            } else {
                                for j in 0..(ox_hi - ox_lo) {
                                    dx.data[d0 + j * stride] =
                                        dx.data[d0 + j * stride] + wv * g.data[g0 + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_weight<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let mut dw = Tensor::zeros(w.n, w.c, w.h, w.w);
    for n in 0..g.n {
        for oc in 0..g.c {
            for ic in 0..x.c {
                for ky in 0..w.h {
                    let (oy_lo, oy_hi) = out_span(ky, stride, pad, x.h, g.h);
                    for kx in 0..w.w {
                        let (ox_lo, ox_hi) = out_span(kx, stride, pad, x.w, g.w);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let g0 = g.idx(n, oc, oy, ox_lo);
                            let i0 = x.idx(n, ic, iy, ox_lo * stride + kx - pad);
                            if stride == 1 {
                                let grow = &g.data[g0..g0 + (ox_hi - ox_lo)];
                                let xrow = &x.data[i0..i0 + (ox_hi - ox_lo)];
                                for (gv, xv) in grow.iter().zip(xrow) {
                                    acc = acc + *gv * *xv;
                                }
                            } else {
                                for j in 0..(ox_hi - ox_lo) {
                                    acc = acc + g.data[g0 + j] * x.data[i0 + j * stride];
                                }
                            }
                        }
                        let i = dw.idx(oc, ic, ky, kx);
                        dw.data[i] = dw.data[i] + acc;
                    }
                }
            }
        }
    }
    dw
}

fn conv_depthwise_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, pad: usize) -> Tensor<T> {
    let oh = x.h + 2 * pad - k.h + 1;
    let ow = x.w + 2 * pad - k.w + 1;
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            for ky in 0..k.h {
                let (oy_lo, oy_hi) = out_span(ky, 1, pad, x.h, oh);
                for kx in 0..k.w {
                    let kv = k.at(c, 0, ky, kx);
                    let (ox_lo, ox_hi) = out_span(kx, 1, pad, x.w, ow);
                    if ox_hi <= ox_lo {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - pad;
                        let o0 = out.idx(n, c, oy, ox_lo);
                        let i0 = x.idx(n, c, iy, ox_lo + kx - pad);
                        let xrow = &x.data[i0..i0 + (ox_hi - ox_lo)];
                        let orow = &mut out.data[o0..o0 + (ox_hi - ox_lo)];
                        for (ov, xv) in orow.iter_mut().zip(xrow) {
                            *ov = *ov + kv * *xv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_depthwise_backward_input<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
    pad: usize,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    for n in 0..g.n {
        for c in 0..g.c {
            for ky in 0..k.h {
                let (oy_lo, oy_hi) = out_span(ky, 1, pad, x.h, g.h);
                for kx in 0..k.w {
                    let kv = k.at(c, 0, ky, kx);
                    let (ox_lo, ox_hi) = out_span(kx, 1, pad, x.w, g.w);
                    if ox_hi <= ox_lo {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - pad;
                        let g0 = g.idx(n, c, oy, ox_lo);
                        let d0 = dx.idx(n, c, iy, ox_lo + kx - pad);
                        let grow = &g.data[g0..g0 + (ox_hi - ox_lo)];
                        let drow = &mut dx.data[d0..d0 + (ox_hi - ox_lo)];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv = *dv + kv * *gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureTensor;

    fn t(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_feature(&FeatureTensor::from_data(c, h, w, data).unwrap())
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(1, 1, 3, 3));
        let w = g.input(t(1, 3, 3, vec![0.3; 9]));
        let y = g.conv2d(x, w, None, 1, 1);
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.input(t(1, 4, 4, data.clone()));
        let w = g.input(t(1, 1, 1, vec![1.0]));
        let y = g.conv2d(x, w, None, 1, 0);
        assert_eq!(g.value(y).data, data);
    }

    #[test]
    fn upsample_matches_index_formula() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.upsample_nearest(x, 2);
        let expect = vec![
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(g.value(y).data, expect);
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(2, 3, 2, (0..12).map(|v| v as f64).collect()));
        let y = g.upsample_nearest(x, 1);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn upsample_single_cell_copies_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(1, 1, 1, vec![5.0]));
        let y = g.upsample_nearest(x, 2);
        assert_eq!(g.value(y).data, vec![5.0; 4]);
    }

    #[test]
    fn batchnorm_two_point_normalizes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor {
            n: 2,
            c: 1,
            h: 1,
            w: 1,
            data: vec![1.0, 3.0],
        });
        let gamma = g.input(Tensor::full(1, 1, 1, 1, 1.0));
        let beta = g.input(Tensor::zeros(1, 1, 1, 1));
        let y = g.batchnorm_train(x, gamma, beta, 1e-5);
        let v = &g.value(y).data;
        assert!((v[0] + 1.0).abs() < 1e-4, "got {}", v[0]);
        assert!((v[1] - 1.0).abs() < 1e-4, "got {}", v[1]);
    }

    #[test]
    fn batchnorm_eval_identity_stats_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(1, 2, 2, vec![0.5, -1.0, 2.0, 0.0]));
        let gamma = g.input(Tensor::full(1, 1, 1, 1, 1.0));
        let beta = g.input(Tensor::zeros(1, 1, 1, 1));
        let y = g.batchnorm_eval(x, gamma, beta, vec![0.0], vec![1.0], 0.0);
        for (a, b) in g.value(y).data.iter().zip(g.value(x).data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_all_and_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.input_tracked(t(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let m = g.mean_all(x);
        assert_eq!(g.value(m).item(), 2.5);
        let grads = g.backward(m);
        assert_eq!(grads.of(x).unwrap().data, vec![0.25; 4]);
    }

    #[test]
    fn masked_ce_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.input_tracked(Tensor::zeros(1, 3, 1, 1));
        let loss = g.masked_ce_loss(x, 3, vec![1], vec![1.0]);
        assert!((g.value(loss).item() - 3f64.ln()).abs() < 1e-12);
    }
}
