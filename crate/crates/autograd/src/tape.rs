//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value. Nodes only
//! reference earlier nodes, so walking the tape backwards is a valid
//! topological order for gradient propagation.

use crate::kernels;
use crate::{Float, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    PRelu {
        x: Var,
        alpha: Var,
    },
    LeakyRelu {
        x: Var,
        slope: F,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        mean: Vec<F>,
        var: Vec<F>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: F,
    },
    Mean {
        x: Var,
    },
    SpatialMean {
        x: Var,
    },
    PermuteSamples {
        x: Var,
        perm: Vec<usize>,
    },
    MeanSquaredDiff {
        a: Var,
        b: Var,
    },
    PowerNormalize {
        x: Var,
        scale: Vec<F>,
        energy: Vec<F>,
    },
    BceWithLogits {
        logits: Var,
        target: F,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Recorded computation graph.
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<F: Float>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Transposed convolution; kernel layout is (in, out, k, k).
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let value = kernels::conv_t_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            out_pad,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Parametric ReLU with one slope per channel of an NCHW input.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(alpha), &[c], "prelu slope must have one entry per channel");
        let plane = h * w;
        let a = self.value(alpha).data();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            if *v <= F::zero() {
                *v *= a[(i / plane) % c];
            }
        }
        let rg = self.rg(x) || self.rg(alpha);
        self.push(Tensor::new(vec![n, c, h, w], out), Op::PRelu { x, alpha }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = F::from_f64_lossy(slope);
        let value = self
            .value(x)
            .map(|v| if v > F::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(F::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Training-mode batch normalization over (N, H, W) per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let count = F::from_usize(n * plane).unwrap();
        let eps = F::from_f64_lossy(eps);
        let xd = self.value(x).data();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for b in 0..n {
            for (ci, m) in mean.iter_mut().enumerate() {
                let base = (b * c + ci) * plane;
                *m += xd[base..base + plane].iter().copied().sum::<F>();
            }
        }
        for m in &mut mean {
            *m = *m / count;
        }
        for b in 0..n {
            for ci in 0..c {
                let base = (b * c + ci) * plane;
                var[ci] += xd[base..base + plane]
                    .iter()
                    .map(|&v| (v - mean[ci]) * (v - mean[ci]))
                    .sum::<F>();
            }
        }
        for v in &mut var {
            *v = *v / count;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        for i in 0..xd.len() {
            let ci = (i / plane) % c;
            xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
            out[i] = g[ci] * xhat[i] + bt[ci];
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
            },
            rg,
        )
    }

    /// Biased batch mean and variance recorded by a [`Tape::batch_norm`] node.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[F], &[F])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// `x * scale[c] + shift[c]` per channel (inference-mode batch norm).
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let s = self.value(scale).data();
        let t = self.value(shift).data();
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = (i / plane) % c;
                v * s[ci] + t[ci]
            })
            .collect();
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::ChannelAffine { x, scale, shift },
            rg,
        )
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (value, argmax) = kernels::max_pool2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: batch/spatial mismatch");
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(self.value(a).sample(i));
            out.extend_from_slice(self.value(b).sample(i));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, ca + cb, h, w], out), Op::Concat { a, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// `x·wᵀ + b` with `x`: (n, d), `w`: (o, d), `b`: (o).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let (o, wd) = self.value(w).dims2();
        assert_eq!(d, wd, "linear: input width {d}, weight expects {wd}");
        let mut out = vec![F::zero(); n * o];
        crate::float::matmul(
            n,
            d,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            F::zero(),
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = F::from_f64_lossy(factor);
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = t.sum() / F::from_usize(t.len()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(value), Op::Mean { x }, rg)
    }

    /// Global average pool: (n, c, h, w) to (n, c).
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let inv = F::one() / F::from_usize(h * w).unwrap();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<F>() * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c], data), Op::SpatialMean { x }, rg)
    }

    /// Reorder the elements of every sample: `out[i] = x[perm[i]]`.
    pub fn permute_samples(&mut self, x: Var, perm: &[usize]) -> Var {
        let t = self.value(x);
        let per = t.len() / t.shape()[0];
        assert_eq!(perm.len(), per, "permutation length must match the sample size");
        let mut out = Vec::with_capacity(t.len());
        for s in t.data().chunks(per) {
            out.extend(perm.iter().map(|&j| s[j]));
        }
        let value = Tensor::new(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(
            value,
            Op::PermuteSamples {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// `mean((a - b)²)` over all elements.
    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mean_squared_diff: shape mismatch");
        let n = F::from_usize(self.value(a).len()).unwrap();
        let s: F = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / n), Op::MeanSquaredDiff { a, b }, rg)
    }

    /// Scale each row of a 2-D tensor `(n, 2k)` so that its mean energy per
    /// complex pair is one: `row · sqrt(k / Σ row²)`.
    pub fn power_normalize(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        assert!(d % 2 == 0, "power_normalize: row length {d} is odd");
        let k = F::from_usize(d / 2).unwrap();
        let mut scale = Vec::with_capacity(n);
        let mut energy = Vec::with_capacity(n);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let e: F = row.iter().map(|&v| v * v).sum();
            let s = (k / e).sqrt();
            for v in row.iter_mut() {
                *v *= s;
            }
            scale.push(s);
            energy.push(e);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![n, d], out),
            Op::PowerNormalize { x, scale, energy },
            rg,
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant label.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Var {
        let t = F::from_f64_lossy(target);
        let z = self.value(logits);
        let n = F::from_usize(z.len()).unwrap();
        let s: F = z
            .data()
            .iter()
            .map(|&v| v.max(F::zero()) - v * t + (F::one() + (-v.abs()).exp()).ln())
            .sum();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(s / n),
            Op::BceWithLogits { logits, target: t },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `(n, classes)` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, k) = self.value(logits).dims2();
        assert_eq!(labels.len(), n, "one label per row required");
        let mut probs = vec![F::zero(); n * k];
        let mut loss = F::zero();
        for (i, row) in self.value(logits).data().chunks(k).enumerate() {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            assert!(labels[i] < k, "label {} out of range", labels[i]);
            loss += z.ln() + m - row[labels[i]];
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / F::from_usize(n).unwrap()),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Back-propagate from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.acc(grads, *b, kernels::channel_sums(g));
                    }
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw) = kernels::conv_t_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.acc(grads, *b, kernels::channel_sums(g));
                    }
                }
            }
            Op::PRelu { x, alpha } => {
                let (_, c, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let xd = self.value(*x).data();
                let a = self.value(*alpha).data();
                if self.rg(*x) {
                    let dx: Vec<F> = g
                        .data()
                        .iter()
                        .zip(xd)
                        .enumerate()
                        .map(|(i, (&gv, &xv))| {
                            if xv > F::zero() {
                                gv
                            } else {
                                gv * a[(i / plane) % c]
                            }
                        })
                        .collect();
                    self.acc(grads, *x, Tensor::new(xd_shape(self.value(*x)), dx));
                }
                if self.rg(*alpha) {
                    let mut da = vec![F::zero(); c];
                    for (i, (&gv, &xv)) in g.data().iter().zip(xd).enumerate() {
                        if xv <= F::zero() {
                            da[(i / plane) % c] += gv * xv;
                        }
                    }
                    self.acc(grads, *alpha, Tensor::new(vec![c], da));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.value(*x).data();
                let dx = g
                    .data()
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { gv * *slope })
                    .collect();
                self.acc(grads, *x, Tensor::new(xd_shape(self.value(*x)), dx));
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let dx = g
                    .data()
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                self.acc(grads, *x, Tensor::new(xd_shape(self.value(*x)), dx));
            }
            Op::Sigmoid { x } => {
                let dx = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (F::one() - y))
                    .collect();
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let (n, c, h, w) = out.dims4();
                let plane = h * w;
                let count = F::from_usize(n * plane).unwrap();
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for (i, (&gv, &xh)) in g.data().iter().zip(xhat).enumerate() {
                    let ci = (i / plane) % c;
                    sum_g[ci] += gv;
                    sum_gx[ci] += gv * xh;
                }
                if self.rg(*x) {
                    let gm = self.value(*gamma).data();
                    let dx = g
                        .data()
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&gv, &xh))| {
                            let ci = (i / plane) % c;
                            gm[ci] * inv_std[ci] / count
                                * (count * gv - sum_g[ci] - xh * sum_gx[ci])
                        })
                        .collect();
                    self.acc(grads, *x, Tensor::new(out.shape().to_vec(), dx));
                }
                if self.rg(*gamma) {
                    self.acc(grads, *gamma, Tensor::new(vec![c], sum_gx));
                }
                if self.rg(*beta) {
                    self.acc(grads, *beta, Tensor::new(vec![c], sum_g));
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (_, c, h, w) = out.dims4();
                let plane = h * w;
                let xd = self.value(*x).data();
                let s = self.value(*scale).data();
                if self.rg(*x) {
                    let dx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * s[(i / plane) % c])
                        .collect();
                    self.acc(grads, *x, Tensor::new(out.shape().to_vec(), dx));
                }
                if self.rg(*scale) {
                    let mut ds = vec![F::zero(); c];
                    for (i, (&gv, &xv)) in g.data().iter().zip(xd).enumerate() {
                        ds[(i / plane) % c] += gv * xv;
                    }
                    self.acc(grads, *scale, Tensor::new(vec![c], ds));
                }
                if self.rg(*shift) {
                    self.acc(grads, *shift, kernels::channel_sums(g));
                }
            }
            Op::SpatialMean { x } => {
                let (_, _, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let inv = F::one() / F::from_usize(plane).unwrap();
                let dx = (0..self.value(*x).len())
                    .map(|i| g.data()[i / plane] * inv)
                    .collect();
                self.acc(grads, *x, Tensor::new(xd_shape(self.value(*x)), dx));
            }
            Op::PermuteSamples { x, perm } => {
                let per = perm.len();
                let mut dx = vec![F::zero(); g.len()];
                for (gs, ds) in g.data().chunks(per).zip(dx.chunks_mut(per)) {
                    for (i, &j) in perm.iter().enumerate() {
                        ds[j] += gs[i];
                    }
                }
                self.acc(grads, *x, Tensor::new(xd_shape(self.value(*x)), dx));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![F::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                self.acc(grads, *x, Tensor::new(xd_shape(self.value(*x)), dx));
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * pa);
                let mut db = Vec::with_capacity(n * pb);
                for i in 0..n {
                    let s = g.sample(i);
                    da.extend_from_slice(&s[..pa]);
                    db.extend_from_slice(&s[pa..]);
                }
                self.acc(grads, *a, Tensor::new(vec![n, ca, h, w], da));
                self.acc(grads, *b, Tensor::new(vec![n, cb, h, w], db));
            }
            Op::Reshape { x } => {
                let shape = xd_shape(self.value(*x));
                self.acc(grads, *x, g.clone().reshape(&shape));
            }
            Op::Linear { x, w, b } => {
                let (n, d) = self.value(*x).dims2();
                let (o, _) = self.value(*w).dims2();
                if self.rg(*x) {
                    let mut dx = vec![F::zero(); n * d];
                    crate::float::matmul(
                        n,
                        o,
                        d,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        F::zero(),
                        &mut dx,
                    );
                    self.acc(grads, *x, Tensor::new(vec![n, d], dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![F::zero(); o * d];
                    crate::float::matmul(
                        o,
                        n,
                        d,
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        F::zero(),
                        &mut dw,
                    );
                    self.acc(grads, *w, Tensor::new(vec![o, d], dw));
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); o];
                    for row in g.data().chunks(o) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.acc(grads, *b, Tensor::new(vec![o], db));
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.acc(grads, *x, g.map(|v| v * f));
            }
            Op::Mean { x } => {
                let t = self.value(*x);
                let v = g.item() / F::from_usize(t.len()).unwrap();
                self.acc(grads, *x, Tensor::full(t.shape(), v));
            }
            Op::MeanSquaredDiff { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = F::from_f64_lossy(2.0) * g.item() / F::from_usize(av.len()).unwrap();
                let da: Vec<F> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| k * (x - y))
                    .collect();
                if self.rg(*b) {
                    let db = da.iter().map(|&v| -v).collect();
                    self.acc(grads, *b, Tensor::new(av.shape().to_vec(), db));
                }
                self.acc(grads, *a, Tensor::new(av.shape().to_vec(), da));
            }
            Op::PowerNormalize { x, scale, energy } => {
                let xv = self.value(*x);
                let (_, d) = xv.dims2();
                let mut dx = Vec::with_capacity(xv.len());
                for (r, (row, grow)) in xv.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    let dot: F = row.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    let s = scale[r];
                    let e = energy[r];
                    dx.extend(row.iter().zip(grow).map(|(&xv, &gv)| s * (gv - xv * dot / e)));
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::BceWithLogits { logits, target } => {
                let z = self.value(*logits);
                let k = g.item() / F::from_usize(z.len()).unwrap();
                let dz = z.map(|v| (sigmoid(v) - *target) * k);
                self.acc(grads, *logits, dz);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, k) = self.value(*logits).dims2();
                let scale = g.item() / F::from_usize(n).unwrap();
                let mut dz: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * k + l] -= scale;
                }
                self.acc(grads, *logits, Tensor::new(vec![n, k], dz));
            }
        }
    }
}

fn xd_shape<F: Float>(t: &Tensor<F>) -> Vec<usize> {
    t.shape().to_vec()
}
