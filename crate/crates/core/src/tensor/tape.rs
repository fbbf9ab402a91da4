//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node; [`Tape::backward`] walks the
//! nodes in reverse and returns gradients for leaves and bound parameters.

use super::kernels;
use super::{sigmoid_scalar, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Param(usize),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    TransposedConv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    LogisticLikelihood {
        z: Var,
        loc: Var,
        log_scale: Var,
        floor: T,
    },
    GaussianKl {
        mean: Var,
        log_var: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, for leaves and parameters only.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// `(param slot, gradient)` for every bound parameter the loss depends on.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(slot, v)| self.get(v).map(|g| (slot, g)))
    }
}

/// Per-channel view over an NCHW-like layout: channel axis 1, everything
/// after it is one plane.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let batch = shape.first().copied().unwrap_or(1);
    let channels = shape.get(1).copied().unwrap_or(1);
    let plane = shape.iter().skip(2).product::<usize>();
    (batch, channels, plane)
}

struct LogisticTerms<T> {
    prob: T,
    dprob_dz: T,
    dprob_dlog_scale: T,
}

/// Mass of the integer-centred unit bin around `z` under a logistic density.
fn logistic_bin<T: Real>(z: T, loc: T, log_scale: T) -> LogisticTerms<T> {
    let half = T::lit(0.5);
    let inv_scale = (-log_scale).exp();
    let d = z - loc;
    // Evaluate on the side where both CDF values are small so the
    // difference does not cancel in the upper tail.
    let sign = if d > T::zero() { -T::one() } else { T::one() };
    let upper = (sign * d + half) * inv_scale;
    let lower = (sign * d - half) * inv_scale;
    let prob = sigmoid_scalar(upper) - sigmoid_scalar(lower);
    let density = |x: T| {
        let s = sigmoid_scalar(x);
        s * (T::one() - s)
    };
    let (du, dl) = (density(upper), density(lower));
    // d/dz of sigma((d + 1/2)/s) - sigma((d - 1/2)/s); the reflection flips
    // the sign of both arguments and swaps them, which leaves dP/dz's sign
    // carried by `sign`.
    let dprob_dz = sign * (du - dl) * inv_scale;
    let dprob_dlog_scale = -(upper * du) + lower * dl;
    LogisticTerms {
        prob,
        dprob_dz,
        dprob_dlog_scale,
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// A differentiable input whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// A differentiable input tied to parameter slot `slot`.
    pub fn param(&mut self, value: Tensor<T>, slot: usize) -> Var {
        self.push(value, Op::Param(slot), &[])
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        ))
    }

    pub fn transposed_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let out = kernels::transposed_conv2d_forward(
            self.value(input),
            self.value(kernel),
            stride,
            padding,
            output_padding,
        )?;
        Ok(self.push(
            out,
            Op::TransposedConv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        ))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        let (batch, channels, plane) = channel_layout(x.shape());
        if x.shape().len() < 2 || b.shape() != [channels] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = x.clone();
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                let bc = b.data()[c];
                for v in &mut out.data_mut()[base..base + plane] {
                    *v += bc;
                }
            }
        }
        Ok(self.push(out, Op::BiasAdd { input, bias }, &[input, bias]))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let out = super::leaky_relu(self.value(input), slope);
        self.push(out, Op::LeakyRelu { input, slope }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = super::sigmoid(self.value(input));
        self.push(out, Op::Sigmoid(input), &[input])
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|x| x * factor);
        self.push(out, Op::Scale(input, factor), &[input])
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let out = self.value(input).map(T::exp);
        self.push(out, Op::Exp(input), &[input])
    }

    pub fn ln(&mut self, input: Var) -> Var {
        let out = self.value(input).map(T::ln);
        self.push(out, Op::Ln(input), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let total: T = x.data().iter().copied().sum();
        let mean = total / T::from_usize(x.len().max(1)).unwrap();
        self.push(Tensor::scalar(mean), Op::Mean(input), &[input])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.binary("mse", a, b, |p, q| (p - q) * (p - q))?;
        let mean = diff.data().iter().copied().sum::<T>() / T::from_usize(diff.len().max(1)).unwrap();
        Ok(self.push(Tensor::scalar(mean), Op::Mse(a, b), &[a, b]))
    }

    /// Channels `[start, start + len)` of an NCHW value.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4().ok_or_else(|| TensorError::InvalidArgument {
            op: "slice_channels",
            reason: format!("expected NCHW, got {:?}", x.shape()),
        })?;
        if start + len > c || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice_channels",
                reason: format!("range {start}..{} outside {c} channels", start + len),
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&x.data()[base..base + len * plane]);
        }
        let out = Tensor::new(vec![n, len, h, w], data)?;
        Ok(self.push(out, Op::SliceChannels { input, start }, &[input]))
    }

    /// Probability of the unit bin centred on each element under a per-channel
    /// logistic density, floored at `floor`.
    pub fn logistic_likelihood(&mut self, z: Var, loc: Var, log_scale: Var, floor: T) -> Result<Var> {
        let zv = self.value(z);
        let (batch, channels, plane) = channel_layout(zv.shape());
        let (lv, sv) = (self.value(loc), self.value(log_scale));
        if zv.shape().len() < 2 || lv.shape() != [channels] || sv.shape() != [channels] {
            return Err(TensorError::ShapeMismatch {
                op: "logistic_likelihood",
                lhs: zv.shape().to_vec(),
                rhs: lv.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(zv.shape().to_vec());
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                let (mu, ls) = (lv.data()[c], sv.data()[c]);
                for i in base..base + plane {
                    out.data_mut()[i] = logistic_bin(zv.data()[i], mu, ls).prob.max(floor);
                }
            }
        }
        Ok(self.push(
            out,
            Op::LogisticLikelihood {
                z,
                loc,
                log_scale,
                floor,
            },
            &[z, loc, log_scale],
        ))
    }

    /// `KL(N(mean, exp(log_var)) || N(0, 1))` summed over all elements, in nats.
    pub fn gaussian_kl(&mut self, mean: Var, log_var: Var) -> Result<Var> {
        let half = T::lit(0.5);
        let kl = self.binary("gaussian_kl", mean, log_var, |m, lv| {
            half * (m * m + lv.exp() - T::one() - lv)
        })?;
        let total = kl.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(total), Op::GaussianKl { mean, log_var }, &[mean, log_var]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(slot) => Some((slot, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (x, w) = (self.value(input), self.value(kernel));
                if self.wants(input) {
                    let dx = kernels::conv2d_backward_input(g, w, x.shape(), stride, padding)?;
                    self.accumulate(grads, input, dx);
                }
                if self.wants(kernel) {
                    let dw = kernels::conv2d_backward_kernel(x, g, w.shape()[2], stride, padding)?;
                    self.accumulate(grads, kernel, dw);
                }
            }
            Op::TransposedConv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (y, w) = (self.value(input), self.value(kernel));
                if self.wants(input) {
                    let dy = kernels::conv2d_forward(g, w, stride, padding)?;
                    self.accumulate(grads, input, dy);
                }
                if self.wants(kernel) {
                    let dw = kernels::conv2d_backward_kernel(g, y, w.shape()[2], stride, padding)?;
                    self.accumulate(grads, kernel, dw);
                }
            }
            Op::BiasAdd { input, bias } => {
                if self.wants(bias) {
                    let (batch, channels, plane) = channel_layout(g.shape());
                    let mut db = Tensor::zeros(vec![channels]);
                    for n in 0..batch {
                        for c in 0..channels {
                            let base = (n * channels + c) * plane;
                            let s: T = g.data()[base..base + plane].iter().copied().sum();
                            db.data_mut()[c] += s;
                        }
                    }
                    self.accumulate(grads, bias, db);
                }
                self.accumulate(grads, input, g.clone());
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { gv * slope })
                    .collect();
                self.accumulate(grads, input, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Sigmoid(input) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, input, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let data = g.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, a, Tensor::new(g.shape().to_vec(), data)?);
                }
                if self.wants(b) {
                    let data = g.data().iter().zip(x.data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, b, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Scale(input, factor) => self.accumulate(grads, input, g.map(|v| v * factor)),
            Op::Exp(input) => {
                let data = node.value.data().iter().zip(g.data()).map(|(&e, &gv)| e * gv).collect();
                self.accumulate(grads, input, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Ln(input) => {
                let x = self.value(input);
                let data = x.data().iter().zip(g.data()).map(|(&xv, &gv)| gv / xv).collect();
                self.accumulate(grads, input, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Sum(input) => {
                let shape = self.value(input).shape().to_vec();
                self.accumulate(grads, input, Tensor::full(shape, g.item()));
            }
            Op::Mean(input) => {
                let x = self.value(input);
                let v = g.item() / T::from_usize(x.len().max(1)).unwrap();
                self.accumulate(grads, input, Tensor::full(x.shape().to_vec(), v));
            }
            Op::Mse(a, b) => {
                let (x, y) = (self.value(a), self.value(b));
                let k = T::lit(2.0) * g.item() / T::from_usize(x.len().max(1)).unwrap();
                let da: Vec<T> = x.data().iter().zip(y.data()).map(|(&p, &q)| k * (p - q)).collect();
                if self.wants(b) {
                    let db = da.iter().map(|&v| -v).collect();
                    self.accumulate(grads, b, Tensor::new(x.shape().to_vec(), db)?);
                }
                self.accumulate(grads, a, Tensor::new(x.shape().to_vec(), da)?);
            }
            Op::SliceChannels { input, start } => {
                let x = self.value(input);
                let (n, c, h, w) = x.dims4().expect("checked in forward");
                let len = g.shape()[1];
                let plane = h * w;
                let mut dx = Tensor::zeros(vec![n, c, h, w]);
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    dx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[src..src + len * plane]);
                }
                self.accumulate(grads, input, dx);
            }
            Op::LogisticLikelihood {
                z,
                loc,
                log_scale,
                floor,
            } => {
                let zv = self.value(z);
                let (lv, sv) = (self.value(loc), self.value(log_scale));
                let (batch, channels, plane) = channel_layout(zv.shape());
                let mut dz = Tensor::zeros(zv.shape().to_vec());
                let mut dloc = Tensor::zeros(vec![channels]);
                let mut dls = Tensor::zeros(vec![channels]);
                for n in 0..batch {
                    for c in 0..channels {
                        let base = (n * channels + c) * plane;
                        let (mu, ls) = (lv.data()[c], sv.data()[c]);
                        let (mut acc_loc, mut acc_ls) = (T::zero(), T::zero());
                        for i in base..base + plane {
                            let t = logistic_bin(zv.data()[i], mu, ls);
                            if t.prob < floor {
                                continue;
                            }
                            let gv = g.data()[i];
                            dz.data_mut()[i] = gv * t.dprob_dz;
                            acc_loc -= gv * t.dprob_dz;
                            acc_ls += gv * t.dprob_dlog_scale;
                        }
                        dloc.data_mut()[c] += acc_loc;
                        dls.data_mut()[c] += acc_ls;
                    }
                }
                self.accumulate(grads, z, dz);
                self.accumulate(grads, loc, dloc);
                self.accumulate(grads, log_scale, dls);
            }
            Op::GaussianKl { mean, log_var } => {
                let gv = g.item();
                let half = T::lit(0.5);
                if self.wants(mean) {
                    let dm = self.value(mean).map(|m| gv * m);
                    self.accumulate(grads, mean, dm);
                }
                if self.wants(log_var) {
                    let dl = self.value(log_var).map(|lv| gv * half * (lv.exp() - T::one()));
                    self.accumulate(grads, log_var, dl);
                }
            }
        }
        Ok(())
    }
}
