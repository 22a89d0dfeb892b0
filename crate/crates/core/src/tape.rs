//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Nodes are appended in execution order; [`Tape::backward`] walks them in
//! strict reverse append order. A parameter used several times within one
//! pass is materialized once, so its gradient contributions sum naturally.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Deconv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Act(Var, Activation),
    Add(Var, Var),
    Scale(Var, T),
    Junction {
        feat: Var,
        attn: Var,
        eta: T,
    },
    AvgPool2(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Norm {
        input: Var,
        gamma: Var,
        alpha: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Concat(Vec<Var>),
    DotConst {
        input: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Output of the batch-statistics normalization kernel, exposed so callers can
/// update running estimates.
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient w.r.t. a tracked input leaf.
    pub fn input(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&var)
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

fn same_dims<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err(
            op,
            format!("operand dims {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf whose gradient is reported in [`Gradients::input`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Materializes a parameter once per tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let ng = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            ng,
        ))
    }

    pub fn deconv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::deconv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let ng = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Deconv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            ng,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let out = Tensor::from_fn(x.dims(), |i| {
            let v = x.data()[i];
            match kind {
                Activation::Relu => if v < T::zero() { T::zero() } else { v },
                Activation::Sigmoid => sigmoid(v),
            }
        });
        let ng = self.needs(input);
        self.push(out, Op::Act(input, kind), ng)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_dims("add", x, y)?;
        let out = Tensor::from_fn(x.dims(), |i| x.data()[i] + y.data()[i]);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let out = Tensor::from_fn(x.dims(), |i| x.data()[i] * factor);
        let ng = self.needs(input);
        self.push(out, Op::Scale(input, factor), ng)
    }

    /// `feat ⊙ (attn + eta)`, broadcasting a single-channel `attn` over channels.
    pub fn junction(&mut self, feat: Var, attn: Var, eta: T) -> Result<Var> {
        let (a, b) = (self.value(feat), self.value(attn));
        let [n, c, h, w] = a.dims();
        let [bn, bc, bh, bw] = b.dims();
        if (bh, bw) != (h, w) {
            return Err(shape_err(
                "junction",
                format!("spatial mismatch: features {h}x{w}, attention {bh}x{bw}"),
            ));
        }
        if bn != n || !(bc == 1 || bc == c) {
            return Err(shape_err(
                "junction",
                format!("attention dims {:?} do not broadcast onto {:?}", b.dims(), a.dims()),
            ));
        }
        let plane = h * w;
        let out = Tensor::from_fn(a.dims(), |i| {
            let (s, ch, p) = (i / (c * plane), (i / plane) % c, i % plane);
            let bi = (s * bc + if bc == 1 { 0 } else { ch }) * plane + p;
            a.data()[i] * (b.data()[bi] + eta)
        });
        let ng = self.needs(feat) || self.needs(attn);
        Ok(self.push(out, Op::Junction { feat, attn, eta }, ng))
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let out = kernels::avg_pool2_forward(self.value(input))?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::AvgPool2(input), ng))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2_forward(self.value(input))?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, ng))
    }

    pub fn upsample2(&mut self, input: Var) -> Var {
        let out = kernels::upsample_nearest2_forward(self.value(input));
        let ng = self.needs(input);
        self.push(out, Op::Upsample2(input), ng)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let [n, c, h, w] = x.dims();
        let plane = h * w;
        let inv = T::one() / T::from_usize(plane).unwrap();
        let out = Tensor::from_fn([n, c, 1, 1], |i| {
            x.data()[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv
        });
        let ng = self.needs(input);
        self.push(out, Op::GlobalAvgPool(input), ng)
    }

    /// `y = x Wᵀ + b` for `x: (N, C, 1, 1)`, `W: (K, C, 1, 1)`, `b: (1, K, 1, 1)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let [n, c, h, wd] = x.dims();
        let [k, wc, _, _] = w.dims();
        if h != 1 || wd != 1 {
            return Err(shape_err("linear", format!("input spatial dims {h}x{wd}, expected 1x1")));
        }
        if c != wc || w.sample_len() != c {
            return Err(shape_err(
                "linear",
                format!("input has {c} features but weight is {:?}", w.dims()),
            ));
        }
        if b.numel() != k {
            return Err(shape_err("linear", format!("bias has {} values, expected {k}", b.numel())));
        }
        let mut out = Tensor::zeros([n, k, 1, 1]);
        for dst in out.data_mut().chunks_mut(k) {
            dst.copy_from_slice(b.data());
        }
        T::gemm(
            n,
            c,
            k,
            T::one(),
            x.data(),
            c as isize,
            1,
            w.data(),
            1,
            c as isize,
            T::one(),
            out.data_mut(),
            k as isize,
            1,
        );
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::Linear { input, weight, bias }, ng))
    }

    /// Per-channel normalization followed by the affine map `gamma * x̂ + alpha`.
    ///
    /// With `stats = None` the current batch statistics are used (biased
    /// variance, differentiated through); otherwise the given `(mean, var)`
    /// are treated as constants. Returns the batch statistics when computed.
    pub fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        alpha: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<NormStats<T>>)> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims();
        let plane = h * w;
        let count = n * plane;
        let (g, a) = (self.value(gamma), self.value(alpha));
        if g.numel() != c || a.numel() != c {
            return Err(shape_err(
                "normalize",
                format!("affine has {} channels, input has {c}", g.numel()),
            ));
        }
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err("normalize", "running statistics channel mismatch"));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if count < 2 {
                    return Err(shape_err(
                        "normalize",
                        format!("batch statistics need at least 2 values per channel, got {count}"),
                    ));
                }
                let inv_count = T::one() / T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * plane;
                        s += x.data()[base..base + plane].iter().copied().sum::<T>();
                    }
                    let m = s * inv_count;
                    let mut q = T::zero();
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * plane;
                        q += x.data()[base..base + plane]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<T>();
                    }
                    mean[ch] = m;
                    var[ch] = q * inv_count;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = Tensor::zeros(x.dims());
        for (i, (xh, o)) in xhat.iter_mut().zip(out.data_mut()).enumerate() {
            let ch = (i / plane) % c;
            *xh = (x.data()[i] - mean[ch]) * inv_std[ch];
            *o = g.data()[ch] * *xh + a.data()[ch];
        }
        let ng = self.needs(input) || self.needs(gamma) || self.needs(alpha);
        let var_out = self.push(
            out,
            Op::Norm {
                input,
                gamma,
                alpha,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        );
        let stats = batch_stats.then_some(NormStats { mean, var, count });
        Ok((var_out, stats))
    }

    /// Mean softmax cross-entropy over the batch; returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let [n, k, h, w] = z.dims();
        if h != 1 || w != 1 {
            return Err(shape_err("softmax_cross_entropy", "logits must be (N, K, 1, 1)"));
        }
        if labels.len() != n {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (row, (&label, p)) in labels.iter().zip(probs.chunks_mut(k)).enumerate() {
            let zr = &z.data()[row * k..(row + 1) * k];
            let mx = zr.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (pi, &zi) in p.iter_mut().zip(zr) {
                *pi = (zi - mx).exp();
                total += *pi;
            }
            p.iter_mut().for_each(|pi| *pi = *pi / total);
            loss += total.ln() - (zr[label] - mx);
        }
        loss = loss / T::from_usize(n).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            self.needs(logits),
        ))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .dims();
        let [n, _, h, w] = first;
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims();
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err(
                    "concat",
                    format!("part dims {:?} incompatible with {first:?}", self.value(p).dims()),
                ));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let len = t.sample_len();
                data.extend_from_slice(&t.data()[s * len..(s + 1) * len]);
            }
        }
        let out = Tensor::new([n, total_c, h, w], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Scalar `Σ input ⊙ weights` against a constant tensor.
    pub fn dot_const(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        same_dims("dot_const", x, &weights)?;
        let v = x.dot(&weights);
        let ng = self.needs(input);
        Ok(self.push(Tensor::scalar(v), Op::DotConst { input, weights }, ng))
    }

    /// Reverse sweep from a scalar `loss`. An empty tape yields no gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut out = Gradients {
            params: Vec::new(),
            inputs: HashMap::new(),
        };
        if self.nodes.is_empty() {
            return Ok(out);
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got dims {:?}", self.value(loss).dims()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut acc = Accumulator {
                grads: &mut grads,
                nodes: &self.nodes,
            };
            match &node.op {
                Op::Input => {
                    out.inputs
                        .insert(Var(idx), Tensor::new(node.value.dims(), g)?);
                }
                Op::Param(id) => {
                    out.params.push((*id, Tensor::new(node.value.dims(), g)?));
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let dy = Tensor::new(node.value.dims(), g)?;
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        *stride,
                        *pad,
                        &dy,
                        self.needs(*input),
                    )?;
                    if let Some(dx) = dx {
                        acc.add(*input, dx.data());
                    }
                    acc.add(*weight, dw.data());
                    if let Some(b) = bias {
                        acc.add(*b, &db);
                    }
                }
                Op::Deconv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let dy = Tensor::new(node.value.dims(), g)?;
                    let (dx, dw, db) = kernels::deconv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        *stride,
                        *pad,
                        &dy,
                    )?;
                    acc.add(*input, dx.data());
                    acc.add(*weight, dw.data());
                    if let Some(b) = bias {
                        acc.add(*b, &db);
                    }
                }
                Op::Act(input, kind) => {
                    let y = node.value.data();
                    let dx: Vec<T> = match kind {
                        Activation::Relu => g
                            .iter()
                            .zip(y)
                            .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                            .collect(),
                        Activation::Sigmoid => g
                            .iter()
                            .zip(y)
                            .map(|(&d, &s)| d * s * (T::one() - s))
                            .collect(),
                    };
                    acc.add(*input, &dx);
                }
                Op::Add(a, b) => {
                    acc.add(*a, &g);
                    acc.add(*b, &g);
                }
                Op::Scale(input, f) => {
                    let dx: Vec<T> = g.iter().map(|&d| d * *f).collect();
                    acc.add(*input, &dx);
                }
                Op::Junction { feat, attn, eta } => {
                    let (a, b) = (self.value(*feat), self.value(*attn));
                    let [_, c, h, w] = a.dims();
                    let bc = b.channels();
                    let plane = h * w;
                    let bidx = |i: usize| {
                        let (s, ch, p) = (i / (c * plane), (i / plane) % c, i % plane);
                        (s * bc + if bc == 1 { 0 } else { ch }) * plane + p
                    };
                    if self.needs(*feat) {
                        let da: Vec<T> = (0..g.len())
                            .map(|i| g[i] * (b.data()[bidx(i)] + *eta))
                            .collect();
                        acc.add(*feat, &da);
                    }
                    if self.needs(*attn) {
                        let mut db = vec![T::zero(); b.numel()];
                        for i in 0..g.len() {
                            db[bidx(i)] += g[i] * a.data()[i];
                        }
                        acc.add(*attn, &db);
                    }
                }
                Op::AvgPool2(input) => {
                    let dy = Tensor::new(node.value.dims(), g)?;
                    let dx = kernels::avg_pool2_backward(self.value(*input).dims(), &dy);
                    acc.add(*input, dx.data());
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*input).numel()];
                    for (&src, &d) in argmax.iter().zip(&g) {
                        dx[src] += d;
                    }
                    acc.add(*input, &dx);
                }
                Op::Upsample2(input) => {
                    let dy = Tensor::new(node.value.dims(), g)?;
                    let dx = kernels::upsample_nearest2_backward(self.value(*input).dims(), &dy);
                    acc.add(*input, dx.data());
                }
                Op::GlobalAvgPool(input) => {
                    let x = self.value(*input);
                    let plane = x.height() * x.width();
                    let inv = T::one() / T::from_usize(plane).unwrap();
                    let dx: Vec<T> = (0..x.numel()).map(|i| g[i / plane] * inv).collect();
                    acc.add(*input, &dx);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (x, w) = (self.value(*input), self.value(*weight));
                    let (n, c, k) = (x.batch(), x.channels(), w.batch());
                    if self.needs(*input) {
                        let mut dx = vec![T::zero(); n * c];
                        T::gemm(
                            n, k, c, T::one(), &g, k as isize, 1, w.data(), c as isize, 1,
                            T::zero(), &mut dx, c as isize, 1,
                        );
                        acc.add(*input, &dx);
                    }
                    let mut dw = vec![T::zero(); k * c];
                    T::gemm(
                        k, n, c, T::one(), &g, 1, k as isize, x.data(), c as isize, 1,
                        T::zero(), &mut dw, c as isize, 1,
                    );
                    acc.add(*weight, &dw);
                    let mut db = vec![T::zero(); k];
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    acc.add(*bias, &db);
                }
                Op::Norm {
                    input,
                    gamma,
                    alpha,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let x = self.value(*input);
                    let [n, c, h, w] = x.dims();
                    let plane = h * w;
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dalpha = vec![T::zero(); c];
                    for i in 0..g.len() {
                        let ch = (i / plane) % c;
                        dgamma[ch] += g[i] * xhat[i];
                        dalpha[ch] += g[i];
                    }
                    if self.needs(*input) {
                        let mut dx = vec![T::zero(); g.len()];
                        if *batch_stats {
                            let m = T::from_usize(n * plane).unwrap();
                            for ch in 0..c {
                                // dx̂ = dy·γ;  Σdx̂ = γ·Σdy;  Σdx̂·x̂ = γ·Σdy·x̂
                                let scale = gam[ch] * inv_std[ch] / m;
                                for s in 0..n {
                                    let base = (s * c + ch) * plane;
                                    for i in base..base + plane {
                                        dx[i] = scale
                                            * (m * g[i] - dalpha[ch] - xhat[i] * dgamma[ch]);
                                    }
                                }
                            }
                        } else {
                            for i in 0..g.len() {
                                let ch = (i / plane) % c;
                                dx[i] = g[i] * gam[ch] * inv_std[ch];
                            }
                        }
                        acc.add(*input, &dx);
                    }
                    acc.add(*gamma, &dgamma);
                    acc.add(*alpha, &dalpha);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = self.value(*logits).channels();
                    let scale = g[0] / T::from_usize(labels.len()).unwrap();
                    let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (row, &l) in labels.iter().enumerate() {
                        dz[row * k + l] -= scale;
                    }
                    acc.add(*logits, &dz);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    let total = node.value.sample_len();
                    let n = node.value.batch();
                    for &p in parts {
                        let len = self.value(p).sample_len();
                        let mut dp = Vec::with_capacity(n * len);
                        for s in 0..n {
                            let base = s * total + offset;
                            dp.extend_from_slice(&g[base..base + len]);
                        }
                        acc.add(p, &dp);
                        offset += len;
                    }
                }
                Op::DotConst { input, weights } => {
                    let dx: Vec<T> = weights.data().iter().map(|&r| r * g[0]).collect();
                    acc.add(*input, &dx);
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

struct Accumulator<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<T: Scalar> Accumulator<'_, T> {
    fn add(&mut self, var: Var, g: &[T]) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut self.grads[var.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}
