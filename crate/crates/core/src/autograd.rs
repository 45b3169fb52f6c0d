//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Each
//! recorded value is addressed by a [`Var`] handle. [`Tape::backward`]
//! consumes the tape and walks it in reverse, producing [`Gradients`] for
//! every recorded value that depends on a `requires_grad` leaf.
//!
//! Parameters enter the tape through [`Tape::param`], which copies the
//! current value out of a [`ParamStore`] and remembers where it came from so
//! that [`Gradients::accumulate_into`] can add the result back.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Upsample { x: Var, factor: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Sum(Var),
    Concat { xs: Vec<Var>, axis: usize },
    IndexSelect { x: Var, axis: usize, idx: Vec<usize> },
    IndexReplace { base: Var, src: Var, axis: usize, idx: Vec<usize> },
    WeightedSum { xs: Vec<Var>, w: Var },
    CrossEntropy { logits: Var, labels: Vec<u8>, ignore: u8, n_valid: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_check(op: &'static str, dim: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            op,
            dim,
            expected,
            found,
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    shape_check(op, "rank", a.rank(), b.rank())?;
    for (x, y) in a.shape().iter().zip(b.shape()) {
        shape_check(op, "extent", *x, *y)?;
    }
    Ok(())
}

fn axis_check(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(invalid(op, alloc::format!("axis {axis} out of range for rank {}", t.rank())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked when the tensor requires them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let mut value = t;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Brings a stored parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.tensor(id);
        let value = Tensor::new(src.shape(), src.data().to_vec())
            .expect("stored tensor is consistent")
            .with_requires_grad(src.requires_grad());
        let v = self.leaf(value);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// 2-D convolution without bias. `weight` is `[cout, cin/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, cin, h, wd] = self.value(x).dims4(OP)?;
        let [cout, cin_g, kh, kw] = self.value(w).dims4(OP)?;
        if groups == 0 || cin % groups != 0 {
            return Err(invalid(OP, alloc::format!("{cin} input channels not divisible by {groups} groups")));
        }
        if cout % groups != 0 {
            return Err(invalid(OP, alloc::format!("{cout} output channels not divisible by {groups} groups")));
        }
        shape_check(OP, "weight input channels", cin / groups, cin_g)?;
        shape_check(OP, "kernel width", kh, kw)?;
        if stride == 0 {
            return Err(invalid(OP, "stride must be positive"));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(invalid(OP, "kernel larger than padded input"));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            stride,
            pad: padding,
            groups,
            oh,
            ow,
        };
        let data = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let out = Tensor::new(&[n, cout, oh, ow], data)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Bilinear upsampling by an integer power-of-two factor (half-pixel centers).
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        const OP: &str = "bilinear_upsample";
        if factor < 1 || !factor.is_power_of_two() {
            return Err(invalid(OP, alloc::format!("factor must be a power of two >= 1, got {factor}")));
        }
        if factor == 1 {
            let out = self.value(x).clone();
            return Ok(self.push(out, Op::Upsample { x, factor }, &[x]));
        }
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        let data = kernels::bilinear_resize(self.value(x).data(), n * c, h, w, h * factor, w * factor);
        let out = Tensor::new(&[n, c, h * factor, w * factor], data)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    /// Per-channel batch normalization of an NCHW tensor.
    ///
    /// `running` holds the running mean followed by the running variance
    /// (length `2·C`). In training mode batch statistics are used and the
    /// running values are updated; otherwise the running values are used.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: &mut [f64], training: bool) -> Result<Var> {
        const OP: &str = "batch_norm";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        shape_check(OP, "scale channels", c, self.value(gamma).numel())?;
        shape_check(OP, "shift channels", c, self.value(beta).numel())?;
        shape_check(OP, "running statistics", 2 * c, running.len())?;
        let m = n * h * w;
        if training && m <= 1 {
            return Err(Error::DegenerateVariance { op: OP });
        }
        let xd = self.value(x).data();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if training {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                }
                let mu = s / m as f64;
                let mut v = 0.0;
                for b in 0..n {
                    for &val in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        v += (val - mu) * (val - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = v / m as f64;
            }
            let (rm, rv) = running.split_at_mut(c);
            let unbias = m as f64 / (m as f64 - 1.0);
            for ch in 0..c {
                rm[ch] = BN_MOMENTUM * rm[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
                rv[ch] = BN_MOMENTUM * rv[ch] + (1.0 - BN_MOMENTUM) * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(&running[..c]);
            var.copy_from_slice(&running[c..]);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in range {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, training }, &[x, gamma, beta]))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        self.push(out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// Stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, kernels::softplus, Op::Softplus(x))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        axis_check("softmax", self.value(x), axis)?;
        let t = self.value(x);
        let (outer, len, inner) = kernels::split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| out[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = libm::exp(out[at(k)] - mx);
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[at(k)] /= s;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        axis_check("log_softmax", self.value(x), axis)?;
        let t = self.value(x);
        let (outer, len, inner) = kernels::split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| out[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|k| libm::exp(out[at(k)] - mx)).sum();
                let lse = mx + libm::log(s);
                for k in 0..len {
                    out[at(k)] -= lse;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::LogSoftmax { x, axis }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum of several same-shaped values.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| invalid("add_all", "no inputs"))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = self.value(*xs.first().ok_or_else(|| invalid(OP, "no inputs"))?);
        axis_check(OP, first, axis)?;
        let mut shape = first.shape().to_vec();
        let mut total = 0;
        for &v in xs {
            let t = self.value(v);
            shape_check(OP, "rank", shape.len(), t.rank())?;
            for (d, (&a, &b)) in shape.iter().zip(t.shape()).enumerate() {
                if d != axis {
                    shape_check(OP, "non-concatenated extent", a, b)?;
                }
            }
            total += t.shape()[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Picks the entries `idx` along `axis`.
    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        const OP: &str = "index_select";
        let t = self.value(x);
        axis_check(OP, t, axis)?;
        let (outer, len, inner) = kernels::split_axis(t.shape(), axis);
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(invalid(OP, alloc::format!("index {bad} out of range {len}")));
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = idx.len();
        let mut data = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &k in idx {
                let s = (o * len + k) * inner;
                data.extend_from_slice(&t.data()[s..s + inner]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::IndexSelect { x, axis, idx: idx.to_vec() }, &[x]))
    }

    /// Copy of `base` whose entries `idx` along `axis` are taken from `src`.
    /// All other entries are copied bit-for-bit from `base`.
    pub fn index_replace(&mut self, base: Var, src: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        const OP: &str = "index_replace";
        let (tb, ts) = (self.value(base), self.value(src));
        axis_check(OP, tb, axis)?;
        shape_check(OP, "rank", tb.rank(), ts.rank())?;
        shape_check(OP, "replaced extent", idx.len(), ts.shape()[axis])?;
        for d in 0..tb.rank() {
            if d != axis {
                shape_check(OP, "extent", tb.shape()[d], ts.shape()[d])?;
            }
        }
        let (outer, len, inner) = kernels::split_axis(tb.shape(), axis);
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(invalid(OP, alloc::format!("index {bad} out of range {len}")));
        }
        let mut data = tb.data().to_vec();
        for o in 0..outer {
            for (j, &k) in idx.iter().enumerate() {
                let d = (o * len + k) * inner;
                let s = (o * idx.len() + j) * inner;
                data[d..d + inner].copy_from_slice(&ts.data()[s..s + inner]);
            }
        }
        let out = Tensor::new(tb.shape(), data)?;
        Ok(self.push(out, Op::IndexReplace { base, src, axis, idx: idx.to_vec() }, &[base, src]))
    }

    /// `Σ_k w[k]·xs[k]` for same-shaped `xs` and a weight vector `w`.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Result<Var> {
        const OP: &str = "weighted_sum";
        let first = *xs.first().ok_or_else(|| invalid(OP, "no inputs"))?;
        shape_check(OP, "weight count", xs.len(), self.value(w).numel())?;
        for &x in xs {
            same_shape(OP, self.value(first), self.value(x))?;
        }
        let wv = self.value(w).data();
        let mut data = vec![0.0; self.value(first).numel()];
        for (k, &x) in xs.iter().enumerate() {
            let c = wv[k];
            for (d, v) in data.iter_mut().zip(self.value(x).data()) {
                *d += c * v;
            }
        }
        let out = Tensor::new(self.value(first).shape(), data)?;
        let mut inputs = xs.to_vec();
        inputs.push(w);
        Ok(self.push(out, Op::WeightedSum { xs: xs.to_vec(), w }, &inputs))
    }

    /// Mean pixelwise cross-entropy of `[N, C, H, W]` logits against
    /// `N·H·W` labels, skipping pixels labelled `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let [n, c, h, w] = self.value(logits).dims4(OP)?;
        shape_check(OP, "label count", n * h * w, labels.len())?;
        let plane = h * w;
        let ld = self.value(logits).data();
        let mut total = 0.0;
        let mut n_valid = 0;
        for b in 0..n {
            for p in 0..plane {
                let y = labels[b * plane + p];
                if y == ignore {
                    continue;
                }
                if y as usize >= c {
                    return Err(invalid(OP, alloc::format!("label {y} outside [0, {c})")));
                }
                let at = |k: usize| ld[(b * c + k) * plane + p];
                let mx = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + libm::log((0..c).map(|k| libm::exp(at(k) - mx)).sum::<f64>());
                total += lse - at(y as usize);
                n_valid += 1;
            }
        }
        if n_valid == 0 {
            return Err(Error::AllIgnored);
        }
        let out = Tensor::scalar(total / n_valid as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, labels: labels.to_vec(), ignore, n_valid },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Vec::new();
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.into_iter().zip(grads) {
            let keep = node.requires_grad && matches!(node.op, Op::Leaf);
            let g = if keep { g } else { None };
            if let (Some(pid), Some(_)) = (node.param, g.as_ref()) {
                params.push((pid, out.len()));
            }
            out.push(g);
        }
        Ok(Gradients { grads: out, params })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&delta).for_each(|(b, d)| *b += d),
            slot @ None => *slot = Some(delta),
        };
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let (gi, gw) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    needs(*x),
                    needs(*w),
                );
                if let Some(gi) = gi {
                    acc(*x, gi);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
            }
            Op::Upsample { x, factor } => {
                if *factor == 1 {
                    acc(*x, g.to_vec());
                } else {
                    let [n, c, h, w] = self.value(*x).dims4("bilinear_upsample").expect("checked");
                    let gi = kernels::bilinear_resize_backward(g, n * c, h, w, h * factor, w * factor);
                    acc(*x, gi);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let [n, c, h, w] = self.value(*x).dims4("batch_norm").expect("checked");
                let plane = h * w;
                let m = (n * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for j in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if needs(*gamma) {
                    acc(*gamma, sum_gx.clone());
                }
                if needs(*beta) {
                    acc(*beta, sum_g.clone());
                }
                if needs(*x) {
                    let mut gi = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch];
                            for j in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                                gi[j] = if *training {
                                    k * (g[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    acc(*x, gi);
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                acc(*x, g.iter().zip(xd).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => {
                let yd = out.data();
                acc(*x, g.iter().zip(yd).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Softplus(x) => {
                let xd = self.value(*x).data();
                acc(*x, g.iter().zip(xd).map(|(g, &v)| g * kernels::sigmoid(v)).collect());
            }
            Op::Affine { x, scale } => acc(*x, g.iter().map(|g| g * scale).collect()),
            Op::Softmax { x, axis } => {
                let y = out.data();
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + ii;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gi[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*x, gi);
            }
            Op::LogSoftmax { x, axis } => {
                let y = out.data();
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + ii;
                        let gs: f64 = (0..len).map(|k| g[at(k)]).sum();
                        for k in 0..len {
                            gi[at(k)] = g[at(k)] - libm::exp(y[at(k)]) * gs;
                        }
                    }
                }
                acc(*x, gi);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bd = self.value(*b).data();
                    acc(*a, g.iter().zip(bd).map(|(g, v)| g * v).collect());
                }
                if needs(*b) {
                    let ad = self.value(*a).data();
                    acc(*b, g.iter().zip(ad).map(|(g, v)| g * v).collect());
                }
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = kernels::split_axis(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                for &v in xs {
                    let len = self.value(v).shape()[*axis];
                    if needs(v) {
                        let mut gi = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gi.extend_from_slice(&g[s..s + len * inner]);
                        }
                        acc(v, gi);
                    }
                    offset += len;
                }
            }
            Op::IndexSelect { x, axis, idx } => {
                let (outer, len, inner) = kernels::split_axis(self.value(*x).shape(), *axis);
                let mut gi = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for (j, &k) in idx.iter().enumerate() {
                        let d = (o * len + k) * inner;
                        let s = (o * idx.len() + j) * inner;
                        for t in 0..inner {
                            gi[d + t] += g[s + t];
                        }
                    }
                }
                acc(*x, gi);
            }
            Op::IndexReplace { base, src, axis, idx } => {
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                if needs(*src) {
                    let mut gs = Vec::with_capacity(outer * idx.len() * inner);
                    for o in 0..outer {
                        for &k in idx {
                            let s = (o * len + k) * inner;
                            gs.extend_from_slice(&g[s..s + inner]);
                        }
                    }
                    acc(*src, gs);
                }
                if needs(*base) {
                    let mut gb = g.to_vec();
                    for o in 0..outer {
                        for &k in idx {
                            let s = (o * len + k) * inner;
                            gb[s..s + inner].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    acc(*base, gb);
                }
            }
            Op::WeightedSum { xs, w } => {
                let wv = self.value(*w).data().to_vec();
                if needs(*w) {
                    let gw = xs
                        .iter()
                        .map(|&x| self.value(x).data().iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*w, gw);
                }
                for (k, &x) in xs.iter().enumerate() {
                    if needs(x) {
                        acc(x, g.iter().map(|v| v * wv[k]).collect());
                    }
                }
            }
            Op::CrossEntropy { logits, labels, ignore, n_valid } => {
                let t = self.value(*logits);
                let [n, c, h, w] = t.dims4("cross_entropy").expect("checked");
                let plane = h * w;
                let ld = t.data();
                let scale = g[0] / *n_valid as f64;
                let mut gi = vec![0.0; ld.len()];
                for b in 0..n {
                    for p in 0..plane {
                        let y = labels[b * plane + p];
                        if y == *ignore {
                            continue;
                        }
                        let at = |k: usize| (b * c + k) * plane + p;
                        let mx = (0..c).map(|k| ld[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = (0..c).map(|k| libm::exp(ld[at(k)] - mx)).sum();
                        for k in 0..c {
                            let pk = libm::exp(ld[at(k)] - mx) / s;
                            let onehot = if k == y as usize { 1.0 } else { 0.0 };
                            gi[at(k)] = scale * (pk - onehot);
                        }
                    }
                }
                acc(*logits, gi);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`] for every tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tracked leaf.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds (`+=`) every parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.tensor_mut(pid).accumulate_grad(g);
            }
        }
    }
}
