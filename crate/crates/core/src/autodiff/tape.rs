use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics from a training-mode batch-norm pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, cols: Vec<f64> },
    AddChannelBias { input: Var, bias: Var },
    BatchNormTrain { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    LeakyRelu { input: Var, slope: f64 },
    Sigmoid { input: Var },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Sum { input: Var },
    Mean { input: Var },
    AbsSum { input: Var },
    Reshape { input: Var },
    NchwToNhwc { input: Var },
    /// Scalar function of one input whose local gradient was computed with the value.
    Custom { input: Var, local_grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Reverse-mode gradients are obtained by
/// replaying it backwards from a scalar output.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradTape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of recorded operations replayed during the backward pass.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(format!("{what} expects a 4-d tensor, got {s:?}"))),
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a value that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, false)
    }

    /// Records a trainable value.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, true)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c_in, h, w) = dims4(self.value(input), "conv2d input")?;
        let (c_out, k_in, kh, kw) = dims4(self.value(kernel), "conv2d kernel")?;
        if c_in != k_in {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {:?} vs kernel {:?}",
                self.value(input).shape(),
                self.value(kernel).shape()
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        };
        let (out, cols) =
            kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let rg = self.rg(input) || self.rg(kernel);
        let value = Tensor::from_parts(vec![n, c_out, geom.h_out, geom.w_out], out);
        Ok(self.push(value, Op::Conv2d { input, kernel, geom, cols }, rg))
    }

    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(input), "bias add")?;
        let b = self.value(bias).data();
        if b.len() != c {
            return Err(Error::shape(format!("bias of length {} for {c} channels", b.len())));
        }
        let mut out = self.value(input).data().to_vec();
        for (i, chunk) in out.chunks_mut(h * w).enumerate() {
            let add = b[i % c];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(vec![n, c, h, w], out), Op::AddChannelBias { input, bias }, rg))
    }

    fn check_bn(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = dims4(self.value(input), "batch norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let len = self.value(v).len();
            if len != c {
                return Err(Error::shape(format!(
                    "batch norm {name} has {len} channels, input {:?} has {c}",
                    self.value(input).shape()
                )));
            }
        }
        Ok((n, c, h * w))
    }

    /// Training-mode batch normalization over the `N·H·W` positions of each channel.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        epsilon: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, hw) = self.check_bn(input, gamma, beta)?;
        let m = n * hw;
        if m < 2 {
            return Err(Error::shape("training-mode batch norm needs N·H·W ≥ 2"));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for img in 0..n {
                s += x[(img * c + ch) * hw..(img * c + ch + 1) * hw].iter().sum::<f64>();
            }
            let mu = s / m as f64;
            let mut ss = 0.0;
            for img in 0..n {
                for &v in &x[(img * c + ch) * hw..(img * c + ch + 1) * hw] {
                    ss += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = ss / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (i, (xh, o)) in xhat.chunks_mut(hw).zip(out.chunks_mut(hw)).enumerate() {
            let ch = i % c;
            let src = &x[i * hw..(i + 1) * hw];
            for j in 0..hw {
                xh[j] = (src[j] - mean[ch]) * inv_std[ch];
                o[j] = g[ch] * xh[j] + b[ch];
            }
        }
        let unbiased = m as f64 / (m - 1) as f64;
        let stats = BatchStats { mean, var: var.iter().map(|v| v * unbiased).collect() };
        let shape = self.value(input).shape().to_vec();
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let var = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormTrain { input, gamma, beta, xhat, inv_std },
            rg,
        );
        Ok((var, stats))
    }

    /// Inference-mode batch normalization using fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        epsilon: f64,
    ) -> Result<Var> {
        let (_, c, hw) = self.check_bn(input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch norm running statistics do not match channel count"));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (i, (xh, o)) in xhat.chunks_mut(hw).zip(out.chunks_mut(hw)).enumerate() {
            let ch = i % c;
            let src = &x[i * hw..(i + 1) * hw];
            for j in 0..hw {
                xh[j] = (src[j] - mean[ch]) * inv_std[ch];
                o[j] = g[ch] * xh[j] + b[ch];
            }
        }
        let shape = self.value(input).shape().to_vec();
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormEval { input, gamma, beta, xhat, inv_std },
            rg,
        ))
    }

    fn unary(&mut self, input: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(input);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(input);
        self.push(value, op, rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        self.unary(input, Op::LeakyRelu { input, slope }, |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, Op::Sigmoid { input }, sigmoid)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.unary(input, Op::Scale { input, factor }, |v| v * factor)
    }

    pub fn max_pool2d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let dims = dims4(self.value(input), "max_pool2d")?;
        if size == 0 || stride == 0 || size > dims.2 || size > dims.3 {
            return Err(Error::shape(format!(
                "max_pool2d window {size} (stride {stride}) does not fit input {:?}",
                self.value(input).shape()
            )));
        }
        let (out, argmax, h_out, w_out) =
            kernels::max_pool_forward(self.value(input).data(), dims, size, stride);
        let rg = self.rg(input);
        let value = Tensor::from_parts(vec![dims.0, dims.1, h_out, w_out], out);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Mean { input }, rg)
    }

    /// `Σ|x|`, with subgradient `sign(x)` and `sign(0) = 0`.
    pub fn abs_sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|v| v.abs()).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::AbsSum { input }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).detached().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Flattens all but the leading dimension.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let lead = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(input, &[lead, rest])
    }

    pub fn nchw_to_nhwc(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(input), "nchw_to_nhwc")?;
        let src = self.value(input).data();
        let mut out = vec![0.0; src.len()];
        for img in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[((img * h + y) * w + x) * c + ch] = src[((img * c + ch) * h + y) * w + x];
                    }
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_parts(vec![n, h, w, c], out), Op::NchwToNhwc { input }, rg))
    }

    /// Records a scalar-valued function of `input` whose gradient is already known.
    pub fn custom_scalar(&mut self, input: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(input).len() {
            return Err(Error::shape("custom op gradient length differs from its input"));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::Custom { input, local_grad }, rg))
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = self.value(loss);
        if !out.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn take_acc(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom, cols } => {
                let kdata = self.value(*kernel).data();
                let mut kg = self.take_acc(grads, *kernel);
                let mut ig = self.take_acc(grads, *input);
                kernels::conv2d_backward(g, kdata, cols, geom, kg.as_deref_mut(), ig.as_deref_mut());
                if kg.is_some() {
                    grads[kernel.0] = kg;
                }
                if ig.is_some() {
                    grads[input.0] = ig;
                }
            }
            Op::AddChannelBias { input, bias } => {
                let shape = self.value(*input).shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                if let Some(ig) = self.acc(grads, *input) {
                    ig.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(bg) = self.acc(grads, *bias) {
                    for (i, chunk) in g.chunks(hw).enumerate() {
                        bg[i % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::BatchNormTrain { input, gamma, beta, xhat, inv_std } => {
                let shape = self.value(*input).shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let m = (n * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (gc, xc)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = i % c;
                    for j in 0..hw {
                        dgamma[ch] += gc[j] * xc[j];
                        dbeta[ch] += gc[j];
                    }
                }
                if let Some(ig) = self.acc(grads, *input) {
                    for (i, ((dst, gc), xc)) in
                        ig.chunks_mut(hw).zip(g.chunks(hw)).zip(xhat.chunks(hw)).enumerate()
                    {
                        let ch = i % c;
                        let k = gam[ch] * inv_std[ch] / m;
                        for j in 0..hw {
                            dst[j] += k * (m * gc[j] - dbeta[ch] - xc[j] * dgamma[ch]);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    gg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
                }
                if let Some(bg) = self.acc(grads, *beta) {
                    bg.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
                }
            }
            Op::BatchNormEval { input, gamma, beta, xhat, inv_std } => {
                let c = self.value(*input).shape()[1];
                let hw = self.value(*input).shape()[2] * self.value(*input).shape()[3];
                let gam = self.value(*gamma).data().to_vec();
                if let Some(ig) = self.acc(grads, *input) {
                    for (i, (dst, gc)) in ig.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        let k = gam[i % c] * inv_std[i % c];
                        dst.iter_mut().zip(gc).for_each(|(a, b)| *a += k * b);
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (i, (gc, xc)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                        gg[i % c] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(bg) = self.acc(grads, *beta) {
                    for (i, gc) in g.chunks(hw).enumerate() {
                        bg[i % c] += gc.iter().sum::<f64>();
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                if let Some(ig) = self.acc(grads, *input) {
                    for ((d, &gv), &xv) in ig.iter_mut().zip(g).zip(x) {
                        *d += if xv > 0.0 { gv } else { slope * gv };
                    }
                }
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                if let Some(ig) = self.acc(grads, *input) {
                    for ((d, &gv), &yv) in ig.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if let Some(ig) = self.acc(grads, *input) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        ig[src] += gv;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(dst) = self.acc(grads, v) {
                        dst.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, gv), o) in dst.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                if let Some(dst) = self.acc(grads, *b) {
                    for ((d, gv), o) in dst.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(dst) = self.acc(grads, *input) {
                    dst.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor);
                }
            }
            Op::Sum { input } => {
                if let Some(dst) = self.acc(grads, *input) {
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { input } => {
                if let Some(dst) = self.acc(grads, *input) {
                    let k = g[0] / dst.len() as f64;
                    dst.iter_mut().for_each(|d| *d += k);
                }
            }
            Op::AbsSum { input } => {
                let x = self.value(*input).data();
                if let Some(dst) = self.acc(grads, *input) {
                    for (d, &xv) in dst.iter_mut().zip(x) {
                        *d += g[0] * sign(xv);
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(dst) = self.acc(grads, *input) {
                    dst.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::NchwToNhwc { input } => {
                let shape = self.value(*input).shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                if let Some(dst) = self.acc(grads, *input) {
                    for img in 0..n {
                        for ch in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    dst[((img * c + ch) * h + y) * w + x] +=
                                        g[((img * h + y) * w + x) * c + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Custom { input, local_grad } => {
                if let Some(dst) = self.acc(grads, *input) {
                    for (d, lg) in dst.iter_mut().zip(local_grad) {
                        *d += g[0] * lg;
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
