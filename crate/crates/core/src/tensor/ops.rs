//! Tensor-level operations with their reverse passes.
//!
//! Spatial layout is `[C][H][W]`; batched inputs add a leading `B` axis.

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvScratch, ConvShape};
use super::{ParamGroup, Parameter, Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn chw(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] if h >= 1 && w >= 1 => Ok((c, h, w)),
        _ => Err(Error::dim(op, format!("expected [C, H, W] with H, W >= 1, got {:?}", t.shape()))),
    }
}

fn kernel_dims(op: &'static str, kernel: &Tensor<impl Real>, c_in: usize) -> Result<(usize, usize)> {
    match *kernel.shape() {
        [c_out, ci, k, k2] if ci == c_in && k == k2 && (k == 1 || k == 3) => Ok((c_out, k)),
        _ => Err(Error::dim(
            op,
            format!("kernel {:?} incompatible with {c_in} input channels (want [C_out, {c_in}, 3, 3])", kernel.shape()),
        )),
    }
}

/// Stride-1 zero-padded convolution without bias. Output keeps the input's spatial dims.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw("conv2d", input)?;
    let (c_out, k) = kernel_dims("conv2d", kernel, c)?;
    let mut out = Tensor::zeros(&[c_out, h, w]);
    kernels::conv_forward(input.data(), ConvShape { c_in: c, c_out, h, w, k }, kernel.data(), out.data_mut(), &mut ConvScratch::new());
    Ok(out)
}

/// Returns `(grad_input, grad_kernel)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = chw("conv2d_backward", input)?;
    let (c_out, k) = kernel_dims("conv2d_backward", kernel, c)?;
    if grad_out.shape() != [c_out, h, w] {
        return Err(Error::dim("conv2d_backward", format!("grad {:?}", grad_out.shape())));
    }
    let mut gx = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    kernels::conv_backward(
        input.data(),
        ConvShape { c_in: c, c_out, h, w, k },
        kernel.data(),
        grad_out.data(),
        Some(gx.data_mut()),
        gk.data_mut(),
        &mut ConvScratch::new(),
    );
    Ok((gx, gk))
}

fn depthwise_dims(op: &'static str, input: &Tensor<impl Real>, kernel: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = chw(op, input)?;
    if kernel.shape() != [c, 3, 3] {
        return Err(Error::dim(op, format!("kernel {:?} for {c} channels (want [{c}, 3, 3])", kernel.shape())));
    }
    Ok((c, h, w))
}

/// One linear 3x3 filter per channel, zero-padded, no bias.
pub fn depthwise_conv3x3<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = depthwise_dims("depthwise_conv3x3", input, kernel)?;
    let mut out = Tensor::zeros(input.shape());
    kernels::depthwise_forward(input.data(), c, h, w, kernel.data(), out.data_mut());
    Ok(out)
}

pub fn depthwise_conv3x3_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = depthwise_dims("depthwise_conv3x3_backward", input, kernel)?;
    if grad_out.shape() != input.shape() {
        return Err(Error::dim("depthwise_conv3x3_backward", format!("grad {:?}", grad_out.shape())));
    }
    let mut gx = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    kernels::depthwise_backward(input.data(), c, h, w, kernel.data(), grad_out.data(), Some(gx.data_mut()), gk.data_mut());
    Ok((gx, gk))
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    out.clear_grad();
    kernels::relu_inplace(out.data_mut());
    out
}

pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    kernels::relu_backward_inplace(output.data(), g.data_mut());
    g
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(kernels::sigmoid)
}

pub fn sigmoid_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    kernels::sigmoid_backward_inplace(output.data(), g.data_mut());
    g
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, ha, wa) = chw("concat_channels", a)?;
    let (cb, hb, wb) = match *b.shape() {
        [0] | [] => return Ok(a.clone()),
        _ => chw("concat_channels", b)?,
    };
    if (ha, wa) != (hb, wb) {
        return Err(Error::dim("concat_channels", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, ha, wa], data)
}

/// Splits the gradient of a channel concat back into its two parts.
pub fn concat_channels_backward<T: Real>(grad_out: &Tensor<T>, a_channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = chw("concat_channels_backward", grad_out)?;
    if a_channels > c {
        return Err(Error::dim("concat_channels_backward", format!("{a_channels} > {c}")));
    }
    let split = a_channels * h * w;
    Ok((
        Tensor::from_vec(&[a_channels, h, w], grad_out.data()[..split].to_vec())?,
        Tensor::from_vec(&[c - a_channels, h, w], grad_out.data()[split..].to_vec())?,
    ))
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dim("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.clear_grad();
    kernels::add_inplace(out.data_mut(), b.data());
    Ok(out)
}

/// Maximum of an `[H, W]` map and its first row-major location.
pub fn global_max_pool_with_arg<T: Real>(map: &Tensor<T>) -> Result<(T, (usize, usize))> {
    let w = match *map.shape() {
        [_, w] => w,
        _ => return Err(Error::dim("global_max_pool", format!("expected [H, W], got {:?}", map.shape()))),
    };
    let (v, i) = kernels::argmax(map.data()).ok_or(Error::Empty("similarity map"))?;
    Ok((v, (i / w, i % w)))
}

/// Gradient of the pooled value: `grad` at the argmax cell, zero elsewhere.
pub fn global_max_pool_backward<T: Real>(shape: &[usize], loc: (usize, usize), grad: T) -> Result<Tensor<T>> {
    let mut g = Tensor::zeros(shape);
    let w = match *shape {
        [h, w] if loc.0 < h && loc.1 < w => w,
        _ => return Err(Error::dim("global_max_pool_backward", format!("{loc:?} outside {shape:?}"))),
    };
    g.data_mut()[loc.0 * w + loc.1] = grad;
    Ok(g)
}

/// Bias-free matrix-vector product `weight [K, N] * input [N]`.
pub fn linear<T: Real>(input: &[T], weight: &Tensor<T>) -> Result<Vec<T>> {
    let (k, n) = match *weight.shape() {
        [k, n] if n == input.len() => (k, n),
        _ => return Err(Error::dim("linear", format!("weight {:?}, input {}", weight.shape(), input.len()))),
    };
    let w = weight.data();
    Ok((0..k).map(|r| w[r * n..(r + 1) * n].iter().zip(input).map(|(&a, &b)| a * b).sum()).collect())
}

/// Returns `(grad_input, grad_weight)`.
pub fn linear_backward<T: Real>(input: &[T], weight: &Tensor<T>, grad_out: &[T]) -> Result<(Vec<T>, Tensor<T>)> {
    let (k, n) = match *weight.shape() {
        [k, n] if n == input.len() && k == grad_out.len() => (k, n),
        _ => return Err(Error::dim("linear_backward", format!("weight {:?}", weight.shape()))),
    };
    let w = weight.data();
    let mut gx = vec![T::zero(); n];
    let mut gw = Tensor::zeros(&[k, n]);
    for r in 0..k {
        let g = grad_out[r];
        for c in 0..n {
            gx[c] = gx[c] + w[r * n + c] * g;
        }
        for (dst, &x) in gw.data_mut()[r * n..(r + 1) * n].iter_mut().zip(input) {
            *dst = g * x;
        }
    }
    Ok((gx, gw))
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`; gradient is `softmax - one_hot`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    let loss = (lse - logits[label]).max(T::zero());
    let mut grad = softmax(logits);
    grad[label] = grad[label] - T::one();
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel batch normalization with learned scale/shift and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Real = f32> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub initialized: bool,
}

/// What the reverse pass of a training-mode batch norm needs.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch: usize,
    hw: usize,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, channels: usize, group: ParamGroup) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), group, Tensor::full(&[channels], T::one())),
            beta: Parameter::new(format!("{name}.beta"), group, Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    fn check(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match *shape {
            [b, c, h, w] if c == self.channels() => Ok((b, h * w)),
            _ => Err(Error::dim("batch_norm", format!("input {shape:?}, {} channels", self.channels()))),
        }
    }

    /// Training-mode normalization of a `[B, C, H, W]` batch in place; updates running stats.
    pub fn forward_train_inplace(&mut self, x: &mut [T], shape: &[usize]) -> Result<BnCache<T>> {
        let (b, hw) = self.check(shape)?;
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let c = self.channels();
        let stats = kernels::batch_channel_stats(x, b, c, hw);
        let n = (b * hw) as f64;
        let m = BN_MOMENTUM;
        let mut inv_std = Vec::with_capacity(c);
        for (ch, st) in stats.iter().enumerate() {
            let unbiased = if n > 1.0 { st.var * n / (n - 1.0) } else { st.var };
            if self.initialized {
                let rm = self.running_mean[ch].to_f64().unwrap_or(0.0);
                let rv = self.running_var[ch].to_f64().unwrap_or(1.0);
                self.running_mean[ch] = T::of((1.0 - m) * rm + m * st.mean);
                self.running_var[ch] = T::of((1.0 - m) * rv + m * unbiased);
            } else {
                self.running_mean[ch] = T::of(st.mean);
                self.running_var[ch] = T::of(unbiased);
            }
            inv_std.push(T::of(1.0 / (st.var + BN_EPS).sqrt()));
        }
        self.initialized = true;
        let mut xhat = vec![T::zero(); x.len()];
        let (gamma, beta) = (self.gamma.values(), self.beta.values());
        for s in 0..b {
            for ch in 0..c {
                let mean = T::of(stats[ch].mean);
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x[i] - mean) * inv_std[ch];
                    xhat[i] = xh;
                    x[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        Ok(BnCache { xhat, inv_std, batch: b, hw })
    }

    /// Inference-mode normalization with running statistics.
    pub fn forward_infer_inplace(&self, x: &mut [T], shape: &[usize]) -> Result<()> {
        let (b, hw) = self.check(shape)?;
        if !self.initialized {
            return Err(Error::UninitializedStats);
        }
        let c = self.channels();
        let (gamma, beta) = (self.gamma.values(), self.beta.values());
        let eps = T::of(BN_EPS);
        for ch in 0..c {
            let scale = gamma[ch] / (self.running_var[ch] + eps).sqrt();
            let shift = beta[ch] - self.running_mean[ch] * scale;
            for s in 0..b {
                for v in &mut x[(s * c + ch) * hw..][..hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(())
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        let mut out = input.clone();
        out.clear_grad();
        let shape = input.shape().to_vec();
        match mode {
            BnMode::Train => {
                let cache = self.forward_train_inplace(out.data_mut(), &shape)?;
                Ok((out, Some(cache)))
            }
            BnMode::Infer => {
                self.forward_infer_inplace(out.data_mut(), &shape)?;
                Ok((out, None))
            }
        }
    }

    /// Reverse pass of a training-mode forward: overwrites `g` with the input
    /// gradient and accumulates gamma/beta gradients.
    pub fn backward_inplace(&mut self, cache: &BnCache<T>, g: &mut [T]) {
        let c = self.channels();
        let (b, hw) = (cache.batch, cache.hw);
        let n = T::of((b * hw) as f64);
        let gamma: Vec<T> = self.gamma.values().to_vec();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mut sg, mut sgx) = (0.0f64, 0.0f64);
            for s in 0..b {
                let off = (s * c + ch) * hw;
                for (&gi, &xh) in g[off..off + hw].iter().zip(&cache.xhat[off..off + hw]) {
                    sg += gi.to_f64().unwrap_or(f64::NAN);
                    sgx += (gi * xh).to_f64().unwrap_or(f64::NAN);
                }
            }
            dbeta[ch] = T::of(sg);
            dgamma[ch] = T::of(sgx);
            let k = gamma[ch] * cache.inv_std[ch] / n;
            for s in 0..b {
                let off = (s * c + ch) * hw;
                for (gi, &xh) in g[off..off + hw].iter_mut().zip(&cache.xhat[off..off + hw]) {
                    *gi = k * (n * *gi - dbeta[ch] - xh * dgamma[ch]);
                }
            }
        }
        kernels::add_inplace(self.gamma.grad_mut(), &dgamma);
        kernels::add_inplace(self.beta.grad_mut(), &dbeta);
    }

    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let mut g = grad_out.clone();
        self.backward_inplace(cache, g.data_mut());
        g
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.iter().map(|v| U::of(v.to_f64().unwrap_or(0.0))).collect(),
            running_var: self.running_var.iter().map(|v| U::of(v.to_f64().unwrap_or(1.0))).collect(),
            initialized: self.initialized,
        }
    }
}
