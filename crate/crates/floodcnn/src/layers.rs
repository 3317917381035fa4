//! Forward and backward passes for every layer type the architectures use:
//! convolution, max pooling, dense, ReLU, batch normalization, dropout, and
//! flatten, plus the softmax that turns logits into class probabilities.
//!
//! Layout is NHWC throughout. `backward` computes fresh gradients on every
//! call (no accumulation across calls) and must follow a `forward` on the
//! same layer; the layers cache whatever the backward pass needs.

use crate::error::{Error, Result};
use crate::optim::Rng;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_acc, Elem, Shape, Tensor};

/// Whether a pass is part of training or inference. Dropout and batch
/// normalization change behavior; everything else ignores it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Geometry of one convolution: filter count, kernel extents, stride, and
/// per-side zero padding (applied symmetrically to both sides of each axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(filters: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        if filters == 0 || kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config(format!(
                "conv spec: filters, kernel, and stride must be at least 1 (got {filters}, {kernel:?}, {stride:?})"
            )));
        }
        Ok(ConvSpec { filters, kernel, stride, padding })
    }

    /// Output spatial extents: floor((in + 2*pad - k) / s) + 1.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = out_extent(h, self.padding.0, self.kernel.0, self.stride.0)?;
        let ow = out_extent(w, self.padding.1, self.kernel.1, self.stride.1)?;
        Ok((oh, ow))
    }
}

pub(crate) fn out_extent(input: usize, pad: usize, kernel: usize, stride: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if span < kernel {
        return Err(Error::shape(format!(
            "window {kernel} exceeds padded extent {span} (input {input}, pad {pad})"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

/// One trainable parameter: value, same-shaped gradient slot, and whether L2
/// weight decay applies to it (weights yes; biases and batch-norm no).
pub struct TrainableParam<'a, T: Elem> {
    pub name: &'static str,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a mut Tensor<T>,
    pub weight_decay: bool,
}

pub trait Layer<T: Elem>: Send + Sync {
    fn kind(&self) -> &'static str;

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Gradient of the loss with respect to this layer's input, given the
    /// gradient with respect to its output. Also fills the layer's parameter
    /// gradient slots. Requires a prior `forward`.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    /// Persistent named tensors: parameters plus buffers such as running
    /// statistics. Order is stable; names are unique within the layer.
    fn state(&self) -> Vec<(&'static str, &Tensor<T>)> {
        Vec::new()
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        Vec::new()
    }

    fn trainable(&mut self) -> Vec<TrainableParam<'_, T>> {
        Vec::new()
    }

    fn param_count(&self) -> usize {
        0
    }
}

fn dims4<T: Elem>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let d = t.dims();
    if d.len() != 4 {
        return Err(Error::shape(format!("{what}: rank-4 [N,H,W,C] input required, got {}", t.shape())));
    }
    Ok((d[0], d[1], d[2], d[3]))
}

fn require_cache<'a, T>(cache: &'a Option<T>, kind: &str) -> Result<&'a T> {
    cache
        .as_ref()
        .ok_or_else(|| Error::State(format!("{kind}: backward called before forward")))
}

/// Row-wise softmax with max subtraction. Rejects non-finite logits.
pub fn softmax<T: Elem>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("softmax: rank-2 [N,K] input required, got {}", logits.shape())));
    }
    let n = logits.dims()[0];
    let k = logits.dims()[1];
    let mut out = Tensor::zeros(logits.shape().clone());
    for r in 0..n {
        let row = &logits.data()[r * k..(r + 1) * k];
        let mut m = row[0];
        for &z in row {
            if !z.is_finite() {
                return Err(Error::Numeric(format!("softmax: non-finite logit {z} in row {r}")));
            }
            if z > m {
                m = z;
            }
        }
        let orow = &mut out.data_mut()[r * k..(r + 1) * k];
        let mut sum = T::ZERO;
        for (o, &z) in orow.iter_mut().zip(row) {
            *o = (z - m).exp();
            sum = sum + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// 2-D convolution over NHWC input. Weight layout [kh,kw,Cin,Cout]; flattened
/// row-major that is exactly the [kh*kw*Cin, Cout] matrix the im2col product
/// needs, so forward is patch extraction plus one GEMM per sample.
pub struct Conv2d<T: Elem> {
    spec: ConvSpec,
    in_channels: usize,
    weight: Tensor<T>,
    bias: Tensor<T>,
    grad_weight: Tensor<T>,
    grad_bias: Tensor<T>,
    cached_input: Option<Tensor<T>>,
}

impl<T: Elem> Conv2d<T> {
    pub fn new(in_channels: usize, spec: ConvSpec, rng: &mut Rng) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::config("conv2d: in_channels must be at least 1"));
        }
        let (kh, kw) = spec.kernel;
        let fan_in = kh * kw * in_channels;
        let weight = crate::optim::he_uniform(Shape::new(&[kh, kw, in_channels, spec.filters])?, fan_in, rng)?;
        let bias = Tensor::zeros(Shape::new(&[spec.filters])?);
        let grad_weight = Tensor::zeros(weight.shape().clone());
        let grad_bias = Tensor::zeros(bias.shape().clone());
        Ok(Conv2d { spec, in_channels, weight, bias, grad_weight, grad_bias, cached_input: None })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    /// Copy the sample's receptive-field patches into `cols` laid out
    /// [oh*ow, kh*kw*cin], zero-filling positions that fall in the padding.
    fn im2col(&self, sample: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let cin = self.in_channels;
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let patch = kh * kw * cin;
        for v in cols.iter_mut() {
            *v = T::ZERO;
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * patch;
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((iy as usize) * w + ix as usize) * cin;
                        let dst = row + (ky * kw + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&sample[src..src + cin]);
                    }
                }
            }
        }
    }
}

impl<T: Elem> Layer<T> for Conv2d<T> {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, h, w, cin) = dims4(input, "conv2d")?;
        if cin != self.in_channels {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, layer expects {}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.spec.out_hw(h, w)?;
        let f = self.spec.filters;
        let patch = self.spec.kernel.0 * self.spec.kernel.1 * cin;

        let mut out = Tensor::zeros(Shape::new(&[n, oh, ow, f])?);
        let mut cols = vec![T::ZERO; oh * ow * patch];
        for b in 0..n {
            let sample = &input.data()[b * h * w * cin..(b + 1) * h * w * cin];
            self.im2col(sample, h, w, oh, ow, &mut cols);
            let orows = &mut out.data_mut()[b * oh * ow * f..(b + 1) * oh * ow * f];
            matmul_into(&cols, self.weight.data(), orows, oh * ow, patch, f);
            for row in orows.chunks_exact_mut(f) {
                for (o, &bv) in row.iter_mut().zip(self.bias.data()) {
                    *o = *o + bv;
                }
            }
        }
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = require_cache(&self.cached_input, "conv2d")?.clone();
        let (n, h, w, cin) = dims4(&input, "conv2d")?;
        let (oh, ow) = self.spec.out_hw(h, w)?;
        let f = self.spec.filters;
        if grad_out.dims() != [n, oh, ow, f] {
            return Err(Error::shape(format!(
                "conv2d backward: grad shape {} does not match output [{n}, {oh}, {ow}, {f}]",
                grad_out.shape()
            )));
        }
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let patch = kh * kw * cin;

        self.grad_weight.fill(T::ZERO);
        self.grad_bias.fill(T::ZERO);
        let mut grad_in = Tensor::zeros(input.shape().clone());
        let mut cols = vec![T::ZERO; oh * ow * patch];
        let mut grad_cols = vec![T::ZERO; oh * ow * patch];

        for b in 0..n {
            let sample = &input.data()[b * h * w * cin..(b + 1) * h * w * cin];
            let grows = &grad_out.data()[b * oh * ow * f..(b + 1) * oh * ow * f];

            for row in grows.chunks_exact(f) {
                for (gb, &g) in self.grad_bias.data_mut().iter_mut().zip(row) {
                    *gb = *gb + g;
                }
            }

            self.im2col(sample, h, w, oh, ow, &mut cols);
            matmul_tn_acc(&cols, grows, self.grad_weight.data_mut(), oh * ow, patch, f);
            matmul_nt_into(grows, self.weight.data(), &mut grad_cols, oh * ow, f, patch);

            // col2im: scatter-add each patch gradient back, skipping padding.
            let gin = &mut grad_in.data_mut()[b * h * w * cin..(b + 1) * h * w * cin];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (oy * ow + ox) * patch;
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((iy as usize) * w + ix as usize) * cin;
                            let src = row + (ky * kw + kx) * cin;
                            for ci in 0..cin {
                                gin[dst + ci] = gin[dst + ci] + grad_cols[src + ci];
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    fn state(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    fn trainable(&mut self) -> Vec<TrainableParam<'_, T>> {
        vec![
            TrainableParam { name: "weight", value: &mut self.weight, grad: &mut self.grad_weight, weight_decay: true },
            TrainableParam { name: "bias", value: &mut self.bias, grad: &mut self.grad_bias, weight_decay: false },
        ]
    }

    fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Max pooling over NHWC input, no padding. Backward routes each upstream
/// gradient entirely to the window's argmax (first occurrence on ties).
pub struct MaxPool2d<T: Elem> {
    window: (usize, usize),
    stride: (usize, usize),
    argmax: Option<(Vec<usize>, Shape)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Elem> MaxPool2d<T> {
    pub fn new(window: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config(format!("maxpool2d: window and stride must be at least 1 (got {window:?}, {stride:?})")));
        }
        Ok(MaxPool2d { window, stride, argmax: None, _marker: std::marker::PhantomData })
    }
}

impl<T: Elem> Layer<T> for MaxPool2d<T> {
    fn kind(&self) -> &'static str {
        "maxpool2d"
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, h, w, c) = dims4(input, "maxpool2d")?;
        let (wh, ww) = self.window;
        let (sh, sw) = self.stride;
        if wh > h || ww > w {
            return Err(Error::shape(format!("maxpool2d: window {wh}x{ww} exceeds input {h}x{w}")));
        }
        let oh = (h - wh) / sh + 1;
        let ow = (w - ww) / sw + 1;
        let mut out = Tensor::zeros(Shape::new(&[n, oh, ow, c])?);
        let mut argmax = vec![0usize; n * oh * ow * c];
        let x = input.data();
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_off = ((b * h + oy * sh) * w + ox * sw) * c + ch;
                        let mut best = x[best_off];
                        for ky in 0..wh {
                            for kx in 0..ww {
                                let off = ((b * h + oy * sh + ky) * w + ox * sw + kx) * c + ch;
                                if x[off] > best {
                                    best = x[off];
                                    best_off = off;
                                }
                            }
                        }
                        let oi = ((b * oh + oy) * ow + ox) * c + ch;
                        out.data_mut()[oi] = best;
                        argmax[oi] = best_off;
                    }
                }
            }
        }
        self.argmax = Some((argmax, input.shape().clone()));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (argmax, in_shape) = require_cache(&self.argmax, "maxpool2d")?;
        if grad_out.numel() != argmax.len() {
            return Err(Error::shape(format!(
                "maxpool2d backward: grad has {} elements, forward produced {}",
                grad_out.numel(),
                argmax.len()
            )));
        }
        let mut grad_in = Tensor::zeros(in_shape.clone());
        let gi = grad_in.data_mut();
        for (&src, &g) in argmax.iter().zip(grad_out.data()) {
            gi[src] = gi[src] + g;
        }
        Ok(grad_in)
    }
}

/// Fully connected layer: out = x・W + b with W stored [Din, Dout].
pub struct Dense<T: Elem> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    grad_weight: Tensor<T>,
    grad_bias: Tensor<T>,
    cached_input: Option<Tensor<T>>,
}

impl<T: Elem> Dense<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        let weight = crate::optim::he_uniform(Shape::new(&[d_in, d_out])?, d_in, rng)?;
        let bias = Tensor::zeros(Shape::new(&[d_out])?);
        let grad_weight = Tensor::zeros(weight.shape().clone());
        let grad_bias = Tensor::zeros(bias.shape().clone());
        Ok(Dense { weight, bias, grad_weight, grad_bias, cached_input: None })
    }
}

impl<T: Elem> Layer<T> for Dense<T> {
    fn kind(&self) -> &'static str {
        "dense"
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        if input.rank() != 2 {
            return Err(Error::shape(format!("dense: rank-2 [N,D] input required, got {}", input.shape())));
        }
        let n = input.dims()[0];
        let d_in = input.dims()[1];
        let (w_in, w_out) = (self.weight.dims()[0], self.weight.dims()[1]);
        if d_in != w_in {
            return Err(Error::shape(format!("dense: input width {d_in} does not match weight rows {w_in}")));
        }
        let mut out = Tensor::zeros(Shape::new(&[n, w_out])?);
        matmul_into(input.data(), self.weight.data(), out.data_mut(), n, d_in, w_out);
        for row in out.data_mut().chunks_exact_mut(w_out) {
            for (o, &b) in row.iter_mut().zip(self.bias.data()) {
                *o = *o + b;
            }
        }
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = require_cache(&self.cached_input, "dense")?.clone();
        let n = input.dims()[0];
        let d_in = input.dims()[1];
        let d_out = self.weight.dims()[1];
        if grad_out.dims() != [n, d_out] {
            return Err(Error::shape(format!(
                "dense backward: grad shape {} does not match output [{n}, {d_out}]",
                grad_out.shape()
            )));
        }
        self.grad_weight.fill(T::ZERO);
        matmul_tn_acc(input.data(), grad_out.data(), self.grad_weight.data_mut(), n, d_in, d_out);

        self.grad_bias.fill(T::ZERO);
        for row in grad_out.data().chunks_exact(d_out) {
            for (gb, &g) in self.grad_bias.data_mut().iter_mut().zip(row) {
                *gb = *gb + g;
            }
        }

        let mut grad_in = Tensor::zeros(input.shape().clone());
        matmul_nt_into(grad_out.data(), self.weight.data(), grad_in.data_mut(), n, d_out, d_in);
        Ok(grad_in)
    }

    fn state(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    fn trainable(&mut self) -> Vec<TrainableParam<'_, T>> {
        vec![
            TrainableParam { name: "weight", value: &mut self.weight, grad: &mut self.grad_weight, weight_decay: true },
            TrainableParam { name: "bias", value: &mut self.bias, grad: &mut self.grad_bias, weight_decay: false },
        ]
    }

    fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Elementwise max(0, x). Subgradient at exactly 0 is 0.
pub struct Relu<T: Elem> {
    cached_input: Option<Tensor<T>>,
}

impl<T: Elem> Relu<T> {
    pub fn new() -> Self {
        Relu { cached_input: None }
    }
}

impl<T: Elem> Default for Relu<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Layer<T> for Relu<T> {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out = input.map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = require_cache(&self.cached_input, "relu")?;
        if input.shape() != grad_out.shape() {
            return Err(Error::shape(format!(
                "relu backward: grad shape {} does not match input {}",
                grad_out.shape(),
                input.shape()
            )));
        }
        let mut grad_in = grad_out.clone();
        for (g, &x) in grad_in.data_mut().iter_mut().zip(input.data()) {
            if x <= T::ZERO {
                *g = T::ZERO;
            }
        }
        Ok(grad_in)
    }
}

/// Per-channel batch normalization over a channels-last tensor. Train mode
/// normalizes with batch statistics (biased variance) and updates running
/// statistics as running <- m*running + (1-m)*batch; Infer mode uses the
/// running statistics only, making the output a fixed affine map.
pub struct BatchNorm<T: Elem> {
    channels: usize,
    epsilon: f64,
    momentum: f64,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    grad_gamma: Tensor<T>,
    grad_beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    per_channel: usize,
    shape: Shape,
}

impl<T: Elem> BatchNorm<T> {
    /// Defaults: epsilon 1e-5, running-statistics momentum 0.99.
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_options(channels, 1e-5, 0.99)
    }

    pub fn with_options(channels: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("batchnorm: channels must be at least 1"));
        }
        if epsilon <= 0.0 {
            return Err(Error::config(format!("batchnorm: epsilon must be positive, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("batchnorm: momentum must be in [0, 1), got {momentum}")));
        }
        let shape = Shape::new(&[channels])?;
        Ok(BatchNorm {
            channels,
            epsilon,
            momentum,
            gamma: Tensor::new(shape.clone(), T::ONE),
            beta: Tensor::zeros(shape.clone()),
            grad_gamma: Tensor::zeros(shape.clone()),
            grad_beta: Tensor::zeros(shape.clone()),
            running_mean: Tensor::zeros(shape.clone()),
            running_var: Tensor::new(shape, T::ONE),
            cache: None,
        })
    }

    fn check_channels(&self, input: &Tensor<T>) -> Result<()> {
        if input.rank() < 2 {
            return Err(Error::shape(format!("batchnorm: input must have a batch axis and a channel axis, got {}", input.shape())));
        }
        let c = *input.dims().last().expect("rank checked");
        if c != self.channels {
            return Err(Error::shape(format!("batchnorm: input has {c} channels, layer expects {}", self.channels)));
        }
        Ok(())
    }
}

impl<T: Elem> Layer<T> for BatchNorm<T> {
    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_channels(input)?;
        let c = self.channels;
        let m = input.numel() / c;
        let x = input.data();
        let mut out = Tensor::zeros(input.shape().clone());

        match mode {
            Mode::Train => {
                if m <= 1 {
                    return Err(Error::DegenerateBatch(format!(
                        "batchnorm: batch statistics need more than one element per channel, got {m}"
                    )));
                }
                let inv_m = T::from_f64(1.0 / m as f64);
                let mut mean = vec![T::ZERO; c];
                for (i, &v) in x.iter().enumerate() {
                    mean[i % c] = mean[i % c] + v;
                }
                for mu in mean.iter_mut() {
                    *mu = *mu * inv_m;
                }
                let mut var = vec![T::ZERO; c];
                for (i, &v) in x.iter().enumerate() {
                    let d = v - mean[i % c];
                    var[i % c] = var[i % c] + d * d;
                }
                for vv in var.iter_mut() {
                    *vv = *vv * inv_m;
                }
                let eps = T::from_f64(self.epsilon);
                let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();

                let mut xhat = vec![T::ZERO; x.len()];
                for (i, &v) in x.iter().enumerate() {
                    let ch = i % c;
                    let xh = (v - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out.data_mut()[i] = self.gamma.data()[ch] * xh + self.beta.data()[ch];
                }

                let keep = T::from_f64(self.momentum);
                let take = T::from_f64(1.0 - self.momentum);
                for ch in 0..c {
                    let rm = self.running_mean.data_mut();
                    rm[ch] = keep * rm[ch] + take * mean[ch];
                    let rv = self.running_var.data_mut();
                    rv[ch] = keep * rv[ch] + take * var[ch];
                }

                self.cache = Some(BnCache { xhat, inv_std, per_channel: m, shape: input.shape().clone() });
            }
            Mode::Infer => {
                let eps = T::from_f64(self.epsilon);
                let inv_std: Vec<T> =
                    self.running_var.data().iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
                for (i, &v) in x.iter().enumerate() {
                    let ch = i % c;
                    let xh = (v - self.running_mean.data()[ch]) * inv_std[ch];
                    out.data_mut()[i] = self.gamma.data()[ch] * xh + self.beta.data()[ch];
                }
                self.cache = None;
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = match &self.cache {
            Some(c) => c,
            None => return Err(Error::State("batchnorm: backward called before a Train-mode forward".to_string())),
        };
        if grad_out.shape() != &cache.shape {
            return Err(Error::shape(format!(
                "batchnorm backward: grad shape {} does not match input {}",
                grad_out.shape(),
                cache.shape
            )));
        }
        let c = self.channels;
        let m = cache.per_channel;
        let g = grad_out.data();

        let mut sum_g = vec![T::ZERO; c];
        let mut sum_gx = vec![T::ZERO; c];
        for (i, &gv) in g.iter().enumerate() {
            let ch = i % c;
            sum_g[ch] = sum_g[ch] + gv;
            sum_gx[ch] = sum_gx[ch] + gv * cache.xhat[i];
        }
        self.grad_beta.data_mut().copy_from_slice(&sum_g);
        self.grad_gamma.data_mut().copy_from_slice(&sum_gx);

        // dx = gamma*inv_std/m * (m*g - sum_g - xhat*sum_gx), the exact
        // gradient through the batch mean and the biased batch variance.
        let m_t = T::from_f64(m as f64);
        let inv_m = T::from_f64(1.0 / m as f64);
        let mut grad_in = Tensor::zeros(cache.shape.clone());
        for (i, &gv) in g.iter().enumerate() {
            let ch = i % c;
            let scale = self.gamma.data()[ch] * cache.inv_std[ch] * inv_m;
            grad_in.data_mut()[i] = scale * (m_t * gv - sum_g[ch] - cache.xhat[i] * sum_gx[ch]);
        }
        Ok(grad_in)
    }

    fn state(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("gamma", &mut self.gamma),
            ("beta", &mut self.beta),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }

    fn trainable(&mut self) -> Vec<TrainableParam<'_, T>> {
        vec![
            TrainableParam { name: "gamma", value: &mut self.gamma, grad: &mut self.grad_gamma, weight_decay: false },
            TrainableParam { name: "beta", value: &mut self.beta, grad: &mut self.grad_beta, weight_decay: false },
        ]
    }

    fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }
}

/// Inverted dropout: in Train mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate); Infer mode is the identity.
pub struct Dropout<T: Elem> {
    rate: f64,
    rng: Rng,
    mask: Option<Tensor<T>>,
}

impl<T: Elem> Dropout<T> {
    pub fn new(rate: f64, rng: Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout: rate must be in [0, 1), got {rate}")));
        }
        Ok(Dropout { rate, rng, mask: None })
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    /// Replace the generator (used to replay a specific mask sequence).
    pub fn set_rng(&mut self, rng: Rng) {
        self.rng = rng;
    }
}

impl<T: Elem> Layer<T> for Dropout<T> {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Infer || self.rate == 0.0 {
            self.mask = None;
            return Ok(input.clone());
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - self.rate));
        let mut mask = Tensor::zeros(input.shape().clone());
        for mv in mask.data_mut() {
            if self.rng.next_f64() >= self.rate {
                *mv = keep_scale;
            }
        }
        let out = input.mul(&mask).expect("mask built with the input's shape");
        self.mask = Some(mask);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.mask {
            Some(mask) => grad_out.mul(mask),
            // Identity forward (Infer or rate 0) has identity backward.
            None => Ok(grad_out.clone()),
        }
    }
}

/// Collapses [N,H,W,C] to [N, H*W*C]; backward restores the cached shape.
pub struct Flatten<T: Elem> {
    in_shape: Option<Shape>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Elem> Flatten<T> {
    pub fn new() -> Self {
        Flatten { in_shape: None, _marker: std::marker::PhantomData }
    }
}

impl<T: Elem> Default for Flatten<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Layer<T> for Flatten<T> {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, h, w, c) = dims4(input, "flatten")?;
        self.in_shape = Some(input.shape().clone());
        input.reshape(Shape::new(&[n, h * w * c])?)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = require_cache(&self.in_shape, "flatten")?.clone();
        grad_out.reshape(shape)
    }
}
