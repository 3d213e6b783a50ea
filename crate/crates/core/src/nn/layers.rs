//! Layer primitives with hand-written reverse passes.
//!
//! Every `forward` is a pure function of `&self` and returns a cache; every
//! `backward` consumes that cache, accumulates parameter gradients (when the
//! parameter requires them) and returns the gradient with respect to the input.

use rand::Rng;

use super::param::{join, kaiming_uniform, Module, Param};
use crate::error::{config_err, input_err, Result};
use crate::tensor::{gemm, Mat, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// 2-D convolution with square kernels, zero padding and a bias per output channel.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct Conv2dCache<T: Scalar> {
    input: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Param::new(kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng)),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    /// Zero-initialised kernel, used where a neutral start is wanted.
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Param::new(Tensor::zeros(&[out_ch, in_ch, kernel, kernel])),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(input_err!("{h}x{w} input is smaller than the {k}x{k} kernel"));
        }
        Ok(((h + 2 * self.pad - k) / self.stride + 1, (w + 2 * self.pad - k) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[T], c: usize, h: usize, w: usize, ho: usize, wo: usize, col: &mut [T]) {
        let k = self.kernel();
        let (s, p) = (self.stride as isize, self.pad as isize);
        let n = ho * wo;
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut col[((ci * k + ki) * k + kj) * n..][..n];
                    for oy in 0..ho {
                        let iy = oy as isize * s - p + ki as isize;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kj as isize;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], c: usize, h: usize, w: usize, ho: usize, wo: usize, gx: &mut [T]) {
        let k = self.kernel();
        let (s, p) = (self.stride as isize, self.pad as isize);
        let n = ho * wo;
        for ci in 0..c {
            let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &col[((ci * k + ki) * k + kj) * n..][..n];
                    for oy in 0..ho {
                        let iy = oy as isize * s - p + ki as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &g) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            let ix = ox as isize * s - p + kj as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Conv2dCache<T>)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return Err(config_err!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            ));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let co = self.out_channels();
        let kdim = c * self.kernel() * self.kernel();
        let n = ho * wo;
        let mut y = Tensor::zeros(&[b, co, ho, wo]);
        let wmat = Mat::new(self.weight.value.data(), co, kdim);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * n] };
        for bi in 0..b {
            let xb = x.item(bi);
            let cols: &[T] = if self.is_pointwise() {
                xb
            } else {
                self.im2col(xb, c, h, w, ho, wo, &mut col);
                &col
            };
            let yb = y.item_mut(bi);
            for (o, &bias) in self.bias.value.data().iter().enumerate() {
                yb[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = bias);
            }
            gemm(wmat, Mat::new(cols, kdim, n), yb, true);
        }
        Ok((y, Conv2dCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: &Conv2dCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = &cache.input;
        let (b, c, h, w) = x.dims4()?;
        let (ho, wo) = self.output_hw(h, w)?;
        let co = self.out_channels();
        if gy.shape() != [b, co, ho, wo] {
            return Err(input_err!("conv output gradient has shape {:?}", gy.shape()));
        }
        let kdim = c * self.kernel() * self.kernel();
        let n = ho * wo;
        let mut gx = Tensor::zeros(x.shape());
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * n] };
        let mut gcol = vec![T::zero(); kdim * n];
        let learn = self.weight.requires_grad;
        for bi in 0..b {
            let gyb = gy.item(bi);
            if learn {
                let xb = x.item(bi);
                let cols: &[T] = if self.is_pointwise() {
                    xb
                } else {
                    self.im2col(xb, c, h, w, ho, wo, &mut col);
                    &col
                };
                gemm(
                    Mat::new(gyb, co, n),
                    Mat::new(cols, kdim, n).t(),
                    self.weight.grad.data_mut(),
                    true,
                );
            }
            if self.bias.requires_grad {
                for (o, g) in self.bias.grad.data_mut().iter_mut().enumerate() {
                    *g += gyb[o * n..(o + 1) * n].iter().copied().sum::<T>();
                }
            }
            let wmat = Mat::new(self.weight.value.data(), co, kdim);
            if self.is_pointwise() {
                gemm(wmat.t(), Mat::new(gyb, co, n), gx.item_mut(bi), false);
            } else {
                gemm(wmat.t(), Mat::new(gyb, co, n), &mut gcol, false);
                self.col2im(&gcol, c, h, w, ho, wo, gx.item_mut(bi));
            }
        }
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// 2x2, stride-2 transposed convolution: exact doubling of the spatial extent.
/// Weight layout is `[in, out, 2, 2]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Debug)]
pub struct ConvTransposeCache<T: Scalar> {
    input: Tensor<T>,
}

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        // each output pixel sees in_ch inputs through one kernel tap
        ConvTranspose2x2 {
            weight: Param::new(kaiming_uniform(&[in_ch, out_ch, 2, 2], in_ch, rng)),
            bias: Param::new(Tensor::zeros(&[out_ch])),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvTransposeCache<T>)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return Err(config_err!(
                "transposed conv expects {} input channels, got {c}",
                self.in_channels()
            ));
        }
        let co = self.out_channels();
        let n = h * w;
        let mut taps = vec![T::zero(); co * 4 * n];
        let mut y = Tensor::zeros(&[b, co, 2 * h, 2 * w]);
        for bi in 0..b {
            gemm(
                Mat::new(self.weight.value.data(), c, co * 4).t(),
                Mat::new(x.item(bi), c, n),
                &mut taps,
                false,
            );
            let yb = y.item_mut(bi);
            for o in 0..co {
                let bias = self.bias.value.data()[o];
                for t in 0..4 {
                    let (di, dj) = (t / 2, t % 2);
                    let src = &taps[(o * 4 + t) * n..][..n];
                    for i in 0..h {
                        for j in 0..w {
                            yb[(o * 2 * h + 2 * i + di) * 2 * w + 2 * j + dj] = src[i * w + j] + bias;
                        }
                    }
                }
            }
        }
        Ok((y, ConvTransposeCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: &ConvTransposeCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = &cache.input;
        let (b, c, h, w) = x.dims4()?;
        let co = self.out_channels();
        if gy.shape() != [b, co, 2 * h, 2 * w] {
            return Err(input_err!("transposed conv output gradient has shape {:?}", gy.shape()));
        }
        let n = h * w;
        let mut gtaps = vec![T::zero(); co * 4 * n];
        let mut gx = Tensor::zeros(x.shape());
        for bi in 0..b {
            let gyb = gy.item(bi);
            for o in 0..co {
                let mut bias_acc = T::zero();
                for t in 0..4 {
                    let (di, dj) = (t / 2, t % 2);
                    let dst = &mut gtaps[(o * 4 + t) * n..][..n];
                    for i in 0..h {
                        for j in 0..w {
                            let g = gyb[(o * 2 * h + 2 * i + di) * 2 * w + 2 * j + dj];
                            dst[i * w + j] = g;
                            bias_acc += g;
                        }
                    }
                }
                if self.bias.requires_grad {
                    self.bias.grad.data_mut()[o] += bias_acc;
                }
            }
            if self.weight.requires_grad {
                gemm(
                    Mat::new(x.item(bi), c, n),
                    Mat::new(&gtaps, co * 4, n).t(),
                    self.weight.grad.data_mut(),
                    true,
                );
            }
            gemm(
                Mat::new(self.weight.value.data(), c, co * 4),
                Mat::new(&gtaps, co * 4, n),
                gx.item_mut(bi),
                false,
            );
        }
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2x2<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(B, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Scalar = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Scalar> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
    batch_mean: Vec<T>,
    batch_var_unbiased: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::full(&[channels], T::one())),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(config_err!("batch norm has {} channels, input has {c}", self.channels()));
        }
        let hw = h * w;
        let count = b * hw;
        let eps = T::lit(BN_EPS);
        let mut batch_mean = vec![T::zero(); c];
        let mut batch_var_unbiased = vec![T::one(); c];
        let mut mean = self.running_mean.value.data().to_vec();
        let mut var = self.running_var.value.data().to_vec();
        if mode == Mode::Train {
            if count < 2 {
                return Err(input_err!("batch norm in train mode needs at least 2 values per channel"));
            }
            for ci in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    s += x.item(bi)[ci * hw..(ci + 1) * hw].iter().copied().sum::<T>();
                }
                let m = s / T::lit(count as f64);
                let mut ss = T::zero();
                for bi in 0..b {
                    for &v in &x.item(bi)[ci * hw..(ci + 1) * hw] {
                        ss += (v - m) * (v - m);
                    }
                }
                mean[ci] = m;
                var[ci] = ss / T::lit(count as f64);
                batch_mean[ci] = m;
                batch_var_unbiased[ci] = ss / T::lit((count - 1) as f64);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        for bi in 0..b {
            let (xb, xh) = (x.item(bi), xhat.item_mut(bi));
            for ci in 0..c {
                for k in ci * hw..(ci + 1) * hw {
                    xh[k] = (xb[k] - mean[ci]) * inv_std[ci];
                }
            }
            let yb = y.item_mut(bi);
            let xh = xhat.item(bi);
            for ci in 0..c {
                for k in ci * hw..(ci + 1) * hw {
                    yb[k] = gamma[ci] * xh[k] + beta[ci];
                }
            }
        }
        Ok((y, BatchNormCache { xhat, inv_std, mode, batch_mean, batch_var_unbiased }))
    }

    /// Fold the batch statistics of a train-mode forward into the running estimates.
    pub fn track(&mut self, cache: &BatchNormCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = T::lit(BN_MOMENTUM);
        let rm = self.running_mean.value.data_mut();
        for (r, &b) in rm.iter_mut().zip(&cache.batch_mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let rv = self.running_var.value.data_mut();
        for (r, &b) in rv.iter_mut().zip(&cache.batch_var_unbiased) {
            *r = (T::one() - m) * *r + m * b;
        }
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = cache.xhat.dims4()?;
        cache.xhat.expect_same_shape(gy)?;
        let hw = h * w;
        let count = T::lit((b * hw) as f64);
        let gamma = self.gamma.value.data().to_vec();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for bi in 0..b {
            let (g, xh) = (gy.item(bi), cache.xhat.item(bi));
            for ci in 0..c {
                for k in ci * hw..(ci + 1) * hw {
                    sum_g[ci] += g[k];
                    sum_gx[ci] += g[k] * xh[k];
                }
            }
        }
        if self.gamma.requires_grad {
            for (dg, s) in self.gamma.grad.data_mut().iter_mut().zip(&sum_gx) {
                *dg += *s;
            }
        }
        if self.beta.requires_grad {
            for (db, s) in self.beta.grad.data_mut().iter_mut().zip(&sum_g) {
                *db += *s;
            }
        }
        let mut gx = Tensor::zeros(gy.shape());
        for bi in 0..b {
            let (g, xh) = (gy.item(bi), cache.xhat.item(bi));
            let out = gx.item_mut(bi);
            for ci in 0..c {
                let scale = gamma[ci] * cache.inv_std[ci];
                for k in ci * hw..(ci + 1) * hw {
                    out[k] = match cache.mode {
                        Mode::Eval => g[k] * scale,
                        Mode::Train => {
                            scale * (g[k] - sum_g[ci] / count - xh[k] * sum_gx[ci] / count)
                        }
                    };
                }
            }
        }
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Fully connected layer, `y = x W^T + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Clone, Debug)]
pub struct LinearCache<T: Scalar> {
    input: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::new(kaiming_uniform(&[out_dim, in_dim], in_dim, rng)),
            bias: Param::new(Tensor::zeros(&[out_dim])),
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(config_err!("bias shape {:?} does not match {out} outputs", bias.shape()));
        }
        Ok(Linear { weight: Param::new(weight), bias: Param::new(bias) })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LinearCache<T>)> {
        let (b, d) = x.dims2()?;
        if d != self.in_dim() {
            return Err(config_err!("linear layer expects {} features, got {d}", self.in_dim()));
        }
        let o = self.out_dim();
        let mut y = Tensor::from_fn(&[b, o], |i| self.bias.value.data()[i % o]);
        gemm(
            Mat::new(x.data(), b, d),
            Mat::new(self.weight.value.data(), o, d).t(),
            y.data_mut(),
            true,
        );
        Ok((y, LinearCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: &LinearCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, d) = cache.input.dims2()?;
        let o = self.out_dim();
        if gy.shape() != [b, o] {
            return Err(input_err!("linear output gradient has shape {:?}", gy.shape()));
        }
        if self.weight.requires_grad {
            gemm(
                Mat::new(gy.data(), b, o).t(),
                Mat::new(cache.input.data(), b, d),
                self.weight.grad.data_mut(),
                true,
            );
        }
        if self.bias.requires_grad {
            let gb = self.bias.grad.data_mut();
            for row in gy.data().chunks(o) {
                gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
            }
        }
        let mut gx = Tensor::zeros(&[b, d]);
        gemm(
            Mat::new(gy.data(), b, o),
            Mat::new(self.weight.value.data(), o, d),
            gx.data_mut(),
            false,
        );
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    in_shape: Vec<usize>,
    argmax: Vec<u32>,
}

/// 2x2 stride-2 max pooling. Odd extents are rejected rather than truncated.
pub fn max_pool2x2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCache)> {
    let (b, c, h, w) = x.dims4()?;
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(input_err!("2x2 max pooling needs even spatial extents, got {h}x{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let mut argmax = vec![0u32; b * c * ho * wo];
    let xs = x.data();
    for (plane, (out, arg)) in y.data_mut().chunks_mut(ho * wo).zip(argmax.chunks_mut(ho * wo)).enumerate() {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                out[i * wo + j] = xs[best];
                arg[i * wo + j] = best as u32;
            }
        }
    }
    Ok((y, MaxPoolCache { in_shape: x.shape().to_vec(), argmax }))
}

pub fn max_pool2x2_backward<T: Scalar>(cache: &MaxPoolCache, gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(&cache.in_shape);
    let g = gx.data_mut();
    for (&idx, &v) in cache.argmax.iter().zip(gy.data()) {
        g[idx as usize] += v;
    }
    gx
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(y.shape(), |i| if y.data()[i] > T::zero() { gy.data()[i] } else { T::zero() })
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::lit(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

/// Gradient of leaky ReLU given its *input*.
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::lit(slope);
    Tensor::from_fn(x.shape(), |i| if x.data()[i] > T::zero() { gy.data()[i] } else { gy.data()[i] * s })
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of the logistic function given its *output*.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(y.shape(), |i| {
        let s = y.data()[i];
        gy.data()[i] * s * (T::one() - s)
    })
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Gradient of tanh given its *output*.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(y.shape(), |i| {
        let t = y.data()[i];
        gy.data()[i] * (T::one() - t * t)
    })
}
