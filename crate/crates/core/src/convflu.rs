//! Convolutional feature leaky unit (ConvFLU) and the bidirectional
//! transference block built from two of them.
//!
//! For features `F_x` (own task) and `F_y` (other task) of equal shape:
//!
//! ```text
//! r  = sigmoid(W_r * [F_x, F_y])          leaky gate
//! z  = sigmoid(W_z * [F_x, F_y])          memory gate
//! F~ = tanh(W * (r . F_y) + U * F_x)      candidate
//! F' = (1 - z) . F_x + z . F~             fused output
//! ```
//!
//! All four kernels are 1x1 convolutions with bias.

use rand::Rng;

use crate::error::{input_err, Result};
use crate::nn::layers::{sigmoid, sigmoid_backward, tanh, tanh_backward, Conv2d, Conv2dCache};
use crate::nn::param::{join, Module, Param};
use crate::tensor::{concat_channels, split_channels, Scalar, Tensor};

/// Gate activations captured from one unit call.
#[derive(Clone, Debug)]
pub struct GateOutputs<T: Scalar = f32> {
    pub r: Tensor<T>,
    pub z: Tensor<T>,
    pub candidate: Tensor<T>,
    pub fused: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvFlu<T: Scalar = f32> {
    pub w_r: Conv2d<T>,
    pub w_z: Conv2d<T>,
    pub w: Conv2d<T>,
    pub u: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct ConvFluCache<T: Scalar> {
    fx: Tensor<T>,
    fy: Tensor<T>,
    r: Tensor<T>,
    z: Tensor<T>,
    candidate: Tensor<T>,
    cr: Conv2dCache<T>,
    cz: Conv2dCache<T>,
    cw: Conv2dCache<T>,
    cu: Conv2dCache<T>,
}

const GATE_INIT_SCALE: f64 = 1e-2;

impl<T: Scalar> ConvFlu<T> {
    /// Gate kernels start near zero with zero bias (gates open at ~0.5);
    /// the candidate kernels get the usual Kaiming init.
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let mut w_r = Conv2d::zeros(2 * channels, channels, 1, 1, 0);
        let mut w_z = Conv2d::zeros(2 * channels, channels, 1, 1, 0);
        for conv in [&mut w_r, &mut w_z] {
            conv.weight
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::lit(rng.random_range(-GATE_INIT_SCALE..GATE_INIT_SCALE)));
        }
        ConvFlu {
            w_r,
            w_z,
            w: Conv2d::new(channels, channels, 1, 1, 0, rng),
            u: Conv2d::new(channels, channels, 1, 1, 0, rng),
        }
    }

    /// All kernels and biases zero.
    pub fn zeros(channels: usize) -> Self {
        ConvFlu {
            w_r: Conv2d::zeros(2 * channels, channels, 1, 1, 0),
            w_z: Conv2d::zeros(2 * channels, channels, 1, 1, 0),
            w: Conv2d::zeros(channels, channels, 1, 1, 0),
            u: Conv2d::zeros(channels, channels, 1, 1, 0),
        }
    }

    pub fn channels(&self) -> usize {
        self.u.out_channels()
    }

    /// Pin the memory gate shut: zero `W_z` and a bias so negative that the
    /// sigmoid underflows to exactly 0.
    pub fn close_memory_gate(&mut self) {
        self.w_z.weight.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        self.w_z.bias.value.data_mut().iter_mut().for_each(|v| *v = T::lit(-1e4));
    }

    fn check_pair(&self, fx: &Tensor<T>, fy: &Tensor<T>) -> Result<()> {
        if fx.shape() != fy.shape() {
            return Err(input_err!(
                "ConvFLU operands differ in shape: {:?} vs {:?}",
                fx.shape(),
                fy.shape()
            ));
        }
        let (_, c, _, _) = fx.dims4()?;
        if c != self.channels() {
            return Err(input_err!("ConvFLU has {} channels, features have {c}", self.channels()));
        }
        Ok(())
    }

    pub fn leaky_gate(&self, fx: &Tensor<T>, fy: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_pair(fx, fy)?;
        Ok(sigmoid(&self.w_r.forward(&concat_channels(fx, fy)?)?.0))
    }

    pub fn memory_gate(&self, fx: &Tensor<T>, fy: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_pair(fx, fy)?;
        Ok(sigmoid(&self.w_z.forward(&concat_channels(fx, fy)?)?.0))
    }

    pub fn candidate_features(&self, fx: &Tensor<T>, fy: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_pair(fx, fy)?;
        fx.expect_same_shape(r)?;
        let leaked = r.zip_map(fy, |a, b| a * b)?;
        let mut pre = self.w.forward(&leaked)?.0;
        pre.add_assign(&self.u.forward(fx)?.0)?;
        Ok(tanh(&pre))
    }

    pub fn forward(&self, fx: &Tensor<T>, fy: &Tensor<T>) -> Result<(GateOutputs<T>, ConvFluCache<T>)> {
        self.check_pair(fx, fy)?;
        let cat = concat_channels(fx, fy)?;
        let (r_pre, cr) = self.w_r.forward(&cat)?;
        let (z_pre, cz) = self.w_z.forward(&cat)?;
        let r = sigmoid(&r_pre);
        let z = sigmoid(&z_pre);
        let leaked = r.zip_map(fy, |a, b| a * b)?;
        let (mut pre, cw) = self.w.forward(&leaked)?;
        let (own, cu) = self.u.forward(fx)?;
        pre.add_assign(&own)?;
        let candidate = tanh(&pre);
        let fused = mix(fx, &candidate, &z);
        let cache = ConvFluCache {
            fx: fx.clone(),
            fy: fy.clone(),
            r: r.clone(),
            z: z.clone(),
            candidate: candidate.clone(),
            cr,
            cz,
            cw,
            cu,
        };
        Ok((GateOutputs { r, z, candidate, fused }, cache))
    }

    /// Returns `(dL/dF_x, dL/dF_y)`.
    pub fn backward(&mut self, cache: &ConvFluCache<T>, g_fused: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        cache.fx.expect_same_shape(g_fused)?;
        let c = self.channels();
        let one = T::one();
        let (z, cand, fx) = (cache.z.data(), cache.candidate.data(), cache.fx.data());
        let g = g_fused.data();
        let mut g_fx = Tensor::from_fn(g_fused.shape(), |i| (one - z[i]) * g[i]);
        let g_cand = Tensor::from_fn(g_fused.shape(), |i| z[i] * g[i]);
        let g_z = Tensor::from_fn(g_fused.shape(), |i| g[i] * (cand[i] - fx[i]));

        let g_pre = tanh_backward(&cache.candidate, &g_cand);
        g_fx.add_assign(&self.u.backward(&cache.cu, &g_pre)?)?;
        let g_leaked = self.w.backward(&cache.cw, &g_pre)?;
        let g_r = g_leaked.zip_map(&cache.fy, |a, b| a * b)?;
        let mut g_fy = g_leaked.zip_map(&cache.r, |a, b| a * b)?;

        let g_cat_z = self.w_z.backward(&cache.cz, &sigmoid_backward(&cache.z, &g_z))?;
        let g_cat_r = self.w_r.backward(&cache.cr, &sigmoid_backward(&cache.r, &g_r))?;
        for g_cat in [g_cat_z, g_cat_r] {
            let (a, b) = split_channels(&g_cat, c)?;
            g_fx.add_assign(&a)?;
            g_fy.add_assign(&b)?;
        }
        Ok((g_fx, g_fy))
    }
}

impl<T: Scalar> Module<T> for ConvFlu<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.w_r.visit(&join(prefix, "w_r"), f);
        self.w_z.visit(&join(prefix, "w_z"), f);
        self.w.visit(&join(prefix, "w"), f);
        self.u.visit(&join(prefix, "u"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.w_r.visit_mut(&join(prefix, "w_r"), f);
        self.w_z.visit_mut(&join(prefix, "w_z"), f);
        self.w.visit_mut(&join(prefix, "w"), f);
        self.u.visit_mut(&join(prefix, "u"), f);
    }
}

fn mix<T: Scalar>(prev: &Tensor<T>, candidate: &Tensor<T>, z: &Tensor<T>) -> Tensor<T> {
    let (p, c, z) = (prev.data(), candidate.data(), z.data());
    Tensor::from_fn(prev.shape(), |i| (T::one() - z[i]) * p[i] + z[i] * c[i])
}

/// `(1 - z) . prev + z . candidate`, with `z` required to lie in `[0, 1]`.
pub fn fuse<T: Scalar>(prev: &Tensor<T>, candidate: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    prev.expect_same_shape(candidate)?;
    prev.expect_same_shape(z)?;
    if let Some(bad) = z.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(input_err!("memory gate value {bad:?} outside [0, 1]"));
    }
    Ok(mix(prev, candidate, z))
}

/// Two ConvFLUs exchanging features in both directions. Both directions
/// read the inputs as they were before the block.
#[derive(Clone, Debug)]
pub struct TransferenceBlock<T: Scalar = f32> {
    /// Writes into task x, reading task y.
    pub x_from_y: ConvFlu<T>,
    /// Writes into task y, reading task x.
    pub y_from_x: ConvFlu<T>,
}

#[derive(Clone, Debug)]
pub struct TransferenceCache<T: Scalar> {
    x: ConvFluCache<T>,
    y: ConvFluCache<T>,
}

impl<T: Scalar> TransferenceBlock<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        TransferenceBlock { x_from_y: ConvFlu::new(channels, rng), y_from_x: ConvFlu::new(channels, rng) }
    }

    pub fn close_memory_gates(&mut self) {
        self.x_from_y.close_memory_gate();
        self.y_from_x.close_memory_gate();
    }

    /// Returns the gate outputs of `(x <- y, y <- x)`; the new features are their `fused` fields.
    pub fn forward(
        &self,
        fx: &Tensor<T>,
        fy: &Tensor<T>,
    ) -> Result<((GateOutputs<T>, GateOutputs<T>), TransferenceCache<T>)> {
        let (gx, cx) = self.x_from_y.forward(fx, fy)?;
        let (gy, cy) = self.y_from_x.forward(fy, fx)?;
        Ok(((gx, gy), TransferenceCache { x: cx, y: cy }))
    }

    pub fn backward(
        &mut self,
        cache: &TransferenceCache<T>,
        g_x_out: &Tensor<T>,
        g_y_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (mut g_fx, mut g_fy) = self.x_from_y.backward(&cache.x, g_x_out)?;
        let (g_fy2, g_fx2) = self.y_from_x.backward(&cache.y, g_y_out)?;
        g_fx.add_assign(&g_fx2)?;
        g_fy.add_assign(&g_fy2)?;
        Ok((g_fx, g_fy))
    }
}

impl<T: Scalar> Module<T> for TransferenceBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.x_from_y.visit(&join(prefix, "x_from_y"), f);
        self.y_from_x.visit(&join(prefix, "y_from_x"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.x_from_y.visit_mut(&join(prefix, "x_from_y"), f);
        self.y_from_x.visit_mut(&join(prefix, "y_from_x"), f);
    }
}

/// Channel-mean gate responses of one batch item, `[H, W]` each.
#[derive(Clone, Debug)]
pub struct GateHeatMaps {
    pub r: Tensor<f64>,
    pub z: Tensor<f64>,
}

fn channel_mean<T: Scalar>(t: &Tensor<T>, item: usize) -> Result<Tensor<f64>> {
    let (b, c, h, w) = t.dims4()?;
    if item >= b {
        return Err(input_err!("batch item {item} out of range for batch of {b}"));
    }
    let data = t.item(item);
    Ok(Tensor::from_fn(&[h, w], |p| {
        (0..c).map(|ci| data[ci * h * w + p].as_f64()).sum::<f64>() / c as f64
    }))
}

pub fn gate_maps<T: Scalar>(gates: &GateOutputs<T>, item: usize) -> Result<GateHeatMaps> {
    Ok(GateHeatMaps { r: channel_mean(&gates.r, item)?, z: channel_mean(&gates.z, item)? })
}

/// Min-max normalise a map to `[0, 1]`; returns `(normalised, min, max)`.
/// A flat map keeps its (clamped) raw value so constant gates stay readable.
pub fn normalize_map(map: &Tensor<f64>) -> (Tensor<f64>, f64, f64) {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm = if span > 1e-12 {
        map.map(|v| (v - lo) / span)
    } else {
        map.map(|v| v.clamp(0.0, 1.0))
    };
    (norm, lo, hi)
}
