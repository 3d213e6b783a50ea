use rand::Rng;

use super::decode_one_hot;
use crate::error::{input_err, Result};
use crate::nn::layers::{leaky_relu, leaky_relu_backward, Conv2d, Conv2dCache};
use crate::nn::param::{join, Module, Param};
use crate::tensor::{concat_channels, split_channels, Scalar, Tensor};

const SLOPE: f64 = 0.2;

/// Label-conditioned patch discriminator. The one-hot label is broadcast to
/// `E` constant channels and concatenated with the image; four stride-2 3x3
/// convolutions with leaky ReLU and a 1x1 head produce one logit per patch.
/// There is no normalisation, so each patch logit depends only on its
/// receptive field.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar = f32> {
    convs: Vec<Conv2d<T>>,
    head: Conv2d<T>,
    classes: usize,
    in_channels: usize,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorCache<T: Scalar> {
    convs: Vec<(Conv2dCache<T>, Tensor<T>)>,
    head: Conv2dCache<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(in_channels: usize, classes: usize, widths: [usize; 4], rng: &mut impl Rng) -> Self {
        let mut convs = Vec::with_capacity(4);
        let mut c = in_channels + classes;
        for &w in &widths {
            convs.push(Conv2d::new(c, w, 3, 2, 1, rng));
            c = w;
        }
        Discriminator { convs, head: Conv2d::new(c, 1, 1, 1, 0, rng), classes, in_channels }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn conditioned_input(&self, image: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        let (b, c, h, w) = image.dims4()?;
        if c != self.in_channels {
            return Err(input_err!("discriminator expects {} image channels, got {c}", self.in_channels));
        }
        if labels.len() != b {
            return Err(input_err!("{} labels for a batch of {b}", labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(input_err!("label {l} outside [0, {})", self.classes));
        }
        let limit = T::one() + T::lit(1e-6);
        if image.data().iter().any(|v| !(v.abs() <= limit)) {
            return Err(input_err!("discriminator input must lie in [-1, 1]"));
        }
        let e = self.classes;
        let planes = Tensor::from_fn(&[b, e, h, w], |i| {
            let (bi, ch) = (i / (e * h * w), (i / (h * w)) % e);
            if labels[bi] == ch {
                T::one()
            } else {
                T::zero()
            }
        });
        concat_channels(image, &planes)
    }

    /// Patch logits `[B, 1, h, w]` for images paired with class indices.
    pub fn forward_labels(&self, image: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, DiscriminatorCache<T>)> {
        let mut x = self.conditioned_input(image, labels)?;
        let mut convs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (pre, c) = conv.forward(&x)?;
            x = leaky_relu(&pre, SLOPE);
            convs.push((c, pre));
        }
        let (out, head) = self.head.forward(&x)?;
        Ok((out, DiscriminatorCache { convs, head }))
    }

    pub fn discriminate(&self, image: &Tensor<T>, label: &Tensor<T>) -> Result<Tensor<T>> {
        let labels = decode_one_hot(label, self.classes)?;
        Ok(self.forward_labels(image, &labels)?.0)
    }

    /// Returns the gradient with respect to the image (label planes dropped).
    pub fn backward(&mut self, cache: &DiscriminatorCache<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(&cache.head, g)?;
        for (conv, (c, pre)) in self.convs.iter_mut().zip(&cache.convs).rev() {
            g = leaky_relu_backward(pre, &g, SLOPE);
            g = conv.backward(c, &g)?;
        }
        Ok(split_channels(&g, self.in_channels)?.0)
    }
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
