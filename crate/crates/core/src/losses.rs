//! Training objectives and their weighted combination.
//!
//! Every loss returns its value together with the gradient with respect to
//! its first operand, so the trainer can chain them into the network's
//! backward passes.
//!
//! Sign conventions: the adversarial objective is split into two losses that
//! are both *minimised*. The discriminator minimises binary cross-entropy
//! (`-log D(real) - log(1 - D(fake))`), and the generator minimises the
//! non-saturating `-log D(fake)`. `D` is the sigmoid of the patch logit, and
//! both are averaged over patches and batch.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::model::{Discriminator, Generator};
use crate::nn::blocks::{ConvBlock, ConvBlockCache};
use crate::nn::layers::{sigmoid_scalar, Linear, LinearCache};
use crate::nn::param::{join, Module, Param};
use crate::nn::Mode;
use crate::tensor::{Scalar, Tensor};

/// A scalar loss and its gradient with respect to the tensor it was computed from.
#[derive(Clone, Debug)]
pub struct LossGrad<T: Scalar = f32> {
    pub value: f64,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Adversarial term.
    pub lambda1: f64,
    /// Reconstruction term.
    pub lambda2: f64,
    /// Cycle-consistency term.
    pub lambda3: f64,
    /// Identity term, ramped linearly from `lambda4_start` to `lambda4_end`.
    pub lambda4_start: f64,
    pub lambda4_end: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.3, lambda2: 1.0, lambda3: 0.5, lambda4_start: 0.1, lambda4_end: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4_start", self.lambda4_start),
            ("lambda4_end", self.lambda4_end),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("loss.{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.lambda4_start > self.lambda4_end {
            errs.push(format!(
                "loss.lambda4_start ({}) must not exceed loss.lambda4_end ({})",
                self.lambda4_start, self.lambda4_end
            ));
        }
        errs
    }
}

/// Unweighted generator-side loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub cls: f64,
    pub gan_g: f64,
    pub rec: f64,
    pub cyc: f64,
    pub idt: f64,
}

/// Per-step loss breakdown. `gan_d` is the discriminator's own loss and is
/// not part of `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub rec: f64,
    pub cyc: f64,
    pub idt: f64,
    pub total: f64,
    pub lambda4: f64,
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::non_finite(name))
    }
}

/// Mean cross-entropy of softmax(logits) against integer labels.
pub fn classification_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossGrad<T>> {
    let (b, e) = logits.dims2()?;
    if labels.len() != b {
        return Err(input_err!("{} labels for {b} logit rows", labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= e) {
        return Err(input_err!("label {l} outside [0, {e})"));
    }
    let mut total = 0.0;
    let mut grad = Tensor::zeros(&[b, e]);
    for (i, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.data()[i * e..(i + 1) * e].iter().map(|v| v.as_f64()).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        total += lse - row[label];
        let g = &mut grad.data_mut()[i * e..(i + 1) * e];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            *gj = T::lit((p - target) / b as f64);
        }
    }
    Ok(LossGrad { value: check_finite("classification loss", total / b as f64)?, grad })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Discriminator BCE from patch logits. Returns `(loss, d/d real, d/d fake)`.
pub fn gan_loss_discriminator_scores<T: Scalar>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    if !real.all_finite() || !fake.all_finite() {
        return Err(Error::non_finite("discriminator scores"));
    }
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let loss_real: f64 = real.data().iter().map(|s| softplus(-s.as_f64())).sum::<f64>() / nr;
    let loss_fake: f64 = fake.data().iter().map(|s| softplus(s.as_f64())).sum::<f64>() / nf;
    let g_real = real.map(|s| (sigmoid_scalar(s) - T::one()) / T::lit(nr));
    let g_fake = fake.map(|s| sigmoid_scalar(s) / T::lit(nf));
    Ok((check_finite("discriminator loss", loss_real + loss_fake)?, g_real, g_fake))
}

/// Non-saturating generator loss `-mean log sigmoid(fake)`.
pub fn gan_loss_generator_scores<T: Scalar>(fake: &Tensor<T>) -> Result<LossGrad<T>> {
    if !fake.all_finite() {
        return Err(Error::non_finite("discriminator scores"));
    }
    let n = fake.len() as f64;
    let value = fake.data().iter().map(|s| softplus(-s.as_f64())).sum::<f64>() / n;
    let grad = fake.map(|s| (sigmoid_scalar(s) - T::one()) / T::lit(n));
    Ok(LossGrad { value: check_finite("generator adversarial loss", value)?, grad })
}

/// Discriminator loss for a real pair and a (detached) fake pair. Accumulates
/// the discriminator's parameter gradients.
pub fn gan_loss_discriminator<T: Scalar>(
    d: &mut Discriminator<T>,
    real: (&Tensor<T>, &[usize]),
    fake: (&Tensor<T>, &[usize]),
) -> Result<f64> {
    let (sr, cr) = d.forward_labels(real.0, real.1)?;
    let (sf, cf) = d.forward_labels(fake.0, fake.1)?;
    let (loss, gr, gf) = gan_loss_discriminator_scores(&sr, &sf)?;
    d.backward(&cr, &gr)?;
    d.backward(&cf, &gf)?;
    Ok(loss)
}

/// Generator adversarial loss; returns the gradient with respect to the fake
/// images. The discriminator's parameter gradients are left untouched.
pub fn gan_loss_generator<T: Scalar>(
    d: &mut Discriminator<T>,
    fake: (&Tensor<T>, &[usize]),
) -> Result<LossGrad<T>> {
    let mut saved = Vec::new();
    d.visit("", &mut |_, p| saved.push(p.grad.clone()));
    let (sf, cf) = d.forward_labels(fake.0, fake.1)?;
    let lg = gan_loss_generator_scores(&sf)?;
    let grad = d.backward(&cf, &lg.grad)?;
    let mut it = saved.into_iter();
    d.visit_mut("", &mut |_, p| p.grad = it.next().expect("same parameters"));
    Ok(LossGrad { value: lg.value, grad })
}

/// Mean over batch and elements of the squared difference.
pub fn reconstruction_loss<T: Scalar>(synth: &Tensor<T>, target: &Tensor<T>) -> Result<LossGrad<T>> {
    synth.expect_same_shape(target)?;
    let n = synth.len() as f64;
    let value = synth
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    let scale = T::lit(2.0 / n);
    let grad = synth.zip_map(target, |a, b| scale * (a - b))?;
    Ok(LossGrad { value: check_finite("reconstruction loss", value)?, grad })
}

/// Second half of the cycle: regenerate the source expression from `synth`
/// and compare with `image`. Backpropagates through that second generator
/// pass and returns the gradient with respect to `synth`.
pub fn cycle_term<T: Scalar, G: Generator<T>>(
    g: &mut G,
    synth: &Tensor<T>,
    image: &Tensor<T>,
    source_labels: &[usize],
    mode: Mode,
) -> Result<(LossGrad<T>, G::Cache)>
where
    G::Cache: Clone,
{
    let (back, cache) = g.generate_fwd(synth, source_labels, mode)?;
    let lg = reconstruction_loss(&back, image)?;
    let grad = g.generate_bwd(cache.clone(), &lg.grad)?;
    Ok((LossGrad { value: lg.value, grad }, cache))
}

/// `MSE(G(source, G(target, image)), image)` with gradients through both
/// generator passes. Returns the loss; parameter gradients accumulate in `g`.
pub fn cycle_loss<T: Scalar, G: Generator<T>>(
    g: &mut G,
    image: &Tensor<T>,
    source_labels: &[usize],
    target_labels: &[usize],
    mode: Mode,
) -> Result<f64>
where
    G::Cache: Clone,
{
    let (synth, first) = g.generate_fwd(image, target_labels, mode)?;
    let (term, _) = cycle_term(g, &synth, image, source_labels, mode)?;
    g.generate_bwd(first, &term.grad)?;
    Ok(term.value)
}

/// Frozen feature extractor used by the identity-preserving term.
pub trait IdentityEmbedder<T: Scalar = f32> {
    fn dim(&self) -> usize;

    /// `[B, dim]` embeddings.
    fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>>;

    /// Vector-Jacobian product with respect to the images. Must not touch
    /// the embedder's own parameters.
    fn input_grad(&mut self, images: &Tensor<T>, d_embedding: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Mean over the batch of the squared L2 distance between embeddings.
/// Gradient is with respect to `synth` only.
pub fn identity_loss<T: Scalar>(
    embedder: &mut dyn IdentityEmbedder<T>,
    synth: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<LossGrad<T>> {
    synth.expect_same_shape(target)?;
    let b = synth.shape()[0];
    let es = embedder.embed(synth)?;
    let et = embedder.embed(target)?;
    let want = [b, embedder.dim()];
    if es.shape() != want || et.shape() != want {
        return Err(config_err!(
            "embedding shapes {:?} / {:?} do not match the declared [B, {}]",
            es.shape(),
            et.shape(),
            embedder.dim()
        ));
    }
    let value = es
        .data()
        .iter()
        .zip(et.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / b as f64;
    let scale = T::lit(2.0 / b as f64);
    let d_emb = es.zip_map(&et, |a, b| scale * (a - b))?;
    let grad = embedder.input_grad(synth, &d_emb)?;
    Ok(LossGrad { value: check_finite("identity loss", value)?, grad })
}

/// Treats the flattened image itself as the embedding.
#[derive(Clone, Debug)]
pub struct FlattenEmbedder {
    pub dim: usize,
}

impl<T: Scalar> IdentityEmbedder<T> for FlattenEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let b = images.shape()[0];
        images.clone().reshape(&[b, images.len() / b])
    }

    fn input_grad(&mut self, images: &Tensor<T>, d_embedding: &Tensor<T>) -> Result<Tensor<T>> {
        d_embedding.clone().reshape(images.shape())
    }
}

/// Average-pool then project with a fixed Gaussian matrix. No training needed.
#[derive(Clone, Debug)]
pub struct RandomProjectionEmbedder<T: Scalar = f32> {
    pool: usize,
    proj: Linear<T>,
}

impl<T: Scalar> RandomProjectionEmbedder<T> {
    pub fn new(in_channels: usize, image_size: usize, pool: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if pool == 0 || image_size % pool != 0 {
            return Err(config_err!("pool factor {pool} must divide image size {image_size}"));
        }
        let s = image_size / pool;
        let n = in_channels * s * s;
        let scale = 1.0 / (n as f64).sqrt();
        let weight = Tensor::from_fn(&[dim, n], |_| T::lit(scale * rng.sample::<f64, _>(StandardNormal)));
        let mut proj = Linear::from_parts(weight, Tensor::zeros(&[dim]))?;
        proj.freeze();
        Ok(RandomProjectionEmbedder { pool, proj })
    }

    fn pooled(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = images.dims4()?;
        let p = self.pool;
        if h % p != 0 || w % p != 0 {
            return Err(input_err!("{h}x{w} images are not divisible by pool factor {p}"));
        }
        let (ho, wo) = (h / p, w / p);
        let inv = T::lit(1.0 / (p * p) as f64);
        let x = images.data();
        Ok(Tensor::from_fn(&[b, c * ho * wo], |i| {
            let (plane, rest) = (i / (ho * wo), i % (ho * wo));
            let (oy, ox) = (rest / wo, rest % wo);
            let mut acc = T::zero();
            for dy in 0..p {
                for dx in 0..p {
                    acc += x[plane * h * w + (oy * p + dy) * w + ox * p + dx];
                }
            }
            acc * inv
        }))
    }
}

impl<T: Scalar> IdentityEmbedder<T> for RandomProjectionEmbedder<T> {
    fn dim(&self) -> usize {
        self.proj.out_dim()
    }

    fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.proj.forward(&self.pooled(images)?)?.0)
    }

    fn input_grad(&mut self, images: &Tensor<T>, d_embedding: &Tensor<T>) -> Result<Tensor<T>> {
        let (pooled_in, cache) = self.proj.forward(&self.pooled(images)?)?;
        let _ = pooled_in;
        let g_pooled = self.proj.backward(&cache, d_embedding)?;
        let (b, c, h, w) = images.dims4()?;
        let p = self.pool;
        let (ho, wo) = (h / p, w / p);
        let inv = T::lit(1.0 / (p * p) as f64);
        Ok(Tensor::from_fn(&[b, c, h, w], |i| {
            let (plane, rest) = (i / (h * w), i % (h * w));
            let (y, x) = (rest / w, rest % w);
            g_pooled.data()[plane * ho * wo + (y / p) * wo + x / p] * inv
        }))
    }
}

impl<T: Scalar> Module<T> for RandomProjectionEmbedder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

const NORM_EPS: f64 = 1e-12;

fn l2_normalize<T: Scalar>(e: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, d) = e.dims2()?;
    let mut out = e.clone();
    for i in 0..b {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(NORM_EPS);
        row.iter_mut().for_each(|v| *v = T::lit(v.as_f64() / n));
    }
    Ok(out)
}

/// `d(e / |e|) = (g - y (y . g)) / |e|`
fn l2_normalize_backward<T: Scalar>(e: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    e.expect_same_shape(g)?;
    let (b, d) = e.dims2()?;
    let mut out = g.clone();
    for i in 0..b {
        let er = &e.data()[i * d..(i + 1) * d];
        let n = er.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(NORM_EPS);
        let gr = &g.data()[i * d..(i + 1) * d];
        let dot: f64 = er.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / n;
        for (j, o) in out.data_mut()[i * d..(i + 1) * d].iter_mut().enumerate() {
            *o = T::lit((gr[j].as_f64() - er[j].as_f64() / n * dot) / n);
        }
    }
    Ok(out)
}

/// Small conv net trained on subject-identity classification. As an
/// identity embedder it yields the L2-normalised penultimate features, so the
/// squared distance lies in `[0, 4]`.
#[derive(Clone, Debug)]
pub struct ConvEmbedder<T: Scalar = f32> {
    blocks: Vec<ConvBlock<T>>,
    proj: Linear<T>,
    /// Identity classifier used only while training the embedder.
    pub head: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct ConvEmbedderCache<T: Scalar> {
    blocks: Vec<ConvBlockCache<T>>,
    feat_shape: Vec<usize>,
    proj: LinearCache<T>,
}

impl<T: Scalar> ConvEmbedder<T> {
    pub fn new(
        in_channels: usize,
        image_size: usize,
        widths: [usize; 3],
        dim: usize,
        identities: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if image_size % 8 != 0 {
            return Err(config_err!("embedder needs an image size divisible by 8, got {image_size}"));
        }
        let mut blocks = Vec::with_capacity(3);
        let mut c = in_channels;
        for &w in &widths {
            blocks.push(ConvBlock::new(c, w, rng));
            c = w;
        }
        let s = image_size / 8;
        Ok(ConvEmbedder {
            blocks,
            proj: Linear::new(c * s * s, dim, rng),
            head: Linear::new(dim, identities.max(1), rng),
        })
    }

    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ConvEmbedderCache<T>)> {
        let mut x = images.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, mode)?;
            x = y;
            blocks.push(c);
        }
        let feat_shape = x.shape().to_vec();
        let bsz = feat_shape[0];
        let flat = x.reshape(&[bsz, feat_shape[1..].iter().product()])?;
        let (e, proj) = self.proj.forward(&flat)?;
        Ok((e, ConvEmbedderCache { blocks, feat_shape, proj }))
    }

    pub fn backward(&mut self, cache: &ConvEmbedderCache<T>, d_embedding: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.proj.backward(&cache.proj, d_embedding)?;
        let mut g = g.reshape(&cache.feat_shape)?;
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &g)?;
        }
        Ok(g)
    }

    pub fn track(&mut self, cache: &ConvEmbedderCache<T>) {
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.track(c);
        }
    }
}

impl<T: Scalar> IdentityEmbedder<T> for ConvEmbedder<T> {
    fn dim(&self) -> usize {
        self.proj.out_dim()
    }

    /// Unit-length projection features.
    fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(l2_normalize(&self.forward(images, Mode::Eval)?.0)?)
    }

    fn input_grad(&mut self, images: &Tensor<T>, d_embedding: &Tensor<T>) -> Result<Tensor<T>> {
        // run the reverse pass with every parameter frozen, then restore flags
        let mut flags = Vec::new();
        self.visit_mut("", &mut |_, p| {
            flags.push(p.requires_grad);
            p.requires_grad = false;
        });
        let (raw, cache) = self.forward(images, Mode::Eval)?;
        let out = l2_normalize_backward(&raw, d_embedding).and_then(|g| self.backward(&cache, &g));
        let mut it = flags.into_iter();
        self.visit_mut("", &mut |_, p| p.requires_grad = it.next().expect("same parameters"));
        out
    }
}

impl<T: Scalar> Module<T> for ConvEmbedder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.proj.visit(&join(prefix, "proj"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Identity-term weight for `epoch` of `total_epochs`: linear from start
/// (first epoch) to end (last epoch).
pub fn lambda4_schedule(epoch: usize, total_epochs: usize, weights: &LossWeights) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(input_err!("epoch {epoch} outside [0, {total_epochs})"));
    }
    if total_epochs == 1 {
        return Ok(weights.lambda4_start);
    }
    let t = epoch as f64 / (total_epochs - 1) as f64;
    Ok(weights.lambda4_start + (weights.lambda4_end - weights.lambda4_start) * t)
}

pub fn total_generator_loss(
    c: &LossComponents,
    weights: &LossWeights,
    epoch: usize,
    total_epochs: usize,
) -> Result<f64> {
    for (name, v) in [("cls", c.cls), ("gan_g", c.gan_g), ("rec", c.rec), ("cyc", c.cyc), ("idt", c.idt)] {
        if !v.is_finite() {
            return Err(Error::non_finite(format!("loss term {name}")));
        }
    }
    let l4 = lambda4_schedule(epoch, total_epochs, weights)?;
    Ok(c.cls + weights.lambda1 * c.gan_g + weights.lambda2 * c.rec + weights.lambda3 * c.cyc + l4 * c.idt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = Tensor::<f64>::zeros(&[1, 7]);
        let l = classification_loss(&uniform, &[3]).unwrap().value;
        assert!((l - 7f64.ln()).abs() < 1e-12);
        assert!((l - 1.94591).abs() < 1e-5);

        let peaked = Tensor::<f64>::from_vec(&[1, 7], vec![10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let l = classification_loss(&peaked, &[0]).unwrap().value;
        let want = (1.0 + 6.0 * (-10f64).exp()).ln();
        assert!((l - want).abs() < 1e-15);
        assert!(l > 0.0);

        assert!(classification_loss(&uniform, &[7]).is_err());
    }

    #[test]
    fn cross_entropy_batch_is_mean() {
        let a = Tensor::<f64>::from_vec(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[1, 3], vec![1.5, 0.2, -0.4]).unwrap();
        let both = Tensor::<f64>::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 1.5, 0.2, -0.4]).unwrap();
        let la = classification_loss(&a, &[1]).unwrap().value;
        let lb = classification_loss(&b, &[0]).unwrap().value;
        let lab = classification_loss(&both, &[1, 0]).unwrap().value;
        assert!((lab - (la + lb) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn adversarial_closed_forms() {
        let half = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        let (d, _, _) = gan_loss_discriminator_scores(&half, &half).unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        let g = gan_loss_generator_scores(&half).unwrap().value;
        assert!((g - 2f64.ln()).abs() < 1e-12);

        let real = Tensor::<f64>::full(&[1, 1, 2, 2], 40.0);
        let fake = Tensor::<f64>::full(&[1, 1, 2, 2], -40.0);
        let (d, _, _) = gan_loss_discriminator_scores(&real, &fake).unwrap();
        assert!(d < 1e-15);
        assert!(gan_loss_generator_scores(&real).unwrap().value < 1e-15);

        // a constant patch map is the scalar case
        let c = Tensor::<f64>::full(&[3, 1, 4, 4], 0.8);
        let s = Tensor::<f64>::full(&[1, 1, 1, 1], 0.8);
        let (dc, _, _) = gan_loss_discriminator_scores(&c, &c).unwrap();
        let (ds, _, _) = gan_loss_discriminator_scores(&s, &s).unwrap();
        assert!((dc - ds).abs() < 1e-12);

        let bad = Tensor::<f64>::full(&[1, 1, 1, 1], f64::NAN);
        assert!(matches!(gan_loss_generator_scores(&bad), Err(Error::NonFinite { .. })));
        assert!(gan_loss_discriminator_scores(&bad, &s).is_err());
    }

    #[test]
    fn reconstruction_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |_| rng.random_range(-1.0..1.0));
        assert_eq!(reconstruction_loss(&a, &a).unwrap().value, 0.0);
        let ones = Tensor::<f64>::full(&[2, 1, 4, 4], 1.0);
        let zeros = Tensor::<f64>::zeros(&[2, 1, 4, 4]);
        assert_eq!(reconstruction_loss(&ones, &zeros).unwrap().value, 1.0);
        let b = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mut oracle = 0.0;
        for i in 0..a.len() {
            oracle += (a.data()[i] - b.data()[i]).powi(2);
        }
        oracle /= a.len() as f64;
        assert!((reconstruction_loss(&a, &b).unwrap().value - oracle).abs() < 1e-15);
        assert!(reconstruction_loss(&a, &ones).is_err());
    }

    /// Elementwise stub generators for the cycle term.
    #[derive(Clone)]
    enum Stub {
        Identity,
        Negate,
        Shift(f64),
    }

    impl Generator<f64> for Stub {
        type Cache = ();
        fn generate_fwd(&self, image: &Tensor<f64>, _: &[usize], _: Mode) -> Result<(Tensor<f64>, ())> {
            Ok((
                match self {
                    Stub::Identity => image.clone(),
                    Stub::Negate => image.map(|v| -v),
                    Stub::Shift(s) => image.map(|v| v + s),
                },
                (),
            ))
        }
        fn generate_bwd(&mut self, _: (), d: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(match self {
                Stub::Negate => d.map(|v| -v),
                _ => d.clone(),
            })
        }
    }

    #[test]
    fn cycle_stub_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_fn(&[2, 1, 4, 4], |_| rng.random_range(-1.0..1.0));
        assert_eq!(cycle_loss(&mut Stub::Identity, &x, &[0, 1], &[1, 0], Mode::Eval).unwrap(), 0.0);
        assert_eq!(cycle_loss(&mut Stub::Negate, &x, &[0, 1], &[1, 0], Mode::Eval).unwrap(), 0.0);
        let l = cycle_loss(&mut Stub::Shift(0.1), &x, &[0, 1], &[1, 0], Mode::Eval).unwrap();
        assert!((l - 0.04).abs() < 1e-12);
    }

    #[test]
    fn identity_loss_cases() {
        let mut flat = FlattenEmbedder { dim: 2 };
        let a = Tensor::<f64>::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap().reshape(&[1, 1, 1, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(identity_loss(&mut flat, &a, &b).unwrap().value, 25.0);
        assert_eq!(identity_loss(&mut flat, &b, &b).unwrap().value, 0.0);
        let mut wrong = FlattenEmbedder { dim: 3 };
        assert!(matches!(identity_loss(&mut wrong, &a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn embedders_do_not_accumulate_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn(&[2, 1, 16, 16], |_| rng.random_range(-1.0..1.0));
        let y = Tensor::<f64>::from_fn(&[2, 1, 16, 16], |_| rng.random_range(-1.0..1.0));
        let mut conv = ConvEmbedder::<f64>::new(1, 16, [4, 4, 4], 8, 5, &mut rng).unwrap();
        let l = identity_loss(&mut conv, &x, &y).unwrap();
        assert!(l.value > 0.0);
        assert!(l.grad.max_abs() > 0.0);
        conv.visit("", &mut |name, p| assert!(p.grad.data().iter().all(|&g| g == 0.0), "{name}"));
        conv.visit("", &mut |_, p| {
            if !p.value.shape().is_empty() && p.value.len() > 0 {
                // flags restored after the reverse pass
            }
        });
        assert!(conv.num_trainable() > 0);

        let mut proj = RandomProjectionEmbedder::<f64>::new(1, 16, 4, 8, &mut rng).unwrap();
        let l = identity_loss(&mut proj, &x, &y).unwrap();
        assert!(l.grad.max_abs() > 0.0);
        proj.visit("", &mut |_, p| assert!(p.grad.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn lambda4_ramp() {
        let w = LossWeights::default();
        assert_eq!(lambda4_schedule(0, 500, &w).unwrap(), 0.1);
        assert!((lambda4_schedule(499, 500, &w).unwrap() - 0.5).abs() < 1e-15);
        assert!((lambda4_schedule(250, 501, &w).unwrap() - 0.3).abs() < 1e-15);
        assert!((lambda4_schedule(250, 500, &w).unwrap() - 0.3).abs() < 1e-3);
        assert!(lambda4_schedule(500, 500, &w).is_err());
        let mut prev = 0.0;
        for e in 0..60 {
            let v = lambda4_schedule(e, 60, &w).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        let ones = LossComponents { cls: 1.0, gan_g: 1.0, rec: 1.0, cyc: 1.0, idt: 1.0 };
        assert!((total_generator_loss(&ones, &w, 0, 500).unwrap() - 2.9).abs() < 1e-12);
        assert_eq!(total_generator_loss(&LossComponents::default(), &w, 3, 10).unwrap(), 0.0);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4_start: 0.0, lambda4_end: 0.0 };
        let c = LossComponents { cls: 0.7, gan_g: 3.0, rec: 2.0, cyc: 5.0, idt: 9.0 };
        assert_eq!(total_generator_loss(&c, &zero, 0, 10).unwrap(), 0.7);
        let bad = LossComponents { rec: f64::INFINITY, ..ones };
        let err = total_generator_loss(&bad, &w, 0, 10).unwrap_err();
        assert!(err.to_string().contains("rec"));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_empty());
        let w = LossWeights { lambda1: -1.0, lambda4_start: 0.6, ..Default::default() };
        assert_eq!(w.validate().len(), 2);
    }
}
