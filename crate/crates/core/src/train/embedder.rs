use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{EmbedderKind, TrainConfig};
use super::optim::{cosine_lr, Adam};
use crate::data::{apply_transform, derive_seed, Sample, Transform};
use crate::error::{input_err, Result};
use crate::losses::{classification_loss, ConvEmbedder, IdentityEmbedder, RandomProjectionEmbedder};
use crate::nn::param::Module;
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Build the frozen identity embedder for a run. The conv variant is first
/// trained to classify the subjects of `samples` (canvas-size images).
pub fn build_identity_embedder(cfg: &TrainConfig, samples: &[Sample]) -> Result<Box<dyn IdentityEmbedder<f32>>> {
    let ec = &cfg.embedder;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 10, 0));
    let size = cfg.data.crop;
    let channels = cfg.arch.in_channels;
    match ec.kind {
        EmbedderKind::RandomProjection => {
            let pool = if size % 4 == 0 { 4 } else { 1 };
            Ok(Box::new(RandomProjectionEmbedder::new(channels, size, pool, ec.dim, &mut rng)?))
        }
        EmbedderKind::Conv => Ok(Box::new(train_conv_embedder(cfg, samples)?)),
    }
}

pub fn train_conv_embedder(cfg: &TrainConfig, samples: &[Sample]) -> Result<ConvEmbedder<f32>> {
    if samples.len() < 2 {
        return Err(input_err!("need at least two samples to train the identity embedder"));
    }
    let ec = &cfg.embedder;
    let ids: BTreeMap<usize, usize> = {
        let mut s: Vec<usize> = samples.iter().map(|s| s.subject).collect();
        s.sort_unstable();
        s.dedup();
        s.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11, 0));
    let mut net = ConvEmbedder::new(cfg.arch.in_channels, cfg.data.crop, ec.widths, ec.dim, ids.len(), &mut rng)?;
    let mut adam = Adam::default();
    let batch = cfg.batch_size.min(samples.len());
    let per_epoch = samples.len() / batch;
    let total = (per_epoch * ec.epochs).max(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 0..ec.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 12, epoch as u64)));
        for chunk in order.chunks_exact(batch) {
            let mut imgs = Vec::with_capacity(batch);
            for &i in chunk {
                let mut r = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 13, (step * batch + i) as u64));
                imgs.push(apply_transform(&samples[i].image, &Transform::draw(&cfg.data, &mut r), &cfg.data)?);
            }
            let x = Tensor::stack(&imgs.iter().collect::<Vec<_>>())?;
            let labels: Vec<usize> = chunk.iter().map(|&i| ids[&samples[i].subject]).collect();
            net.zero_grad();
            let (emb, cache) = net.forward(&x, Mode::Train)?;
            let (logits, head_cache) = net.head.forward(&emb)?;
            let loss = classification_loss(&logits, &labels)?;
            let d_emb = net.head.backward(&head_cache, &loss.grad)?;
            net.backward(&cache, &d_emb)?;
            net.track(&cache);
            adam.step(&mut net, cosine_lr(step.min(total - 1), total - 1, ec.lr, ec.lr * 0.01)?);
            step += 1;
        }
    }
    net.freeze();
    Ok(net)
}
