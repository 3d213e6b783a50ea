use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{decode_one_hot, one_hot, Generator};
use crate::convflu::{GateOutputs, TransferenceBlock, TransferenceCache};
use crate::error::{config_err, input_err, Result};
use crate::nn::blocks::{ConvBlock, ConvBlockCache, DeconvBlock, DeconvBlockCache};
use crate::nn::layers::{relu, relu_backward, tanh, tanh_backward, Conv2d, Conv2dCache, Linear, LinearCache};
use crate::nn::param::{join, Module, Param};
use crate::nn::Mode;
use crate::tensor::{concat_channels, split_channels, Scalar, Tensor};

/// How the FER and FES branches exchange features after each encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// Gated transference blocks (the full model).
    Convflu,
    /// Hard sharing: both branches continue from the element-wise sum.
    Summation,
    /// FER branch only; no synthesis path at all.
    SingleTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub ladder: [usize; 4],
    /// Channels of the label-transformer output; a quarter of the deepest width when unset.
    pub transformer_channels: Option<usize>,
    pub classifier_hidden: usize,
    pub sharing: Sharing,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            classes: 6,
            in_channels: 1,
            image_size: 96,
            ladder: [8, 16, 32, 64],
            transformer_channels: None,
            classifier_hidden: 64,
            sharing: Sharing::Convflu,
        }
    }
}

impl ArchConfig {
    pub fn transformer_channels(&self) -> usize {
        self.transformer_channels.unwrap_or((self.ladder[3] / 4).max(1))
    }

    /// Spatial extent after the four encoder blocks.
    pub fn feature_size(&self) -> usize {
        self.image_size / 16
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.classes < 2 {
            errs.push(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.in_channels == 0 {
            errs.push("in_channels must be positive".into());
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            errs.push(format!("image_size must be a positive multiple of 32, got {}", self.image_size));
        }
        if self.ladder.iter().any(|&w| w == 0) {
            errs.push(format!("channel ladder must be positive, got {:?}", self.ladder));
        }
        if self.classifier_hidden == 0 {
            errs.push("classifier_hidden must be positive".into());
        }
        if self.transformer_channels == Some(0) {
            errs.push("transformer_channels must be positive".into());
        }
        errs
    }
}

/// Label transformer: one-hot -> linear -> `[C_t, s/2, s/2]` -> deconv block -> `[C_t, s, s]`.
#[derive(Clone, Debug)]
struct LabelTransformer<T: Scalar> {
    fc: Linear<T>,
    up: DeconvBlock<T>,
    channels: usize,
    seed_size: usize,
}

#[derive(Clone, Debug)]
struct TransformerCache<T: Scalar> {
    fc: LinearCache<T>,
    up: DeconvBlockCache<T>,
}

#[derive(Clone, Debug)]
struct Classifier<T: Scalar> {
    fc1: Linear<T>,
    fc2: Linear<T>,
}

#[derive(Clone, Debug)]
struct ClassifierCache<T: Scalar> {
    in_shape: Vec<usize>,
    fc1: LinearCache<T>,
    hidden: Tensor<T>,
    fc2: LinearCache<T>,
}

impl<T: Scalar> Classifier<T> {
    fn forward(&self, features: &Tensor<T>) -> Result<(Tensor<T>, ClassifierCache<T>)> {
        let b = features.shape()[0];
        let flat = features.clone().reshape(&[b, features.len() / b])?;
        let (h, fc1) = self.fc1.forward(&flat)?;
        let hidden = relu(&h);
        let (logits, fc2) = self.fc2.forward(&hidden)?;
        Ok((logits, ClassifierCache { in_shape: features.shape().to_vec(), fc1, hidden, fc2 }))
    }

    fn backward(&mut self, cache: &ClassifierCache<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.fc2.backward(&cache.fc2, g)?;
        let g = relu_backward(&cache.hidden, &g);
        self.fc1.backward(&cache.fc1, &g)?.reshape(&cache.in_shape)
    }
}

/// Gate activations of one transference block.
#[derive(Clone, Debug)]
pub struct BlockGates<T: Scalar = f32> {
    /// FES -> FER direction (the FER branch is task x).
    pub to_fer: GateOutputs<T>,
    /// FER -> FES direction.
    pub to_fes: GateOutputs<T>,
}

#[derive(Clone, Debug)]
pub struct JointOutput<T: Scalar = f32> {
    pub logits: Tensor<T>,
    pub synth: Option<Tensor<T>>,
    pub gates: Vec<BlockGates<T>>,
}

impl<T: Scalar> JointOutput<T> {
    pub fn gate_count(&self) -> usize {
        2 * self.gates.len()
    }
}

#[derive(Clone, Debug)]
enum ShareCache<T: Scalar> {
    Gated(TransferenceCache<T>),
    Summed,
    Isolated,
}

#[derive(Clone, Debug)]
struct SynthCache<T: Scalar> {
    fes_channels: usize,
    transformer: TransformerCache<T>,
    decoder: Vec<DeconvBlockCache<T>>,
    head: Conv2dCache<T>,
    out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct JointCache<T: Scalar> {
    image_shape: Vec<usize>,
    fer: Vec<ConvBlockCache<T>>,
    fes: Vec<ConvBlockCache<T>>,
    share: Vec<ShareCache<T>>,
    classifier: ClassifierCache<T>,
    synth: Option<SynthCache<T>>,
}

#[derive(Clone, Debug)]
pub struct FersnetModel<T: Scalar = f32> {
    pub config: ArchConfig,
    fer: Vec<ConvBlock<T>>,
    fes: Vec<ConvBlock<T>>,
    transfer: Vec<TransferenceBlock<T>>,
    classifier: Classifier<T>,
    transformer: Option<LabelTransformer<T>>,
    decoder: Vec<DeconvBlock<T>>,
    head: Option<Conv2d<T>>,
}

impl<T: Scalar> FersnetModel<T> {
    pub fn new(config: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(config_err!("{}", errs.join("; ")));
        }
        let ladder = config.ladder;
        let mut fer = Vec::with_capacity(4);
        let mut fes = Vec::new();
        let mut transfer = Vec::new();
        let mut c = config.in_channels;
        for &w in &ladder {
            fer.push(ConvBlock::new(c, w, rng));
            if config.sharing != Sharing::SingleTask {
                fes.push(ConvBlock::new(c, w, rng));
            }
            if config.sharing == Sharing::Convflu {
                transfer.push(TransferenceBlock::new(w, rng));
            }
            c = w;
        }
        let fs = config.feature_size();
        let classifier = Classifier {
            fc1: Linear::new(ladder[3] * fs * fs, config.classifier_hidden, rng),
            fc2: Linear::new(config.classifier_hidden, config.classes, rng),
        };
        let (transformer, decoder, head) = if config.sharing == Sharing::SingleTask {
            (None, Vec::new(), None)
        } else {
            let ct = config.transformer_channels();
            let seed = fs / 2;
            let transformer = LabelTransformer {
                fc: Linear::new(config.classes, ct * seed * seed, rng),
                up: DeconvBlock::new(ct, ct, rng),
                channels: ct,
                seed_size: seed,
            };
            let widths = [ladder[2], ladder[1], ladder[0], ladder[0]];
            let mut decoder = Vec::with_capacity(4);
            let mut c = ladder[3] + ct;
            for &w in &widths {
                decoder.push(DeconvBlock::new(c, w, rng));
                c = w;
            }
            let head = Conv2d::new(c, config.in_channels, 3, 1, 1, rng);
            (Some(transformer), decoder, Some(head))
        };
        Ok(FersnetModel { config, fer, fes, transfer, classifier, transformer, decoder, head })
    }

    pub fn has_synthesis(&self) -> bool {
        self.transformer.is_some()
    }

    pub fn transference_blocks_mut(&mut self) -> &mut [TransferenceBlock<T>] {
        &mut self.transfer
    }

    pub fn transference_blocks(&self) -> &[TransferenceBlock<T>] {
        &self.transfer
    }

    /// Shut every memory gate so neither branch receives the other's features.
    pub fn close_all_memory_gates(&mut self) {
        self.transfer.iter_mut().for_each(TransferenceBlock::close_memory_gates);
    }

    /// Parameter count of everything that can influence the FER logits:
    /// FER encoder, classifier and the FES->FER gating units.
    pub fn fer_path_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |name, p| {
            let fer_side = name.starts_with("fer.")
                || name.starts_with("classifier.")
                || (name.starts_with("transfer.") && name.contains(".x_from_y."));
            if p.requires_grad && fer_side {
                n += p.value.len();
            }
        });
        n
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<usize> {
        let (b, c, h, w) = image.dims4()?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(input_err!("image extent {h}x{w} is not divisible by 16"));
        }
        if c != self.config.in_channels || h != self.config.image_size || w != self.config.image_size {
            return Err(config_err!(
                "model expects [B,{},{},{}] images, got {:?}",
                self.config.in_channels,
                self.config.image_size,
                self.config.image_size,
                image.shape()
            ));
        }
        Ok(b)
    }

    fn transformer_fwd(&self, onehot: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, TransformerCache<T>)> {
        let tr = self
            .transformer
            .as_ref()
            .ok_or_else(|| config_err!("single-task model has no label transformer"))?;
        let b = onehot.shape()[0];
        let (h, fc) = tr.fc.forward(onehot)?;
        let seed = h.reshape(&[b, tr.channels, tr.seed_size, tr.seed_size])?;
        let (out, up) = tr.up.forward(&seed, mode)?;
        Ok((out, TransformerCache { fc, up }))
    }

    /// Feature map produced from a target label, `[B, C_t, s, s]` where `s`
    /// matches the encoder output extent.
    pub fn transformer_forward(&self, label: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let labels = decode_one_hot(label, self.config.classes)?;
        let onehot = one_hot(&labels, self.config.classes)?;
        Ok(self.transformer_fwd(&onehot, mode)?.0)
    }

    fn forward_impl(
        &self,
        image: &Tensor<T>,
        target: Option<&[usize]>,
        mode: Mode,
    ) -> Result<(JointOutput<T>, JointCache<T>)> {
        let b = self.check_image(image)?;
        if let Some(t) = target {
            if t.len() != b {
                return Err(input_err!("{} target labels for a batch of {b}", t.len()));
            }
            if !self.has_synthesis() {
                return Err(config_err!("single-task model cannot synthesize"));
            }
        }
        let mut fx = image.clone();
        let mut fy = image.clone();
        let mut fer_c = Vec::with_capacity(4);
        let mut fes_c = Vec::with_capacity(4);
        let mut share = Vec::with_capacity(4);
        let mut gates = Vec::new();
        for i in 0..4 {
            let (x, c) = self.fer[i].forward(&fx, mode)?;
            fx = x;
            fer_c.push(c);
            if self.config.sharing == Sharing::SingleTask {
                share.push(ShareCache::Isolated);
                continue;
            }
            let (y, c) = self.fes[i].forward(&fy, mode)?;
            fy = y;
            fes_c.push(c);
            match self.config.sharing {
                Sharing::Convflu => {
                    let ((gx, gy), c) = self.transfer[i].forward(&fx, &fy)?;
                    fx = gx.fused.clone();
                    fy = gy.fused.clone();
                    gates.push(BlockGates { to_fer: gx, to_fes: gy });
                    share.push(ShareCache::Gated(c));
                }
                Sharing::Summation => {
                    fx.add_assign(&fy)?;
                    fy = fx.clone();
                    share.push(ShareCache::Summed);
                }
                Sharing::SingleTask => unreachable!(),
            }
        }
        let (logits, classifier) = self.classifier.forward(&fx)?;
        let (synth, synth_cache) = match target {
            None => (None, None),
            Some(labels) => {
                let onehot = one_hot(labels, self.config.classes)?;
                let (t, transformer) = self.transformer_fwd(&onehot, mode)?;
                let mut h = concat_channels(&fy, &t)?;
                let mut decoder = Vec::with_capacity(4);
                for block in &self.decoder {
                    let (o, c) = block.forward(&h, mode)?;
                    h = o;
                    decoder.push(c);
                }
                let (pre, head) = self.head.as_ref().expect("synthesis head").forward(&h)?;
                let out = tanh(&pre);
                let cache = SynthCache { fes_channels: fy.shape()[1], transformer, decoder, head, out: out.clone() };
                (Some(out), Some(cache))
            }
        };
        let cache = JointCache {
            image_shape: image.shape().to_vec(),
            fer: fer_c,
            fes: fes_c,
            share,
            classifier,
            synth: synth_cache,
        };
        Ok((JointOutput { logits, synth, gates }, cache))
    }

    /// Both branches: class logits for `image`, a synthesis conditioned on the
    /// one-hot `target` rows, and all gate activations.
    pub fn joint_forward(
        &self,
        image: &Tensor<T>,
        target: &Tensor<T>,
        mode: Mode,
    ) -> Result<(JointOutput<T>, JointCache<T>)> {
        let labels = decode_one_hot(target, self.config.classes)?;
        self.forward_impl(image, Some(&labels), mode)
    }

    /// Same as [`joint_forward`](Self::joint_forward) with class indices.
    pub fn joint_forward_labels(
        &self,
        image: &Tensor<T>,
        target: &[usize],
        mode: Mode,
    ) -> Result<(JointOutput<T>, JointCache<T>)> {
        self.forward_impl(image, Some(target), mode)
    }

    /// Recognition only. The FES encoder still runs because the gates read it.
    pub fn fer_forward(&self, image: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, JointCache<T>)> {
        let (out, cache) = self.forward_impl(image, None, mode)?;
        Ok((out.logits, cache))
    }

    /// Recognition forward that also returns the gate activations.
    pub fn fer_forward_with_gates(&self, image: &Tensor<T>, mode: Mode) -> Result<JointOutput<T>> {
        Ok(self.forward_impl(image, None, mode)?.0)
    }

    pub fn generate(&self, image: &Tensor<T>, target: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (out, _) = self.joint_forward(image, target, mode)?;
        Ok(out.synth.expect("synthesis requested"))
    }

    /// Backpropagate from the logits and/or the synthesized image. Returns
    /// `dL/d image` (the image feeds both branches).
    pub fn backward(
        &mut self,
        cache: &JointCache<T>,
        d_logits: Option<&Tensor<T>>,
        d_synth: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let feat_shape = cache.classifier.in_shape.clone();
        let mut g_fx = match d_logits {
            Some(g) => self.classifier.backward(&cache.classifier, g)?,
            None => Tensor::zeros(&feat_shape),
        };
        let mut g_fy = Tensor::zeros(&feat_shape);
        if let Some(g) = d_synth {
            let sc = cache
                .synth
                .as_ref()
                .ok_or_else(|| input_err!("synthesis gradient given but the forward pass did not synthesize"))?;
            sc.out.expect_same_shape(g)?;
            let g = tanh_backward(&sc.out, g);
            let mut g = self.head.as_mut().expect("synthesis head").backward(&sc.head, &g)?;
            for (block, c) in self.decoder.iter_mut().zip(&sc.decoder).rev() {
                g = block.backward(c, &g)?;
            }
            let (g_fes, g_t) = split_channels(&g, sc.fes_channels)?;
            g_fy = g_fes;
            let tr = self.transformer.as_mut().expect("label transformer");
            let g_seed = tr.up.backward(&sc.transformer.up, &g_t)?;
            let (b, n) = (g_seed.shape()[0], g_seed.len());
            let g_seed = g_seed.reshape(&[b, n / b])?;
            tr.fc.backward(&sc.transformer.fc, &g_seed)?;
        }
        for i in (0..4).rev() {
            match &cache.share[i] {
                ShareCache::Gated(c) => {
                    let (a, b) = self.transfer[i].backward(c, &g_fx, &g_fy)?;
                    g_fx = a;
                    g_fy = b;
                }
                ShareCache::Summed => {
                    g_fx.add_assign(&g_fy)?;
                    g_fy = g_fx.clone();
                }
                ShareCache::Isolated => {}
            }
            g_fx = self.fer[i].backward(&cache.fer[i], &g_fx)?;
            if let Some(c) = cache.fes.get(i) {
                g_fy = self.fes[i].backward(c, &g_fy)?;
            }
        }
        if !cache.fes.is_empty() {
            g_fx.add_assign(&g_fy)?;
        }
        debug_assert_eq!(g_fx.shape(), &cache.image_shape[..]);
        Ok(g_fx)
    }

    /// Fold train-mode batch statistics from a forward pass into the running estimates.
    pub fn track(&mut self, cache: &JointCache<T>) {
        for (b, c) in self.fer.iter_mut().zip(&cache.fer) {
            b.track(c);
        }
        for (b, c) in self.fes.iter_mut().zip(&cache.fes) {
            b.track(c);
        }
        if let Some(sc) = &cache.synth {
            if let Some(tr) = self.transformer.as_mut() {
                tr.up.track(&sc.transformer.up);
            }
            for (b, c) in self.decoder.iter_mut().zip(&sc.decoder) {
                b.track(c);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> FersnetModel<U> {
        let mut out = FersnetModel::<U>::new(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))
            .expect("config already validated");
        let mut values = Vec::new();
        self.visit("", &mut |_, p| values.push(p.cast::<U>()));
        let mut it = values.into_iter();
        out.visit_mut("", &mut |_, p| *p = it.next().expect("same architecture"));
        out
    }
}

impl<T: Scalar> Module<T> for FersnetModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.fer.iter().enumerate() {
            b.visit(&join(prefix, &format!("fer.{i}")), f);
        }
        for (i, b) in self.fes.iter().enumerate() {
            b.visit(&join(prefix, &format!("fes.{i}")), f);
        }
        for (i, t) in self.transfer.iter().enumerate() {
            t.visit(&join(prefix, &format!("transfer.{i}")), f);
        }
        self.classifier.fc1.visit(&join(prefix, "classifier.fc1"), f);
        self.classifier.fc2.visit(&join(prefix, "classifier.fc2"), f);
        if let Some(tr) = &self.transformer {
            tr.fc.visit(&join(prefix, "transformer.fc"), f);
            tr.up.visit(&join(prefix, "transformer.up"), f);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        if let Some(h) = &self.head {
            h.visit(&join(prefix, "head"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.fer.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("fer.{i}")), f);
        }
        for (i, b) in self.fes.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("fes.{i}")), f);
        }
        for (i, t) in self.transfer.iter_mut().enumerate() {
            t.visit_mut(&join(prefix, &format!("transfer.{i}")), f);
        }
        self.classifier.fc1.visit_mut(&join(prefix, "classifier.fc1"), f);
        self.classifier.fc2.visit_mut(&join(prefix, "classifier.fc2"), f);
        if let Some(tr) = &mut self.transformer {
            tr.fc.visit_mut(&join(prefix, "transformer.fc"), f);
            tr.up.visit_mut(&join(prefix, "transformer.up"), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
        if let Some(h) = &mut self.head {
            h.visit_mut(&join(prefix, "head"), f);
        }
    }
}

impl<T: Scalar> Generator<T> for FersnetModel<T> {
    type Cache = JointCache<T>;

    fn generate_fwd(&self, image: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<(Tensor<T>, JointCache<T>)> {
        let (out, cache) = self.forward_impl(image, Some(labels), mode)?;
        Ok((out.synth.expect("synthesis requested"), cache))
    }

    fn generate_bwd(&mut self, cache: JointCache<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward(&cache, None, Some(d_out))
    }
}
