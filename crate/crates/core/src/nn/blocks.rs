//! Encoder and decoder blocks.
//!
//! Encoder: conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU -> maxpool 2x2.
//! Decoder: the same stack with the pool replaced by a 2x2 stride-2 transposed conv.

use rand::Rng;

use super::layers::*;
use super::param::{join, Module, Param};
use crate::error::{config_err, input_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct ConvBlock<T: Scalar = f32> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
}

/// Intermediate state of the shared conv/BN/ReLU double stack.
#[derive(Clone, Debug)]
pub struct StackCache<T: Scalar> {
    c1: Conv2dCache<T>,
    b1: BatchNormCache<T>,
    a1: Tensor<T>,
    c2: Conv2dCache<T>,
    b2: BatchNormCache<T>,
    a2: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache<T: Scalar> {
    stack: StackCache<T>,
    pool: MaxPoolCache,
}

fn stack_forward<T: Scalar>(
    conv1: &Conv2d<T>,
    bn1: &BatchNorm2d<T>,
    conv2: &Conv2d<T>,
    bn2: &BatchNorm2d<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<StackCache<T>> {
    let (h1, c1) = conv1.forward(x)?;
    let (n1, b1) = bn1.forward(&h1, mode)?;
    let a1 = relu(&n1);
    let (h2, c2) = conv2.forward(&a1)?;
    let (n2, b2) = bn2.forward(&h2, mode)?;
    let a2 = relu(&n2);
    Ok(StackCache { c1, b1, a1, c2, b2, a2 })
}

fn stack_backward<T: Scalar>(
    conv1: &mut Conv2d<T>,
    bn1: &mut BatchNorm2d<T>,
    conv2: &mut Conv2d<T>,
    bn2: &mut BatchNorm2d<T>,
    cache: &StackCache<T>,
    g: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = relu_backward(&cache.a2, g);
    let g = bn2.backward(&cache.b2, &g)?;
    let g = conv2.backward(&cache.c2, &g)?;
    let g = relu_backward(&cache.a1, &g);
    let g = bn1.backward(&cache.b1, &g)?;
    conv1.backward(&cache.c1, &g)
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv1: Conv2d::new(in_ch, out_ch, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(out_ch),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(out_ch),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ConvBlockCache<T>)> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return Err(config_err!("conv block expects {} channels, got {c}", self.in_channels()));
        }
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(input_err!("conv block needs even spatial extents, got {h}x{w}"));
        }
        let stack = stack_forward(&self.conv1, &self.bn1, &self.conv2, &self.bn2, x, mode)?;
        let (y, pool) = max_pool2x2(&stack.a2)?;
        Ok((y, ConvBlockCache { stack, pool }))
    }

    pub fn backward(&mut self, cache: &ConvBlockCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = max_pool2x2_backward(&cache.pool, gy);
        stack_backward(&mut self.conv1, &mut self.bn1, &mut self.conv2, &mut self.bn2, &cache.stack, &g)
    }

    pub fn track(&mut self, cache: &ConvBlockCache<T>) {
        self.bn1.track(&cache.stack.b1);
        self.bn2.track(&cache.stack.b2);
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct DeconvBlock<T: Scalar = f32> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub up: ConvTranspose2x2<T>,
}

#[derive(Clone, Debug)]
pub struct DeconvBlockCache<T: Scalar> {
    stack: StackCache<T>,
    up: ConvTransposeCache<T>,
}

impl<T: Scalar> DeconvBlock<T> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        DeconvBlock {
            conv1: Conv2d::new(in_ch, out_ch, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(out_ch),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(out_ch),
            up: ConvTranspose2x2::new(out_ch, out_ch, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.up.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, DeconvBlockCache<T>)> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(config_err!("deconv block expects {} channels, got {c}", self.in_channels()));
        }
        let stack = stack_forward(&self.conv1, &self.bn1, &self.conv2, &self.bn2, x, mode)?;
        let (y, up) = self.up.forward(&stack.a2)?;
        Ok((y, DeconvBlockCache { stack, up }))
    }

    pub fn backward(&mut self, cache: &DeconvBlockCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.up.backward(&cache.up, gy)?;
        stack_backward(&mut self.conv1, &mut self.bn1, &mut self.conv2, &mut self.bn2, &cache.stack, &g)
    }

    pub fn track(&mut self, cache: &DeconvBlockCache<T>) {
        self.bn1.track(&cache.stack.b1);
        self.bn2.track(&cache.stack.b2);
    }
}

impl<T: Scalar> Module<T> for DeconvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.up.visit(&join(prefix, "up"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_block_halves_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = ConvBlock::<f32>::new(1, 8, &mut rng);
        let x = Tensor::from_fn(&[2, 1, 96, 96], |i| ((i % 17) as f32 - 8.0) / 8.0);
        let (y, _) = block.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 8, 48, 48]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn conv_block_rejects_unpoolable_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = ConvBlock::<f32>::new(1, 4, &mut rng);
        let err = block.forward(&Tensor::zeros(&[2, 1, 1, 1]), Mode::Eval).unwrap_err();
        assert!(matches!(err, crate::Error::Input(_)));
        let err = block.forward(&Tensor::zeros(&[2, 1, 5, 4]), Mode::Eval).unwrap_err();
        assert!(matches!(err, crate::Error::Input(_)));
        let err = block.forward(&Tensor::zeros(&[2, 3, 4, 4]), Mode::Eval).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn conv_block_matches_hand_computed_single_channel() {
        // 4x4 input, hand-set kernels, identity BN in eval mode (running mean 0, var 1 -> scale 1/sqrt(1+eps))
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = ConvBlock::<f64>::new(1, 1, &mut rng);
        let k1: Vec<f64> = vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
        let k2: Vec<f64> = vec![0.1, 0.2, 0.1, 0.0, 1.0, 0.0, -0.1, 0.0, 0.3];
        block.conv1.weight.value = Tensor::from_vec(&[1, 1, 3, 3], k1.clone()).unwrap();
        block.conv2.weight.value = Tensor::from_vec(&[1, 1, 3, 3], k2.clone()).unwrap();
        block.conv1.bias.value = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let x: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let xt = Tensor::from_vec(&[1, 1, 4, 4], x.clone()).unwrap();
        let (y, _) = block.forward(&xt, Mode::Eval).unwrap();

        let direct = |img: &[f64], k: &[f64], bias: f64| -> Vec<f64> {
            let mut out = vec![0.0; 16];
            for i in 0..4i32 {
                for j in 0..4i32 {
                    let mut acc = bias;
                    for a in 0..3i32 {
                        for b in 0..3i32 {
                            let (y, x) = (i + a - 1, j + b - 1);
                            if (0..4).contains(&y) && (0..4).contains(&x) {
                                acc += k[(a * 3 + b) as usize] * img[(y * 4 + x) as usize];
                            }
                        }
                    }
                    out[(i * 4 + j) as usize] = acc;
                }
            }
            out
        };
        let s = 1.0 / (1.0f64 + BN_EPS).sqrt();
        let a1: Vec<f64> = direct(&x, &k1, 0.5).iter().map(|v| (v * s).max(0.0)).collect();
        let a2: Vec<f64> = direct(&a1, &k2, 0.0).iter().map(|v| (v * s).max(0.0)).collect();
        let pooled: Vec<f64> = (0..4)
            .map(|q| {
                let (i, j) = (q / 2 * 2, q % 2 * 2);
                a2[i * 4 + j].max(a2[i * 4 + j + 1]).max(a2[(i + 1) * 4 + j]).max(a2[(i + 1) * 4 + j + 1])
            })
            .collect();
        for (a, b) in y.data().iter().zip(&pooled) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn deconv_block_doubles_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = DeconvBlock::<f32>::new(64, 32, &mut rng);
        let x = Tensor::from_fn(&[2, 64, 6, 6], |i| (i % 5) as f32 * 0.1);
        let (y, _) = block.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 32, 12, 12]);
        assert!(matches!(
            block.forward(&Tensor::zeros(&[2, 8, 6, 6]), Mode::Train),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn encoder_decoder_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ladder = [8, 16, 32, 64];
        let mut x = Tensor::<f32>::from_fn(&[2, 1, 96, 96], |i| (i % 11) as f32 / 11.0);
        let mut c = 1;
        for &w in &ladder {
            x = ConvBlock::new(c, w, &mut rng).forward(&x, Mode::Train).unwrap().0;
            c = w;
        }
        assert_eq!(x.shape(), &[2, 64, 6, 6]);
        for &w in ladder.iter().rev().skip(1).chain(&[8]) {
            x = DeconvBlock::new(c, w, &mut rng).forward(&x, Mode::Train).unwrap().0;
            c = w;
        }
        assert_eq!(x.shape(), &[2, 8, 96, 96]);
    }
}
