//! Finite-difference checks of every layer, the transference block and the
//! full joint loss, all in f64. Inputs are wrapped as parameters so their
//! gradients are checked along with the weights.

use fersnet_core::convflu::{ConvFlu, TransferenceBlock};
use fersnet_core::losses::{
    classification_loss, gan_loss_generator, identity_loss, reconstruction_loss, LossWeights, RandomProjectionEmbedder,
};
use fersnet_core::model::{ArchConfig, Discriminator, FersnetModel, Generator, Sharing};
use fersnet_core::nn::layers::{
    leaky_relu, leaky_relu_backward, max_pool2x2, max_pool2x2_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    tanh, tanh_backward,
};
use fersnet_core::nn::{
    grad_check, BatchNorm2d, Conv2d, ConvBlock, ConvTranspose2x2, DeconvBlock, GradCheckConfig, Linear, Mode, Module,
    Param,
};
use fersnet_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NONLINEAR_TOL: f64 = 1e-4;
pub const LINEAR_TOL: f64 = 1e-6;

#[derive(Debug)]
pub struct GradResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
    pub worst: String,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

/// A module plus its differentiable inputs.
struct Probe<M> {
    m: M,
    inputs: Vec<Param<f64>>,
}

impl<M: Module<f64>> Module<f64> for Probe<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
        self.m.visit(prefix, f);
        for (i, p) in self.inputs.iter().enumerate() {
            f(&format!("input{i}"), p);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        self.m.visit_mut(prefix, f);
        for (i, p) in self.inputs.iter_mut().enumerate() {
            f(&format!("input{i}"), p);
        }
    }
}

struct Stateless;

impl Module<f64> for Stateless {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<f64>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<f64>)) {}
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Move every trainable tensor off its initial value. Zero biases put ReLU
/// inputs exactly on the kink, where one-sided differences disagree with
/// any subgradient.
fn generic_point(m: &mut impl Module<f64>, rng: &mut impl Rng) {
    m.visit_mut("", &mut |_, p| {
        if p.requires_grad {
            let noise = randn(p.value.shape(), rng).map(|v| 0.1 * v);
            p.value.add_assign(&noise).expect("same shape");
        }
    });
}

fn acc(p: &mut Param<f64>, g: &Tensor<f64>) {
    p.grad.add_assign(g).expect("input gradient shape");
}

fn check<M: Module<f64>>(
    name: &'static str,
    tolerance: f64,
    probe: &mut Probe<M>,
    cfg: &GradCheckConfig,
    loss: impl FnMut(&mut Probe<M>, bool) -> Result<f64>,
) -> GradResult {
    let report = grad_check(probe, loss, cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
    let worst = report.worst().map(|(n, e)| format!("{n} ({e:.2e})")).unwrap_or_default();
    GradResult { name, error: report.max_relative_error, tolerance, worst }
}

/// Single-output elementwise map checked through a random projection.
fn pointwise(
    name: &'static str,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
    cfg: &GradCheckConfig,
    fwd: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    bwd: impl Fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
) -> GradResult {
    let mut p = Probe { m: Stateless, inputs: vec![Param::new(randn(shape, rng))] };
    let r = randn(shape, rng);
    check(name, NONLINEAR_TOL, &mut p, cfg, |p, back| {
        let x = p.inputs[0].value.clone();
        let y = fwd(&x);
        if back {
            let g = bwd(&x, &y, &r);
            acc(&mut p.inputs[0], &g);
        }
        Ok(dot(&y, &r))
    })
}

fn layers(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Vec<GradResult> {
    let mut out = Vec::new();

    let mut p = Probe { m: Linear::<f64>::new(5, 3, rng), inputs: vec![Param::new(randn(&[4, 5], rng))] };
    let r = randn(&[4, 3], rng);
    out.push(check("linear", LINEAR_TOL, &mut p, cfg, |p, back| {
        let (y, c) = p.m.forward(&p.inputs[0].value)?;
        if back {
            let g = p.m.backward(&c, &r)?;
            acc(&mut p.inputs[0], &g);
        }
        Ok(dot(&y, &r))
    }));

    for (name, k, s, pad, hw) in [("conv2d 3x3", 3, 1, 1, 5), ("conv2d 4x4 stride 2", 4, 2, 1, 6), ("conv2d 1x1", 1, 1, 0, 3)] {
        let mut p = Probe { m: Conv2d::<f64>::new(2, 3, k, s, pad, rng), inputs: vec![Param::new(randn(&[2, 2, hw, hw], rng))] };
        let (oh, ow) = p.m.output_hw(hw, hw).expect("valid geometry");
        let r = randn(&[2, 3, oh, ow], rng);
        out.push(check(name, LINEAR_TOL, &mut p, cfg, |p, back| {
            let (y, c) = p.m.forward(&p.inputs[0].value)?;
            if back {
                let g = p.m.backward(&c, &r)?;
                acc(&mut p.inputs[0], &g);
            }
            Ok(dot(&y, &r))
        }));
    }

    let mut p = Probe { m: ConvTranspose2x2::<f64>::new(2, 3, rng), inputs: vec![Param::new(randn(&[2, 2, 3, 3], rng))] };
    let r = randn(&[2, 3, 6, 6], rng);
    out.push(check("conv transpose 2x2", LINEAR_TOL, &mut p, cfg, |p, back| {
        let (y, c) = p.m.forward(&p.inputs[0].value)?;
        if back {
            let g = p.m.backward(&c, &r)?;
            acc(&mut p.inputs[0], &g);
        }
        Ok(dot(&y, &r))
    }));

    let mut bn = BatchNorm2d::<f64>::new(2);
    bn.visit_mut("", &mut |_, q| {
        if q.requires_grad {
            let v = Tensor::from_fn(q.value.shape(), |i| 0.5 + 0.3 * i as f64);
            q.value = v;
        }
    });
    let mut p = Probe { m: bn, inputs: vec![Param::new(randn(&[3, 2, 3, 3], rng))] };
    let r = randn(&[3, 2, 3, 3], rng);
    for (name, mode) in [("batch norm (train)", Mode::Train), ("batch norm (eval)", Mode::Eval)] {
        out.push(check(name, NONLINEAR_TOL, &mut p, cfg, |p, back| {
            let (y, c) = p.m.forward(&p.inputs[0].value, mode)?;
            if back {
                let g = p.m.backward(&c, &r)?;
                acc(&mut p.inputs[0], &g);
            }
            Ok(dot(&y, &r))
        }));
    }

    let mut p = Probe { m: Stateless, inputs: vec![Param::new(randn(&[2, 2, 4, 4], rng))] };
    let r = randn(&[2, 2, 2, 2], rng);
    out.push(check("max pool 2x2", NONLINEAR_TOL, &mut p, cfg, |p, back| {
        let (y, c) = max_pool2x2(&p.inputs[0].value)?;
        if back {
            let g = max_pool2x2_backward(&c, &r);
            acc(&mut p.inputs[0], &g);
        }
        Ok(dot(&y, &r))
    }));

    let sh = [2, 3, 4];
    out.push(pointwise("relu", &sh, rng, cfg, relu, |_, y, g| relu_backward(y, g)));
    out.push(pointwise("leaky relu", &sh, rng, cfg, |x| leaky_relu(x, 0.2), |x, _, g| leaky_relu_backward(x, g, 0.2)));
    out.push(pointwise("sigmoid", &sh, rng, cfg, sigmoid, |_, y, g| sigmoid_backward(y, g)));
    out.push(pointwise("tanh", &sh, rng, cfg, tanh, |_, y, g| tanh_backward(y, g)));

    let mut p = Probe { m: ConvBlock::<f64>::new(2, 3, rng), inputs: vec![Param::new(randn(&[2, 2, 4, 4], rng))] };
    let r = randn(&[2, 3, 2, 2], rng);
    out.push(check("conv block", NONLINEAR_TOL, &mut p, cfg, |p, back| {
        let (y, c) = p.m.forward(&p.inputs[0].value, Mode::Train)?;
        if back {
            let g = p.m.backward(&c, &r)?;
            acc(&mut p.inputs[0], &g);
        }
        Ok(dot(&y, &r))
    }));

    let mut p = Probe { m: DeconvBlock::<f64>::new(3, 2, rng), inputs: vec![Param::new(randn(&[2, 3, 2, 2], rng))] };
    let r = randn(&[2, 2, 4, 4], rng);
    for (name, mode) in [("deconv block", Mode::Train), ("deconv block (eval)", Mode::Eval)] {
        out.push(check(name, NONLINEAR_TOL, &mut p, cfg, |p, back| {
            let (y, c) = p.m.forward(&p.inputs[0].value, mode)?;
            if back {
                let g = p.m.backward(&c, &r)?;
                acc(&mut p.inputs[0], &g);
            }
            Ok(dot(&y, &r))
        }));
    }
    out
}

fn sharing_units(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Vec<GradResult> {
    let mut out = Vec::new();
    let shape = [2, 3, 3, 3];
    // larger gate kernels than the init so the gates are away from 0.5
    let mut unit = ConvFlu::<f64>::new(3, rng);
    unit.visit_mut("", &mut |_, q| q.value = q.value.map(|v| v * 20.0));
    let mut p = Probe { m: unit, inputs: vec![Param::new(randn(&shape, rng)), Param::new(randn(&shape, rng))] };
    let r = randn(&shape, rng);
    out.push(check("convflu unit", NONLINEAR_TOL, &mut p, cfg, |p, back| {
        let (g, c) = p.m.forward(&p.inputs[0].value, &p.inputs[1].value)?;
        if back {
            let (gx, gy) = p.m.backward(&c, &r)?;
            acc(&mut p.inputs[0], &gx);
            acc(&mut p.inputs[1], &gy);
        }
        Ok(dot(&g.fused, &r))
    }));

    let mut p = Probe {
        m: TransferenceBlock::<f64>::new(3, rng),
        inputs: vec![Param::new(randn(&shape, rng)), Param::new(randn(&shape, rng))],
    };
    let (r1, r2) = (randn(&shape, rng), randn(&shape, rng));
    out.push(check("transference block", NONLINEAR_TOL, &mut p, cfg, |p, back| {
        let ((gx, gy), c) = p.m.forward(&p.inputs[0].value, &p.inputs[1].value)?;
        if back {
            let (dx, dy) = p.m.backward(&c, &r1, &r2)?;
            acc(&mut p.inputs[0], &dx);
            acc(&mut p.inputs[1], &dy);
        }
        Ok(dot(&gx.fused, &r1) + dot(&gy.fused, &r2))
    }));

    let mut p = Probe { m: Discriminator::<f64>::new(1, 3, [2, 3, 3, 4], rng), inputs: vec![Param::new(randn(&[2, 1, 16, 16], rng))] };
    let labels = [0usize, 2];
    let r = randn(&[2, 1, 1, 1], rng);
    out.push(check("discriminator", NONLINEAR_TOL, &mut p, cfg, |p, back| {
        let (y, c) = p.m.forward_labels(&p.inputs[0].value, &labels)?;
        if back {
            let g = p.m.backward(&c, &r)?;
            acc(&mut p.inputs[0], &g);
        }
        Ok(dot(&y, &r))
    }));
    out
}

/// The complete generator-side objective: classification, adversarial,
/// reconstruction, cycle and identity terms through one joint forward.
/// Batch norm runs on running statistics so the objective is smooth; the
/// train-mode statistics are covered by the per-layer checks above.
fn joint_path(name: &'static str, sharing: Sharing, rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> GradResult {
    let arch = ArchConfig {
        classes: 3,
        in_channels: 1,
        image_size: 32,
        ladder: [2, 3, 3, 4],
        transformer_channels: None,
        classifier_hidden: 5,
        sharing,
    };
    let mut model = FersnetModel::<f64>::new(arch, rng).expect("valid arch");
    generic_point(&mut model, rng);
    let mut disc = Discriminator::<f64>::new(1, 3, [2, 2, 3, 3], rng);
    generic_point(&mut disc, rng);
    let mut emb = RandomProjectionEmbedder::<f64>::new(1, 32, 4, 6, rng).expect("valid embedder");
    let x = randn(&[2, 1, 32, 32], rng).map(|v| v * 0.9);
    let xt = randn(&[2, 1, 32, 32], rng).map(|v| v * 0.9);
    let (labels, target) = ([0usize, 1], [2usize, 1]);
    let w = LossWeights::default();
    let lambda4 = 0.3;
    let mut p = Probe { m: model, inputs: vec![] };
    check(name, NONLINEAR_TOL, &mut p, cfg, |p, back| {
        let m = &mut p.m;
        if !m.has_synthesis() {
            let (logits, c) = m.fer_forward(&x, Mode::Eval)?;
            let cls = classification_loss(&logits, &labels)?;
            if back {
                m.backward(&c, Some(&cls.grad), None)?;
            }
            return Ok(cls.value);
        }
        let (out, cache) = m.joint_forward_labels(&x, &target, Mode::Eval)?;
        let synth = out.synth.expect("synthesis");
        let cls = classification_loss(&out.logits, &labels)?;
        let gan = gan_loss_generator(&mut disc, (&synth, &target))?;
        let rec = reconstruction_loss(&synth, &xt)?;
        let idt = identity_loss(&mut emb, &synth, &xt)?;
        let (back_img, cc) = m.generate_fwd(&synth, &labels, Mode::Eval)?;
        let cyc = reconstruction_loss(&back_img, &x)?;
        let total = cls.value + w.lambda1 * gan.value + w.lambda2 * rec.value + w.lambda3 * cyc.value + lambda4 * idt.value;
        if back {
            let mut d = m.generate_bwd(cc, &cyc.grad.scale(w.lambda3))?;
            d.add_assign(&gan.grad.scale(w.lambda1))?;
            d.add_assign(&rec.grad.scale(w.lambda2))?;
            d.add_assign(&idt.grad.scale(lambda4))?;
            m.backward(&cache, Some(&cls.grad), Some(&d))?;
        }
        Ok(total)
    })
}

/// Every check in the suite. Larger tensors are probed at a random subset of
/// entries.
pub fn run_all() -> Vec<GradResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let full = GradCheckConfig { eps: 1e-6, max_entries_per_tensor: None, seed: 1 };
    let sampled = GradCheckConfig { eps: 1e-6, max_entries_per_tensor: Some(24), seed: 1 };
    let mut out = layers(&mut rng, &full);
    out.extend(sharing_units(&mut rng, &full));
    out.push(joint_path("joint loss (convflu)", Sharing::Convflu, &mut rng, &sampled));
    out.push(joint_path("joint loss (summation)", Sharing::Summation, &mut rng, &sampled));
    out.push(joint_path("classification (single task)", Sharing::SingleTask, &mut rng, &sampled));
    out
}
