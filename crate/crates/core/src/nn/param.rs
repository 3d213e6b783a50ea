use rand::Rng;

use crate::tensor::{Scalar, Tensor};

/// A named-by-position parameter: value, accumulated gradient, and whether
/// the optimizer may touch it. Batch-norm running statistics and frozen
/// networks are stored as `requires_grad = false`.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad, requires_grad: true }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Param { requires_grad: false, ..Param::new(value) }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param { value: self.value.cast(), grad: self.grad.cast(), requires_grad: self.requires_grad }
    }
}

/// Anything owning parameters. Names are dotted paths (`fer.0.conv1.weight`)
/// and are what checkpoints and parameter audits key on.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Number of trainable scalars.
    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.requires_grad {
                n += p.value.len()
            }
        });
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }

    fn freeze(&mut self) {
        self.visit_mut("", &mut |_, p| p.requires_grad = false);
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Kaiming-uniform with fan-in scaling for ReLU stacks: U(-b, b), b = sqrt(6 / fan_in).
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

/// Deterministic content hash over every named tensor, in visitation order.
pub fn param_hash<T: Scalar>(module: &impl Module<T>) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    module.visit("", &mut |name, p| {
        h.update(name.as_bytes());
        for v in p.value.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    });
    h.finalize().into()
}
