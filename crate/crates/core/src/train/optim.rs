use crate::error::{input_err, Result};
use crate::nn::param::Module;
use crate::tensor::{Scalar, Tensor};

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total_steps)) / 2`
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(input_err!("step {step} outside [0, {total_steps}]"));
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Adam with bias correction. State is keyed by parameter visitation order,
/// so one optimizer must stay paired with one module.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, module: &mut impl Module<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let eps = T::lit(self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        module.visit_mut("", &mut |_, p| {
            if m.len() <= i {
                m.push(Tensor::zeros(p.value.shape()));
                v.push(Tensor::zeros(p.value.shape()));
            }
            if p.requires_grad {
                let (mi, vi) = (m[i].data_mut(), v[i].data_mut());
                for (((w, &g), mm), vv) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(mi).zip(vi) {
                    *mm = b1t * *mm + ob1 * g;
                    *vv = b2t * *vv + ob2 * g * g;
                    *w -= step * *mm / ((*vv * inv_c2).sqrt() + eps);
                }
            }
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::Param;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5).unwrap() - 5.05e-4).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 1e-3, 1e-5).is_err());
    }

    struct One(Param<f64>);
    impl Module<f64> for One {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f("w", &self.0)
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f("w", &mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = One(Param::new(Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()));
        p.0.grad = Tensor::from_vec(&[2], vec![0.3, -20.0]).unwrap();
        let mut adam = Adam::default();
        adam.step(&mut p, 0.01);
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p.0.value.data()[0] - 0.99).abs() < 1e-7);
        assert!((p.0.value.data()[1] + 0.99).abs() < 1e-7);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = One(Param::new(Tensor::from_vec(&[1], vec![5.0]).unwrap()));
        let mut adam = Adam::default();
        for _ in 0..2000 {
            let w = p.0.value.data()[0];
            p.0.grad.data_mut()[0] = 2.0 * (w - 2.0);
            adam.step(&mut p, 0.05);
        }
        assert!((p.0.value.data()[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut p = One(Param::buffer(Tensor::from_vec(&[1], vec![5.0]).unwrap()));
        p.0.grad.data_mut()[0] = 1.0;
        Adam::default().step(&mut p, 0.1);
        assert_eq!(p.0.value.data()[0], 5.0);
    }
}
