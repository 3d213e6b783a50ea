//! Central finite-difference gradient checking.
//!
//! The error for one parameter tensor is
//! `max_i |analytic_i - numeric_i| / max(s_t, 1e-3 * s, 1e-8)` where `s_t` is
//! the tensor's largest analytic or numeric magnitude and `s` the same over
//! the whole module. The report returns the maximum over tensors. Normalising
//! per tensor keeps entries whose true gradient is ~0 from being dominated by
//! round-off; the module-wide floor covers tensors whose gradient is exactly
//! zero (a bias feeding batch norm), where only round-off remains.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::Module;
use crate::error::{input_err, Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Probe at most this many entries per tensor (all when `None`).
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-6, max_entries_per_tensor: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_tensor: Vec<(String, f64)>,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_tensor.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn nudge<M: Module<f64>>(module: &mut M, tensor: usize, entry: usize, delta: f64) {
    let mut i = 0;
    module.visit_mut("", &mut |_, p| {
        if p.requires_grad {
            if i == tensor {
                p.value.data_mut()[entry] += delta;
            }
            i += 1;
        }
    });
}

/// `loss(module, backprop)` must return the scalar loss and, when `backprop`
/// is set, accumulate its gradient into the module's parameters.
pub fn grad_check<M, F>(module: &mut M, mut loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    M: Module<f64>,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(input_err!("finite-difference step {} outside [1e-6, 1e-3]", cfg.eps));
    }
    module.zero_grad();
    let base = loss(module, true)?;
    if !base.is_finite() {
        return Err(Error::non_finite("gradient check base loss"));
    }
    let mut tensors = Vec::new();
    module.visit("", &mut |name, p| {
        if p.requires_grad {
            tensors.push((name.to_string(), p.grad.data().to_vec()));
        }
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut measured = Vec::with_capacity(tensors.len());
    let mut probes = 0;
    let mut flat_offset = 0;
    for (ti, (name, analytic)) in tensors.iter().enumerate() {
        let n = analytic.len();
        let entries: Vec<usize> = match cfg.max_entries_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut max_diff = 0.0f64;
        let mut max_num = 0.0f64;
        for &e in &entries {
            nudge(module, ti, e, cfg.eps);
            let up = loss(module, false);
            nudge(module, ti, e, -2.0 * cfg.eps);
            let down = loss(module, false);
            nudge(module, ti, e, cfg.eps);
            let (up, down) = (up?, down?);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient check of {name}"),
                    index: Some(flat_offset + e),
                });
            }
            let numeric = (up - down) / (2.0 * cfg.eps);
            max_diff = max_diff.max((analytic[e] - numeric).abs());
            max_num = max_num.max(numeric.abs());
            probes += 1;
        }
        let max_analytic = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        measured.push((name.clone(), max_diff, max_analytic.max(max_num)));
        flat_offset += n;
    }
    let global = measured.iter().fold(0.0f64, |m, t| m.max(t.2));
    let per_tensor: Vec<(String, f64)> =
        measured.into_iter().map(|(name, diff, scale)| (name, diff / scale.max(1e-3 * global).max(1e-8))).collect();
    let max_relative_error = per_tensor.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
    Ok(GradCheckReport { max_relative_error, per_tensor, probes })
}
