//! Random rotation, mirroring and cropping on a square canvas.
//!
//! Order is rotate, then mirror, then crop, all on the full canvas so
//! rotated corners are filled from real image content.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::sample_bilinear;
use crate::error::{input_err, Result};
use crate::tensor::Tensor;

pub const ROTATIONS_DEG: [f64; 7] = [-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub canvas: usize,
    pub crop: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig { canvas: 110, crop: 96 }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.crop == 0 || self.crop > self.canvas {
            errs.push(format!("data.crop ({}) must be in 1..=data.canvas ({})", self.crop, self.canvas));
        }
        errs
    }

    /// Number of distinct crop origins.
    pub fn origin_count(&self) -> usize {
        let span = self.canvas - self.crop + 1;
        span * span
    }

    pub fn center_origin(&self) -> (usize, usize) {
        let o = (self.canvas - self.crop) / 2;
        (o, o)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub angle_deg: f64,
    pub mirror: bool,
    pub origin: (usize, usize),
}

impl Transform {
    pub fn identity(cfg: &CropConfig) -> Self {
        Transform { angle_deg: 0.0, mirror: false, origin: cfg.center_origin() }
    }

    pub fn draw(cfg: &CropConfig, rng: &mut impl Rng) -> Self {
        let span = cfg.canvas - cfg.crop + 1;
        Transform {
            angle_deg: ROTATIONS_DEG[rng.random_range(0..ROTATIONS_DEG.len())],
            mirror: rng.random_bool(0.5),
            origin: (rng.random_range(0..span), rng.random_range(0..span)),
        }
    }

    pub fn is_identity(&self, cfg: &CropConfig) -> bool {
        *self == Transform::identity(cfg)
    }
}

fn check_canvas(image: &Tensor<f32>, cfg: &CropConfig) -> Result<(usize, usize)> {
    match *image.shape() {
        [c, h, w] if h == cfg.canvas && w == cfg.canvas => Ok((c, h)),
        ref s => Err(input_err!("expected a [C, {0}, {0}] image, got {s:?}", cfg.canvas)),
    }
}

/// Apply a transform to a `[C, canvas, canvas]` image. Rotation is bilinear
/// about the centre with border replication; output is clamped to `[-1, 1]`.
pub fn apply_transform(image: &Tensor<f32>, t: &Transform, cfg: &CropConfig) -> Result<Tensor<f32>> {
    let (c, n) = check_canvas(image, cfg)?;
    let (oy, ox) = t.origin;
    if oy + cfg.crop > n || ox + cfg.crop > n {
        return Err(input_err!("crop origin {:?} out of range for {n} -> {}", t.origin, cfg.crop));
    }
    let k = cfg.crop;
    let centre = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = t.angle_deg.to_radians().sin_cos();
    let exact = t.angle_deg == 0.0;
    Ok(Tensor::from_fn(&[c, k, k], |i| {
        let (ch, y, x) = (i / (k * k), (i / k) % k, i % k);
        let plane = &image.data()[ch * n * n..(ch + 1) * n * n];
        let (cy, mut cx) = (y + oy, x + ox);
        if t.mirror {
            cx = n - 1 - cx;
        }
        let v = if exact {
            plane[cy * n + cx]
        } else {
            // inverse map: output pixel -> source location
            let (dy, dx) = (cy as f64 - centre, cx as f64 - centre);
            let sy = centre + cos * dy - sin * dx;
            let sx = centre + sin * dy + cos * dx;
            sample_bilinear(plane, n, n, sy, sx)
        };
        v.clamp(-1.0, 1.0)
    }))
}

pub fn augment_train(image: &Tensor<f32>, cfg: &CropConfig, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    check_canvas(image, cfg)?;
    apply_transform(image, &Transform::draw(cfg, rng), cfg)
}

/// Deterministic centre crop.
pub fn preprocess_eval(image: &Tensor<f32>, cfg: &CropConfig) -> Result<Tensor<f32>> {
    apply_transform(image, &Transform::identity(cfg), cfg)
}
