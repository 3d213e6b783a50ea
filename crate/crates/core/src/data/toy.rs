//! Procedural grayscale faces with known identity and expression factors.
//!
//! Geometry is defined in normalised coordinates (`u`, `v` in `[-1, 1]`,
//! `v` pointing down) so the same faces render at any canvas size. Identity
//! sets the face outline and eye placement; expression sets mouth curvature,
//! mouth openness and brow slant. Each class has its own mouth curvature, so
//! the curvature alone identifies the class.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{byte_to_unit, save_png, unit_to_byte};
use super::manifest::{DatasetManifest, Record};
use super::{derive_seed, Sample};
use crate::error::{input_err, Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 7] = ["anger", "contempt", "disgust", "fear", "happiness", "sadness", "surprise"];

/// (mouth curvature, mouth openness, brow slant) per class.
const ARCHETYPES: [(f64, f64, f64); 7] = [
    (-0.4, 0.10, 0.45),
    (0.2, 0.00, 0.10),
    (-0.2, 0.15, 0.30),
    (0.0, 0.50, -0.40),
    (0.6, 0.30, 0.00),
    (-0.6, 0.00, -0.30),
    (0.4, 0.90, -0.50),
];

/// Largest curvature jitter that keeps archetypes separable (half the
/// smallest gap, minus a margin).
const MAX_CURVATURE_JITTER: f64 = 0.09;

const MOUTH_Y: f64 = 0.45;
const MOUTH_HALF_WIDTH: f64 = 0.42;
const FACE_CENTER_Y: f64 = 0.02;
const FACE_HALF_HEIGHT: f64 = 0.92;
const EYE_RADIUS: f64 = 0.10;

const BACKGROUND: f64 = 0.10;
const SKIN: f64 = 0.70;
const FEATURE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyFaceSpec {
    pub render_size: usize,
    /// Gaussian pixel noise, in `[0, 1]` intensity units.
    pub noise: f64,
    /// Expression parameter jitter around each archetype.
    pub jitter: f64,
    /// Most images any one subject may have of one class.
    pub per_subject_cap: usize,
    /// Sub-pixel samples per axis for anti-aliasing.
    pub supersample: usize,
}

impl Default for ToyFaceSpec {
    fn default() -> Self {
        ToyFaceSpec { render_size: 110, noise: 0.03, jitter: 0.05, per_subject_cap: 4, supersample: 4 }
    }
}

impl ToyFaceSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.render_size < 16 {
            errs.push(format!("toy.render_size must be >= 16, got {}", self.render_size));
        }
        if !(self.noise >= 0.0 && self.noise <= 0.5) {
            errs.push(format!("toy.noise must be in [0, 0.5], got {}", self.noise));
        }
        if !(self.jitter >= 0.0 && self.jitter <= 0.2) {
            errs.push(format!("toy.jitter must be in [0, 0.2], got {}", self.jitter));
        }
        if self.per_subject_cap == 0 {
            errs.push("toy.per_subject_cap must be positive".into());
        }
        if self.supersample == 0 || self.supersample > 8 {
            errs.push(format!("toy.supersample must be in 1..=8, got {}", self.supersample));
        }
        errs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    /// Face width over face height.
    pub eccentricity: f64,
    pub eye_spacing: f64,
    pub eye_height: f64,
}

impl Identity {
    pub fn random(rng: &mut impl Rng) -> Self {
        Identity {
            eccentricity: rng.random_range(0.72..0.90),
            eye_spacing: rng.random_range(0.50..0.70),
            eye_height: rng.random_range(-0.32..-0.18),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub mouth_curvature: f64,
    pub mouth_openness: f64,
    pub brow_angle: f64,
}

impl Expression {
    pub fn archetype(class: usize) -> Result<Self> {
        let &(c, o, b) =
            ARCHETYPES.get(class).ok_or_else(|| input_err!("toy faces support at most {} classes", ARCHETYPES.len()))?;
        Ok(Expression { mouth_curvature: c, mouth_openness: o, brow_angle: b })
    }

    pub fn jittered(class: usize, jitter: f64, rng: &mut impl Rng) -> Result<Self> {
        let a = Expression::archetype(class)?;
        if jitter == 0.0 {
            return Ok(a);
        }
        let jc = jitter.min(MAX_CURVATURE_JITTER);
        Ok(Expression {
            mouth_curvature: a.mouth_curvature + rng.random_range(-jc..=jc),
            mouth_openness: (a.mouth_openness + rng.random_range(-jitter..=jitter)).max(0.0),
            brow_angle: a.brow_angle + rng.random_range(-2.0 * jitter..=2.0 * jitter),
        })
    }
}

/// Everything needed to re-render one image; written to the sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub path: String,
    pub subject: usize,
    pub expression: usize,
    pub identity: Identity,
    pub face: Expression,
}

fn in_segment(u: f64, v: f64, a: (f64, f64), b: (f64, f64), half_thickness: f64) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((u - a.0) * dx + (v - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (px, py) = (a.0 + t * dx - u, a.1 + t * dy - v);
    px * px + py * py <= half_thickness * half_thickness
}

fn mouth_centre(u: f64, curvature: f64) -> f64 {
    let t = u / MOUTH_HALF_WIDTH;
    MOUTH_Y + curvature * 0.18 * (1.0 - 2.0 * t * t)
}

fn in_mouth(u: f64, v: f64, e: &Expression) -> bool {
    if u.abs() > MOUTH_HALF_WIDTH {
        return false;
    }
    let t = u / MOUTH_HALF_WIDTH;
    (v - mouth_centre(u, e.mouth_curvature)).abs() <= 0.035 + e.mouth_openness * 0.14 * (1.0 - t * t)
}

fn in_face(u: f64, v: f64, id: &Identity) -> f64 {
    let a = FACE_HALF_HEIGHT * id.eccentricity;
    let (x, y) = (u / a, (v - FACE_CENTER_Y) / FACE_HALF_HEIGHT);
    x * x + y * y
}

fn shade(u: f64, v: f64, id: &Identity, e: &Expression) -> f64 {
    if in_face(u, v, id) > 1.0 {
        return BACKGROUND;
    }
    for side in [-1.0, 1.0] {
        let ex = side * id.eye_spacing / 2.0;
        if (u - ex).powi(2) + (v - id.eye_height).powi(2) <= EYE_RADIUS * EYE_RADIUS {
            return FEATURE;
        }
        let by = id.eye_height - 0.19;
        let inner = (ex - side * 0.14, by + e.brow_angle * 0.10);
        let outer = (ex + side * 0.14, by - e.brow_angle * 0.10);
        if in_segment(u, v, inner, outer, 0.03) {
            return FEATURE;
        }
    }
    if in_mouth(u, v, e) {
        return FEATURE;
    }
    SKIN
}

fn to_unit_coord(p: f64, n: usize) -> f64 {
    p / n as f64 * 2.0 - 1.0
}

/// Noise-free anti-aliased render in `[0, 1]`, row-major `[n, n]`.
fn render_clean(id: &Identity, e: &Expression, n: usize, ss: usize) -> Vec<f64> {
    let inv = 1.0 / (ss * ss) as f64;
    (0..n * n)
        .map(|i| {
            let (y, x) = (i / n, i % n);
            let mut acc = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let v = to_unit_coord(y as f64 + (sy as f64 + 0.5) / ss as f64, n);
                    let u = to_unit_coord(x as f64 + (sx as f64 + 0.5) / ss as f64, n);
                    acc += shade(u, v, id, e);
                }
            }
            acc * inv
        })
        .collect()
}

/// Render to a `[1, n, n]` tensor in `[-1, 1]`, quantised to the 8-bit grid
/// so in-memory and on-disk copies agree exactly.
pub fn render(id: &Identity, e: &Expression, spec: &ToyFaceSpec, rng: &mut impl Rng) -> Tensor<f32> {
    let n = spec.render_size;
    let clean = render_clean(id, e, n, spec.supersample);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid sigma");
    let data = clean
        .into_iter()
        .map(|p| {
            let p = if spec.noise > 0.0 { p + noise.sample(rng) } else { p };
            byte_to_unit(unit_to_byte((p.clamp(0.0, 1.0) * 2.0 - 1.0) as f32))
        })
        .collect();
    Tensor::from_vec(&[1, n, n], data).expect("render shape")
}

/// Boolean masks over an `n x n` canvas for the eye (with brow) and mouth
/// regions and for the background outside the face.
#[derive(Clone, Debug)]
pub struct RegionMasks {
    pub size: usize,
    pub eyes: Vec<bool>,
    pub mouth: Vec<bool>,
    pub background: Vec<bool>,
}

impl RegionMasks {
    pub fn new(id: &Identity, n: usize) -> Self {
        let mut m = RegionMasks { size: n, eyes: vec![false; n * n], mouth: vec![false; n * n], background: vec![false; n * n] };
        for i in 0..n * n {
            let v = to_unit_coord((i / n) as f64 + 0.5, n);
            let u = to_unit_coord((i % n) as f64 + 0.5, n);
            m.eyes[i] = [-1.0, 1.0].iter().any(|s| {
                (u - s * id.eye_spacing / 2.0).abs() <= 0.22 && v >= id.eye_height - 0.32 && v <= id.eye_height + 0.16
            });
            m.mouth[i] = u.abs() <= MOUTH_HALF_WIDTH + 0.08 && (MOUTH_Y - 0.25..=MOUTH_Y + 0.30).contains(&v);
            m.background[i] = in_face(u, v, id) > 1.1;
        }
        m
    }

    /// Restrict to a `k x k` window at `origin`.
    pub fn crop(&self, origin: (usize, usize), k: usize) -> RegionMasks {
        let n = self.size;
        let pick = |m: &[bool]| (0..k * k).map(|i| m[(origin.0 + i / k) * n + origin.1 + i % k]).collect();
        RegionMasks { size: k, eyes: pick(&self.eyes), mouth: pick(&self.mouth), background: pick(&self.background) }
    }
}

/// Rule-based classifier on the sidecar parameters: nearest archetype
/// mouth curvature.
pub fn oracle_from_params(face: &Expression, classes: usize) -> usize {
    (0..classes.min(ARCHETYPES.len()))
        .min_by(|&a, &b| {
            let da = (ARCHETYPES[a].0 - face.mouth_curvature).abs();
            let db = (ARCHETYPES[b].0 - face.mouth_curvature).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(0)
}

/// Classify an image by nearest mouth-region template. `image` is `[1, k, k]`
/// and is assumed to be the centred `k x k` crop of a `canvas x canvas` face.
/// Works on renders and on synthesised images alike.
pub struct MouthOracle {
    canvas: usize,
    crop: usize,
    window: Vec<usize>,
    templates: Vec<Vec<f64>>,
}

impl MouthOracle {
    pub fn new(canvas: usize, crop: usize, classes: usize) -> Result<Self> {
        if crop > canvas || classes == 0 || classes > ARCHETYPES.len() {
            return Err(input_err!("bad oracle geometry: canvas {canvas}, crop {crop}, {classes} classes"));
        }
        let off = (canvas - crop) / 2;
        let mut window = Vec::new();
        for y in 0..crop {
            for x in 0..crop {
                let v = to_unit_coord((y + off) as f64 + 0.5, canvas);
                let u = to_unit_coord((x + off) as f64 + 0.5, canvas);
                if u.abs() <= 0.46 && (0.22..=0.66).contains(&v) {
                    window.push(y * crop + x);
                }
            }
        }
        let ss = 4;
        let inv = 1.0 / (ss * ss) as f64;
        let templates = (0..classes)
            .map(|c| {
                let e = Expression::archetype(c).expect("class in range");
                window
                    .iter()
                    .map(|&i| {
                        let (y, x) = (i / crop + off, i % crop + off);
                        let mut acc = 0.0;
                        for sy in 0..ss {
                            for sx in 0..ss {
                                let v = to_unit_coord(y as f64 + (sy as f64 + 0.5) / ss as f64, canvas);
                                let u = to_unit_coord(x as f64 + (sx as f64 + 0.5) / ss as f64, canvas);
                                acc += if in_mouth(u, v, &e) { FEATURE } else { SKIN };
                            }
                        }
                        acc * inv * 2.0 - 1.0
                    })
                    .collect()
            })
            .collect();
        Ok(MouthOracle { canvas, crop, window, templates })
    }

    pub fn canvas(&self) -> usize {
        self.canvas
    }

    pub fn classify(&self, image: &Tensor<f32>) -> Result<usize> {
        if image.shape() != [1, self.crop, self.crop] {
            return Err(input_err!("oracle expects [1, {0}, {0}], got {1:?}", self.crop, image.shape()));
        }
        let px = image.data();
        let sse = |t: &Vec<f64>| -> f64 {
            self.window.iter().zip(t).map(|(&i, &tv)| (px[i] as f64 - tv).powi(2)).sum()
        };
        Ok((0..self.templates.len())
            .min_by(|&a, &b| sse(&self.templates[a]).total_cmp(&sse(&self.templates[b])))
            .unwrap_or(0))
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
    pub params: Vec<RenderParams>,
}

impl ToyDataset {
    pub fn identity_of(&self, subject: usize) -> Option<Identity> {
        self.params.iter().find(|p| p.subject == subject).map(|p| p.identity)
    }
}

/// Render `counts[c]` images of each class spread over `n_subjects`
/// subjects. Each image has its own RNG stream derived from `(seed, index)`
/// so rendering order does not matter. When `out_dir` is given, PNGs go to
/// `out_dir/images/`, with `manifest.csv` and `render_params.json` beside them.
pub fn generate_toy_dataset(
    out_dir: Option<&Path>,
    n_subjects: usize,
    counts: &[usize],
    spec: &ToyFaceSpec,
    seed: u64,
) -> Result<ToyDataset> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(input_err!("{}", errs.join("; ")));
    }
    if n_subjects == 0 {
        return Err(input_err!("need at least one subject"));
    }
    if counts.is_empty() || counts.len() > ARCHETYPES.len() {
        return Err(input_err!("toy faces support 1..={} classes, got {}", ARCHETYPES.len(), counts.len()));
    }
    let cap = n_subjects * spec.per_subject_cap;
    if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n > cap) {
        return Err(input_err!(
            "{n} images of class {c} exceed {n_subjects} subjects x {} per subject",
            spec.per_subject_cap
        ));
    }
    let identities: Vec<Identity> = (0..n_subjects)
        .map(|s| Identity::random(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, s as u64))))
        .collect();

    let mut jobs = Vec::new();
    for (class, &n) in counts.iter().enumerate() {
        let mut order: Vec<usize> = (0..n_subjects).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, class as u64)));
        for j in 0..n {
            jobs.push((class, order[j % n_subjects], j / n_subjects));
        }
    }

    let rendered: Vec<(Sample, RenderParams)> = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(class, subject, k))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, index as u64));
            let id = identities[subject];
            let face = Expression::jittered(class, spec.jitter, &mut rng)?;
            let image = render(&id, &face, spec, &mut rng);
            let path = format!("images/s{subject:03}_c{class}_{k:02}.png");
            let params = RenderParams { path, subject, expression: class, identity: id, face };
            Ok((Sample { image, subject, expression: class, synthetic: false }, params))
        })
        .collect::<Result<_>>()?;
    let (samples, params): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();

    let records: Vec<Record> = params
        .iter()
        .map(|p| Record { path: p.path.clone().into(), subject_id: p.subject, expression: p.expression, synthetic: false })
        .collect();
    let root = out_dir.map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::new(root, records, counts.len())?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
        samples
            .par_iter()
            .zip(&params)
            .try_for_each(|(s, p)| save_png(&dir.join(&p.path), &s.image))?;
        manifest.write(&dir.join("manifest.csv"))?;
        let sidecar = dir.join("render_params.json");
        let json = serde_json::to_string_pretty(&params).expect("params serialize");
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(ToyDataset { manifest, samples, params })
}

pub fn load_render_params(path: &Path) -> Result<Vec<RenderParams>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
