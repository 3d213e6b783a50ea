//! Toy corpus, manifests, augmentation, identity folds and synthetic
//! balancing.

pub mod augment;
pub mod folds;
pub mod image;
pub mod manifest;
pub mod toy;

pub use augment::{apply_transform, augment_train, preprocess_eval, CropConfig, Transform, ROTATIONS_DEG};
pub use folds::{identity_folds, FoldAssignment};
pub use manifest::{load_manifest, DatasetManifest, Record};
pub use toy::{generate_toy_dataset, MouthOracle, RegionMasks, ToyDataset, ToyFaceSpec, CLASS_NAMES};

use std::path::Path;

use rayon::prelude::*;

use crate::error::{input_err, Error, Result};
use crate::model::Generator;
use crate::nn::Mode;
use crate::tensor::Tensor;

/// One image with its labels. `image` is `[C, H, W]` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub subject: usize,
    pub expression: usize,
    pub synthetic: bool,
}

/// Independent 64-bit stream seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ stream) ^ index)
}

/// Load every manifest image, resized to `canvas x canvas` if needed.
pub fn load_samples(manifest: &DatasetManifest, channels: usize, canvas: usize) -> Result<Vec<Sample>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            let img = image::load_png(&manifest.resolve(r), channels)?;
            let img = image::resize(&img, canvas, canvas)?;
            Ok(Sample { image: img, subject: r.subject_id, expression: r.expression, synthetic: r.synthetic })
        })
        .collect()
}

pub fn class_counts(samples: &[Sample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        counts[s.expression] += 1;
    }
    counts
}

/// For every real sample, synthesise one image per target class. The result
/// holds `samples.len()` images of each class, all tagged synthetic.
pub fn balance_with_fes<G: Generator<f32>>(
    samples: &[Sample],
    generator: &G,
    classes: usize,
    batch: usize,
) -> Result<Vec<Sample>> {
    if batch == 0 {
        return Err(input_err!("batch size must be positive"));
    }
    let mut out = Vec::with_capacity(samples.len() * classes);
    for chunk in samples.chunks(batch) {
        let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let x = Tensor::stack(&imgs)?;
        for target in 0..classes {
            let labels = vec![target; chunk.len()];
            let (y, _) = generator.generate_fwd(&x, &labels, Mode::Eval)?;
            if !y.all_finite() {
                return Err(Error::Generation(format!("non-finite output for target class {target}")));
            }
            for (i, s) in chunk.iter().enumerate() {
                let image = Tensor::from_vec(s.image.shape(), y.item(i).to_vec())?;
                out.push(Sample { image, subject: s.subject, expression: target, synthetic: true });
            }
        }
    }
    Ok(out)
}

/// Write samples as PNGs under `dir/images/` plus a manifest.
pub fn write_samples(dir: &Path, samples: &[Sample], classes: usize, prefix: &str) -> Result<DatasetManifest> {
    let records: Vec<Record> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| Record {
            path: format!("images/{prefix}{i:05}_s{}_c{}.png", s.subject, s.expression).into(),
            subject_id: s.subject,
            expression: s.expression,
            synthetic: s.synthetic,
        })
        .collect();
    let manifest = DatasetManifest::new(dir, records, classes)?;
    samples
        .par_iter()
        .zip(&manifest.records)
        .try_for_each(|(s, r)| image::save_png(&dir.join(&r.path), &s.image))?;
    manifest.write(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Shift;
    impl Generator<f32> for Shift {
        type Cache = ();
        fn generate_fwd(&self, image: &Tensor<f32>, labels: &[usize], _: Mode) -> Result<(Tensor<f32>, ())> {
            Ok((image.map(|v| v * 0.5 + labels[0] as f32 * 0.01), ()))
        }
        fn generate_bwd(&mut self, _: (), d: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(d.clone())
        }
    }

    struct Broken;
    impl Generator<f32> for Broken {
        type Cache = ();
        fn generate_fwd(&self, image: &Tensor<f32>, _: &[usize], _: Mode) -> Result<(Tensor<f32>, ())> {
            Ok((image.map(|_| f32::NAN), ()))
        }
        fn generate_bwd(&mut self, _: (), d: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(d.clone())
        }
    }

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                image: Tensor::full(&[1, 4, 4], 0.1 * (i % 5) as f32),
                subject: i / 2,
                expression: i % 3,
                synthetic: false,
            })
            .collect()
    }

    #[test]
    fn balancing_ten_samples() {
        let out = balance_with_fes(&samples(10), &Shift, 6, 4).unwrap();
        assert_eq!(out.len(), 60);
        assert_eq!(class_counts(&out, 6), vec![10; 6]);
        assert!(out.iter().all(|s| s.synthetic));
        assert!(matches!(balance_with_fes(&samples(3), &Broken, 6, 4), Err(Error::Generation(_))));
    }

    #[test]
    fn seeds_differ_per_index_and_stream() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(7, 3, 9), derive_seed(7, 3, 9));
    }

    #[test]
    fn written_samples_reload() {
        let d = tempfile::tempdir().unwrap();
        let s: Vec<Sample> = samples(4)
            .into_iter()
            .map(|mut s| {
                s.image = s.image.map(|v| image::byte_to_unit(image::unit_to_byte(v)));
                s
            })
            .collect();
        let m = write_samples(d.path(), &s, 3, "x").unwrap();
        let back = load_samples(&load_manifest(&d.path().join("manifest.csv"), 3).unwrap(), 1, 4).unwrap();
        assert_eq!(back, s);
        assert_eq!(m.len(), 4);
    }
}
