use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::trainer::train;
use crate::data::{identity_folds, preprocess_eval, CropConfig, Record, Sample};
use crate::error::{input_err, Error, Result};
use crate::model::{argmax, Generator, Recognizer};
use crate::nn::Mode;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 64;

/// Centre-crop canvas-size images; crop-size images pass through unchanged.
pub fn eval_view(image: &Tensor<f32>, crop: &CropConfig) -> Result<Tensor<f32>> {
    match image.shape() {
        [_, h, w] if *h == crop.crop && *w == crop.crop => Ok(image.clone()),
        _ => preprocess_eval(image, crop),
    }
}

fn stack_views(samples: &[&Sample], crop: &CropConfig) -> Result<Tensor<f32>> {
    let views = samples.iter().map(|s| eval_view(&s.image, crop)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&views.iter().collect::<Vec<_>>())
}

/// Predicted class of every sample.
pub fn predict<R: Recognizer<f32> + ?Sized>(model: &R, samples: &[Sample], crop: &CropConfig) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let logits = model.logits(&stack_views(&refs, crop)?)?;
        let (b, e) = logits.dims2()?;
        out.extend((0..b).map(|i| argmax(&logits.data()[i * e..(i + 1) * e])));
    }
    Ok(out)
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate_fer<R: Recognizer<f32> + ?Sized>(model: &R, samples: &[Sample], crop: &CropConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(input_err!("cannot evaluate on an empty set"));
    }
    let pred = predict(model, samples, crop)?;
    let hits = pred.iter().zip(samples).filter(|(p, s)| **p == s.expression).count();
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
}

/// Subject-disjoint k-fold cross-validation, training from scratch per fold.
pub fn cross_validate(cfg: &TrainConfig, samples: &[Sample], k: usize) -> Result<CvReport> {
    let records: Vec<Record> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| Record { path: i.to_string().into(), subject_id: s.subject, expression: s.expression, synthetic: false })
        .collect();
    let folds = identity_folds(&records, k, cfg.seed)?;
    let mut accs = Vec::with_capacity(k);
    for fold in 0..k {
        let (tr, te) = folds.split(&records, fold)?;
        let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
        let (tr, te) = (pick(&tr), pick(&te));
        let outcome = train(cfg, &tr, None, None)?;
        accs.push(evaluate_fer(&outcome.model, &te, &cfg.data)?);
    }
    let mean = accs.iter().sum::<f64>() / k as f64;
    Ok(CvReport { fold_accuracies: accs, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FesTargets {
    /// Every class for every test image.
    All,
    /// Only each image's own label.
    SourceOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FesReport {
    pub real_accuracy: f64,
    pub synthetic_accuracy: f64,
    /// Recognizer accuracy on synthetic images, by target class.
    pub per_target: Vec<f64>,
    pub synthesized: usize,
}

/// Synthesize target expressions for every test image and score an
/// independently trained recognizer against the target labels.
pub fn evaluate_fes_quantitative<G: Generator<f32>, R: Recognizer<f32> + ?Sized>(
    generator: &G,
    recognizer: &R,
    test: &[Sample],
    crop: &CropConfig,
    targets: FesTargets,
) -> Result<FesReport> {
    let classes = recognizer.classes();
    let real_accuracy = evaluate_fer(recognizer, test, crop)?;
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for chunk in test.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = stack_views(&refs, crop)?;
        let plans: Vec<Vec<usize>> = match targets {
            FesTargets::All => (0..classes).map(|t| vec![t; chunk.len()]).collect(),
            FesTargets::SourceOnly => vec![chunk.iter().map(|s| s.expression).collect()],
        };
        for labels in plans {
            let (y, _) = generator.generate_fwd(&x, &labels, Mode::Eval)?;
            if !y.all_finite() {
                return Err(Error::Generation("non-finite synthesized image".into()));
            }
            let logits = recognizer.logits(&y)?;
            let (b, e) = logits.dims2()?;
            for i in 0..b {
                seen[labels[i]] += 1;
                if argmax(&logits.data()[i * e..(i + 1) * e]) == labels[i] {
                    hits[labels[i]] += 1;
                }
            }
        }
    }
    let synthesized: usize = seen.iter().sum();
    Ok(FesReport {
        real_accuracy,
        synthetic_accuracy: hits.iter().sum::<usize>() as f64 / synthesized as f64,
        per_target: hits.iter().zip(&seen).map(|(&h, &n)| if n == 0 { f64::NAN } else { h as f64 / n as f64 }).collect(),
        synthesized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reads the label off pixel (0,0): value encodes class.
    struct Perfect;
    impl Recognizer<f32> for Perfect {
        fn classes(&self) -> usize {
            6
        }
        fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
            let (b, _, h, w) = images.dims4()?;
            Ok(Tensor::from_fn(&[b, 6], |i| {
                let c = (images.data()[(i / 6) * h * w] * 10.0).round() as usize;
                if i % 6 == c {
                    1.0
                } else {
                    0.0
                }
            }))
        }
    }

    struct Constant;
    impl Recognizer<f32> for Constant {
        fn classes(&self) -> usize {
            6
        }
        fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(Tensor::zeros(&[images.shape()[0], 6]))
        }
    }

    struct Same;
    impl Generator<f32> for Same {
        type Cache = ();
        fn generate_fwd(&self, x: &Tensor<f32>, _: &[usize], _: Mode) -> Result<(Tensor<f32>, ())> {
            Ok((x.clone(), ()))
        }
        fn generate_bwd(&mut self, _: (), d: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(d.clone())
        }
    }

    fn set(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                image: Tensor::full(&[1, 4, 4], (i % 6) as f32 / 10.0),
                subject: i,
                expression: i % 6,
                synthetic: false,
            })
            .collect()
    }

    const CROP: CropConfig = CropConfig { canvas: 4, crop: 4 };

    #[test]
    fn stub_accuracies() {
        assert_eq!(evaluate_fer(&Perfect, &set(12), &CROP).unwrap(), 1.0);
        assert!((evaluate_fer(&Constant, &set(120), &CROP).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        assert!(evaluate_fer(&Perfect, &[], &CROP).is_err());
    }

    #[test]
    fn identity_generator_reproduces_real_accuracy() {
        let mut s = set(30);
        // corrupt a few so real accuracy is not trivially 1
        for x in s.iter_mut().step_by(4) {
            x.image = Tensor::full(&[1, 4, 4], 0.0);
        }
        let r = evaluate_fes_quantitative(&Same, &Perfect, &s, &CROP, FesTargets::SourceOnly).unwrap();
        assert_eq!(r.synthetic_accuracy, r.real_accuracy);
        assert!(r.real_accuracy < 1.0);
        let all = evaluate_fes_quantitative(&Same, &Perfect, &s, &CROP, FesTargets::All).unwrap();
        assert_eq!(all.synthesized, 180);
    }
}
