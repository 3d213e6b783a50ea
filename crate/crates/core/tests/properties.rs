use std::collections::{BTreeSet, HashSet};

use fersnet_core::convflu::{fuse, ConvFlu};
use fersnet_core::data::{
    augment_train, balance_with_fes, class_counts, identity_folds, preprocess_eval, CropConfig, Record, Sample,
    ROTATIONS_DEG,
};
use fersnet_core::model::Generator;
use fersnet_core::nn::Mode;
use fersnet_core::{Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn manifest() -> impl Strategy<Value = Vec<Record>> {
    // (subject id, expression) pairs; ids are sparse on purpose
    prop::collection::vec((0usize..500, 0usize..7), 2..300).prop_map(|pairs| {
        pairs
            .into_iter()
            .enumerate()
            .map(|(i, (s, e))| Record { path: format!("{i}.png").into(), subject_id: s, expression: e, synthetic: false })
            .collect()
    })
}

fn tensor(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn folds_are_subject_disjoint(records in manifest(), k in 2usize..11, seed in any::<u64>()) {
        let subjects: BTreeSet<usize> = records.iter().map(|r| r.subject_id).collect();
        prop_assume!(k <= subjects.len());
        let folds = identity_folds(&records, k, seed).unwrap();
        let sizes = folds.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen_test = vec![0usize; records.len()];
        for f in 0..k {
            let (train, test) = folds.split(&records, f).unwrap();
            prop_assert_eq!(train.len() + test.len(), records.len());
            let tr: HashSet<usize> = train.iter().map(|&i| records[i].subject_id).collect();
            let te: HashSet<usize> = test.iter().map(|&i| records[i].subject_id).collect();
            prop_assert!(tr.is_disjoint(&te));
            for i in test {
                seen_test[i] += 1;
            }
        }
        prop_assert!(seen_test.iter().all(|&n| n == 1));
    }

    #[test]
    fn fuse_stays_between_its_operands(
        (p, c, z) in (800usize..1600).prop_flat_map(|n| (tensor(n, -5.0, 5.0), tensor(n, -1.0, 1.0), tensor(n, 0.0, 1.0)))
    ) {
        let n = p.len();
        let t = |v: Vec<f64>| Tensor::from_vec(&[n], v).unwrap();
        let out = fuse(&t(p.clone()), &t(c.clone()), &t(z)).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            let (lo, hi) = (p[i].min(c[i]), p[i].max(c[i]));
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12, "{} not in [{}, {}]", v, lo, hi);
        }
        let zeros = Tensor::zeros(&[n]);
        let ones = Tensor::full(&[n], 1.0);
        let closed = fuse(&t(p.clone()), &t(c.clone()), &zeros).unwrap();
        let open = fuse(&t(p.clone()), &t(c.clone()), &ones).unwrap();
        prop_assert_eq!(closed.data(), &p[..]);
        prop_assert_eq!(open.data(), &c[..]);
    }

    #[test]
    fn gates_are_strictly_inside_the_unit_interval(seed in any::<u64>(), c in 1usize..6, side in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = ConvFlu::<f32>::new(c, &mut rng);
        let x = Tensor::from_fn(&[2, c, side, side], |i| ((i * 7919 + seed as usize) % 601) as f32 / 100.0 - 3.0);
        let y = x.map(|v| -0.5 * v);
        let (g, _) = unit.forward(&x, &y).unwrap();
        for v in g.r.data().iter().chain(g.z.data()) {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
        let closed = ConvFlu::<f32>::zeros(c);
        let (g0, _) = closed.forward(&x, &y).unwrap();
        prop_assert!(g0.r.data().iter().chain(g0.z.data()).all(|v| *v == 0.5));
    }

    #[test]
    fn augmentation_keeps_range_and_shape(seed in any::<u64>(), canvas in 8usize..24, margin in 0usize..6) {
        prop_assume!(margin < canvas);
        let cfg = CropConfig { canvas, crop: canvas - margin };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn(&[1, canvas, canvas], |i| if i % 3 == 0 { 1.0 } else { -1.0 + (i % 11) as f32 / 5.5 });
        for _ in 0..8 {
            let out = augment_train(&img, &cfg, &mut rng).unwrap();
            prop_assert_eq!(out.shape(), &[1, cfg.crop, cfg.crop]);
            prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn fes_balancing_is_uniform(labels in prop::collection::vec(0usize..6, 1..40), batch in 1usize..9) {
        let samples: Vec<Sample> = labels
            .iter()
            .enumerate()
            .map(|(i, &e)| Sample { image: Tensor::full(&[1, 4, 4], 0.1 * e as f32), subject: i % 5, expression: e, synthetic: false })
            .collect();
        let out = balance_with_fes(&samples, &Copy, 6, batch).unwrap();
        prop_assert_eq!(class_counts(&out, 6), vec![samples.len(); 6]);
        prop_assert!(out.iter().all(|s| s.synthetic));
    }
}

struct Copy;

impl Generator<f32> for Copy {
    type Cache = ();
    fn generate_fwd(&self, image: &Tensor<f32>, _: &[usize], _: Mode) -> Result<(Tensor<f32>, ())> {
        Ok((image.clone(), ()))
    }
    fn generate_bwd(&mut self, _: (), d: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(d.clone())
    }
}

#[test]
fn default_crop_protocol() {
    let cfg = CropConfig::default();
    assert_eq!((cfg.canvas, cfg.crop), (110, 96));
    assert_eq!(cfg.origin_count(), 225);
    assert_eq!(ROTATIONS_DEG.len(), 7);
    let img = Tensor::from_fn(&[1, 110, 110], |i| (i % 13) as f32 / 13.0);
    let c = preprocess_eval(&img, &cfg).unwrap();
    assert_eq!(c.shape(), &[1, 96, 96]);
    assert_eq!(c.data()[0], img.data()[7 * 110 + 7]);
}
