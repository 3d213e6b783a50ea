mod common;

use common::toy::{small_split, tiny_config};
use fersnet_core::checkpoint::{file_sha256, load_model};
use fersnet_core::data::{generate_toy_dataset, preprocess_eval, ToyFaceSpec};
use fersnet_core::losses::IdentityEmbedder;
use fersnet_core::model::{argmax, Recognizer, Sharing};
use fersnet_core::nn::param_hash;
use fersnet_core::train::{
    cosine_lr, cross_validate, evaluate_fer, finetune_with_fes, train, train_conv_embedder, HISTORY_HEADER,
};
use fersnet_core::{Error, Tensor};

#[test]
fn deterministic_runs_repeat_exactly() {
    let s = small_split(11);
    let cfg = tiny_config(3);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = train(&cfg, &s.train, Some(&s.test), Some(d1.path())).unwrap();
    let b = train(&cfg, &s.train, Some(&s.test), Some(d2.path())).unwrap();
    let csv_a = a.history.to_csv();
    let csv_b = b.history.to_csv();
    assert!(csv_a.starts_with(HISTORY_HEADER));
    let first = |s: &str| s.lines().skip(1).take(20).map(str::to_string).collect::<Vec<_>>();
    assert_eq!(first(&csv_a).len(), 15);
    assert_eq!(first(&csv_a), first(&csv_b));
    assert_eq!(csv_a, csv_b);
    assert_eq!(param_hash(&a.model), param_hash(&b.model));
    let (pa, pb) = (a.history.checkpoint.unwrap(), b.history.checkpoint.unwrap());
    assert_eq!(file_sha256(&pa).unwrap(), file_sha256(&pb).unwrap());
    let (restored, _) = load_model(&pa).unwrap();
    assert_eq!(param_hash(&restored), param_hash(&a.model));

    let mut other = cfg.clone();
    other.seed = 1;
    let c = train(&other, &s.train, None, None).unwrap();
    assert_ne!(param_hash(&c.model), param_hash(&a.model));
}

#[test]
fn schedules_follow_their_closed_forms() {
    let s = small_split(12);
    let cfg = tiny_config(3);
    let out = train(&cfg, &s.train, None, None).unwrap();
    let rows = &out.history.rows;
    let total = rows.len();
    for r in rows {
        assert_eq!(r.lr, cosine_lr(r.step, total - 1, cfg.lr_max, cfg.lr_min).unwrap());
        let oracle = 0.1 + 0.4 * r.epoch as f64 / 2.0;
        assert!((r.report.lambda4 - oracle).abs() < 1e-12);
        assert!(r.report.total.is_finite());
    }
    assert_eq!(rows[0].lr, cfg.lr_max);
    assert!((rows[total - 1].lr - cfg.lr_min).abs() < 1e-15);
}

#[test]
fn audit_checks_every_alternating_update() {
    let s = small_split(13);
    let mut cfg = tiny_config(1);
    cfg.audit = true;
    let out = train(&cfg, &s.train, None, None).unwrap();
    assert_eq!(out.history.audited_updates, 2 * out.history.rows.len());
    assert!(out.history.audited_updates > 0);
}

#[test]
fn accuracy_matches_a_per_image_recount() {
    let spec = ToyFaceSpec { render_size: 36, ..Default::default() };
    let data = generate_toy_dataset(None, 10, &[17; 6], &spec, 5).unwrap();
    let samples = &data.samples[..100];
    let cfg = tiny_config(1);
    let model = train(&cfg, samples, None, None).unwrap().model;
    let acc = evaluate_fer(&model, samples, &cfg.data).unwrap();
    let mut hits = 0;
    for s in samples {
        let view = preprocess_eval(&s.image, &cfg.data).unwrap();
        let x = Tensor::from_vec(&[1, 1, 32, 32], view.into_data()).unwrap();
        if argmax(model.logits(&x).unwrap().data()) == s.expression {
            hits += 1;
        }
    }
    assert!((acc - hits as f64 / 100.0).abs() < 1e-12, "{acc} vs {hits}");
}

#[test]
fn trained_embedder_groups_subjects() {
    let s = small_split(14);
    let mut cfg = tiny_config(1);
    cfg.embedder.epochs = 25;
    let net = train_conv_embedder(&cfg, &s.train).unwrap();
    let views: Vec<Tensor<f32>> = s.train.iter().map(|x| preprocess_eval(&x.image, &cfg.data).unwrap()).collect();
    let refs: Vec<&Tensor<f32>> = views.iter().collect();
    let e = net.embed(&Tensor::stack(&refs).unwrap()).unwrap();
    let d = e.shape()[1];
    let row = |i: usize| &e.data()[i * d..(i + 1) * d];
    let dist = |i: usize, j: usize| row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
    let (mut same, mut cross) = ((0.0, 0), (0.0, 0));
    for i in 0..s.train.len() {
        for j in i + 1..s.train.len() {
            let acc = if s.train[i].subject == s.train[j].subject { &mut same } else { &mut cross };
            acc.0 += dist(i, j);
            acc.1 += 1;
        }
    }
    let (same, cross) = (same.0 / same.1 as f32, cross.0 / cross.1 as f32);
    assert!(same < cross, "same {same} cross {cross}");
}

#[test]
fn cross_validation_reports_every_fold() {
    let s = small_split(15);
    let rep = cross_validate(&tiny_config(1), &s.data.samples, 2).unwrap();
    assert_eq!(rep.fold_accuracies.len(), 2);
    assert!((rep.mean - rep.fold_accuracies.iter().sum::<f64>() / 2.0).abs() < 1e-12);
}

#[test]
fn fes_finetuning_keeps_the_architecture() {
    let s = small_split(16);
    let cfg = tiny_config(1);
    let base = train(&cfg, &s.train, None, None).unwrap().model;
    let tuned = finetune_with_fes(&cfg, &base, &s.train).unwrap();
    assert_eq!(tuned.config, base.config);
    assert_ne!(param_hash(&tuned), param_hash(&base));
    let single = {
        let mut c = cfg.clone();
        c.arch.sharing = Sharing::SingleTask;
        train(&c, &s.train, None, None).unwrap().model
    };
    assert!(finetune_with_fes(&cfg, &single, &s.train).is_err());
}

#[test]
fn divergence_leaves_a_restorable_checkpoint() {
    let s = small_split(17);
    let mut cfg = tiny_config(3);
    cfg.lr_max = 1e30;
    cfg.lr_min = 1e29;
    let dir = tempfile::tempdir().unwrap();
    match train(&cfg, &s.train, None, Some(dir.path())) {
        Err(Error::TrainingDiverged { last_good: Some(p), .. }) => {
            assert!(load_model(&p).is_ok());
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training at lr 1e30 should diverge"),
    }
}
