use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::{eval_view, evaluate_fer};
use super::optim::{cosine_lr, Adam};
use super::trainer::train;
use crate::data::{apply_transform, balance_with_fes, derive_seed, Sample, Transform};
use crate::error::{config_err, input_err, Result};
use crate::losses::classification_loss;
use crate::model::{ArchConfig, FersnetModel, Sharing};
use crate::nn::param::Module;
use crate::nn::Mode;
use crate::tensor::Tensor;

pub const VARIANT_NAMES: [&str; 4] = ["FERSNet w/o MTL", "FERSNet w/o ConvFLU", "FERSNet (original)", "FERSNet w/ FES-DA"];

fn count_fer_path(arch: &ArchConfig) -> Result<usize> {
    Ok(FersnetModel::<f32>::new(arch.clone(), &mut ChaCha8Rng::seed_from_u64(0))?.fer_path_params())
}

/// Widen the channel ladder of `arch` under `sharing` until its FER path has
/// at least as many parameters as the gated model's.
pub fn capacity_matched(arch: &ArchConfig, sharing: Sharing) -> Result<ArchConfig> {
    let target = count_fer_path(&ArchConfig { sharing: Sharing::Convflu, ..arch.clone() })?;
    for i in 0..64 {
        let f = 1.0 + 0.0625 * i as f64;
        let ladder = arch.ladder.map(|w| (w as f64 * f).ceil() as usize);
        let cand = ArchConfig { sharing, ladder, transformer_channels: Some(arch.transformer_channels()), ..arch.clone() };
        if count_fer_path(&cand)? >= target {
            return Ok(cand);
        }
    }
    Err(config_err!("could not match FER-path capacity of {target} parameters"))
}

pub fn convflu_param_count(model: &impl Module<f32>) -> usize {
    let mut n = 0;
    model.visit("", &mut |name, p| {
        if name.starts_with("transfer.") {
            n += p.value.len();
        }
    });
    n
}

fn mirror(image: &Tensor<f32>) -> Tensor<f32> {
    let [c, h, w] = *image.shape() else { return image.clone() };
    Tensor::from_fn(&[c, h, w], |i| {
        let (p, x) = (i / w, i % w);
        image.data()[p * w + (w - 1 - x)]
    })
}

/// Fine-tune the recognition path on a 1:1 mix of augmented real images and
/// a class-balanced synthetic set produced by the model itself.
pub fn finetune_with_fes(cfg: &TrainConfig, model: &FersnetModel<f32>, train: &[Sample]) -> Result<FersnetModel<f32>> {
    if !model.has_synthesis() {
        return Err(config_err!("fine-tuning on synthetic data needs a model with a synthesis path"));
    }
    let views: Vec<Sample> = train
        .iter()
        .map(|s| Ok(Sample { image: eval_view(&s.image, &cfg.data)?, ..s.clone() }))
        .collect::<Result<_>>()?;
    let synthetic = balance_with_fes(&views, model, cfg.arch.classes, cfg.batch_size.max(1))?;
    let mut model = model.clone();
    let half = (cfg.batch_size / 2).max(1);
    if train.len() < half {
        return Err(input_err!("training set smaller than half a batch"));
    }
    let per_epoch = train.len() / half;
    let total = (per_epoch * cfg.finetune_epochs).max(1);
    let mut adam = Adam::default();
    let mut step = 0;
    let mut syn_order: Vec<usize> = Vec::new();
    for epoch in 0..cfg.finetune_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 40, epoch as u64)));
        for chunk in order.chunks_exact(half) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 41, step as u64));
            let mut imgs = Vec::with_capacity(2 * half);
            let mut labels = Vec::with_capacity(2 * half);
            for &i in chunk {
                imgs.push(apply_transform(&train[i].image, &Transform::draw(&cfg.data, &mut rng), &cfg.data)?);
                labels.push(train[i].expression);
            }
            for _ in 0..half {
                if syn_order.is_empty() {
                    syn_order = (0..synthetic.len()).collect();
                    syn_order.shuffle(&mut rng);
                }
                let s = &synthetic[syn_order.pop().expect("refilled")];
                imgs.push(if rng.random_bool(0.5) { mirror(&s.image) } else { s.image.clone() });
                labels.push(s.expression);
            }
            let x = Tensor::stack(&imgs.iter().collect::<Vec<_>>())?;
            model.zero_grad();
            let (logits, cache) = model.fer_forward(&x, Mode::Train)?;
            let loss = classification_loss(&logits, &labels)?;
            model.backward(&cache, Some(&loss.grad), None)?;
            model.track(&cache);
            let lr = cosine_lr(step.min(total - 1), total - 1, cfg.finetune_lr, cfg.lr_min.min(cfg.finetune_lr))?;
            adam.step(&mut model, lr);
            step += 1;
        }
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub fer_path_params: usize,
    pub convflu_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mean,std,fer_path_params,convflu_params");
        for seed in &self.seeds {
            let _ = write!(s, ",seed_{seed}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{},{}", r.variant, r.mean, r.std, r.fer_path_params, r.convflu_params);
            for a in &r.accuracies {
                let _ = write!(s, ",{a}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<22} {:>10} {:>8} {:>12}\n", "Method", "Acc. (%)", "± std", "FER params");
        for r in &self.rows {
            let _ = writeln!(s, "{:<22} {:>10.2} {:>8.2} {:>12}", r.variant, 100.0 * r.mean, 100.0 * r.std, r.fer_path_params);
        }
        s
    }
}

/// Trained models of one seed, kept for downstream analyses.
pub struct SeedModels {
    pub seed: u64,
    pub single_task: FersnetModel<f32>,
    pub summation: FersnetModel<f32>,
    pub original: FersnetModel<f32>,
    pub augmented: FersnetModel<f32>,
}

pub struct AblationOutcome {
    pub table: AblationTable,
    pub models: Vec<SeedModels>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Train the four variants with identical seeds, epochs and data order, and
/// score each on `test`.
pub fn run_ablation(cfg: &TrainConfig, train_set: &[Sample], test: &[Sample], seeds: &[u64]) -> Result<AblationOutcome> {
    if seeds.is_empty() {
        return Err(input_err!("ablation needs at least one seed"));
    }
    let base = ArchConfig { sharing: Sharing::Convflu, ..cfg.arch.clone() };
    let single_arch = capacity_matched(&base, Sharing::SingleTask)?;
    let sum_arch = capacity_matched(&base, Sharing::Summation)?;
    let mut accs = vec![Vec::new(); 4];
    let mut models = Vec::new();
    let mut params = [0usize; 4];
    let mut convflu = [0usize; 4];
    for &seed in seeds {
        let run = |arch: &ArchConfig| {
            let c = TrainConfig { seed, arch: arch.clone(), ..cfg.clone() };
            train(&c, train_set, None, None).map(|o| o.model)
        };
        let single_task = run(&single_arch)?;
        let summation = run(&sum_arch)?;
        let original = run(&base)?;
        let augmented = finetune_with_fes(&TrainConfig { seed, ..cfg.clone() }, &original, train_set)?;
        for (i, m) in [&single_task, &summation, &original, &augmented].into_iter().enumerate() {
            accs[i].push(evaluate_fer(m, test, &cfg.data)?);
            params[i] = m.fer_path_params();
            convflu[i] = convflu_param_count(m);
        }
        models.push(SeedModels { seed, single_task, summation, original, augmented });
    }
    let rows = (0..4)
        .map(|i| {
            let (mean, std) = mean_std(&accs[i]);
            AblationRow {
                variant: VARIANT_NAMES[i].to_string(),
                accuracies: accs[i].clone(),
                mean,
                std,
                fer_path_params: params[i],
                convflu_params: convflu[i],
            }
        })
        .collect();
    Ok(AblationOutcome { table: AblationTable { seeds: seeds.to_vec(), rows }, models })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_matching_meets_the_original() {
        let arch = ArchConfig { image_size: 32, ..Default::default() };
        let target = count_fer_path(&arch).unwrap();
        for sharing in [Sharing::SingleTask, Sharing::Summation] {
            let m = capacity_matched(&arch, sharing).unwrap();
            assert_eq!(m.sharing, sharing);
            assert!(count_fer_path(&m).unwrap() >= target);
        }
        let single = FersnetModel::<f32>::new(capacity_matched(&arch, Sharing::SingleTask).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(convflu_param_count(&single), 0);
        assert!(single.param_names().iter().all(|n| !n.starts_with("transfer.")));
    }

    #[test]
    fn table_formats() {
        let t = AblationTable {
            seeds: vec![1, 2],
            rows: VARIANT_NAMES
                .iter()
                .map(|v| AblationRow {
                    variant: v.to_string(),
                    accuracies: vec![0.5, 0.7],
                    mean: 0.6,
                    std: 0.1,
                    fer_path_params: 10,
                    convflu_params: 0,
                })
                .collect(),
        };
        assert_eq!(t.to_csv().lines().count(), 5);
        assert_eq!(t.to_text().lines().count(), 5);
        assert!(t.to_text().contains("FERSNet w/ FES-DA"));
        let (m, sd) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-12 && (sd - 0.02f64.sqrt()).abs() < 1e-12);
    }
}
