use fersnet_core::data::{generate_toy_dataset, identity_folds, CropConfig, Sample, ToyDataset, ToyFaceSpec};
use fersnet_core::model::ArchConfig;
use fersnet_core::train::TrainConfig;

/// A small rendered corpus and its held-out identity fold.
pub struct Split {
    pub data: ToyDataset,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub test_index: Vec<usize>,
}

pub fn split(data: ToyDataset, folds: usize, fold_seed: u64) -> Split {
    let f = identity_folds(&data.manifest.records, folds, fold_seed).unwrap();
    let (tr, te) = f.split(&data.manifest.records, 0).unwrap();
    let train = tr.iter().map(|&i| data.samples[i].clone()).collect();
    let test = te.iter().map(|&i| data.samples[i].clone()).collect();
    Split { data, train, test, test_index: te }
}

/// 36-pixel canvas, 6 classes, 8 subjects, 48 images.
pub fn small_split(seed: u64) -> Split {
    let spec = ToyFaceSpec { render_size: 36, ..Default::default() };
    split(generate_toy_dataset(None, 8, &[8; 6], &spec, seed).unwrap(), 4, seed)
}

/// A model that trains in seconds on 32-pixel crops.
pub fn tiny_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig { batch_size: 8, epochs, deterministic: true, ..Default::default() };
    cfg.arch = ArchConfig { image_size: 32, ladder: [4, 4, 8, 8], classifier_hidden: 8, ..Default::default() };
    cfg.data = CropConfig { canvas: 36, crop: 32 };
    cfg.embedder.epochs = 2;
    cfg.finetune_epochs = 1;
    cfg
}
