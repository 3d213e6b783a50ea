use serde::{Deserialize, Serialize};

use crate::data::CropConfig;
use crate::losses::LossWeights;
use crate::model::ArchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// Conv net trained on subject identity of the training split.
    Conv,
    /// Frozen random projection; needs no training.
    RandomProjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub widths: [usize; 3],
    pub epochs: usize,
    pub lr: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { kind: EmbedderKind::Conv, dim: 32, widths: [8, 16, 16], epochs: 15, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Single-threaded and bit-reproducible.
    pub deterministic: bool,
    /// Epochs between checkpoints when an output directory is given; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Epochs between evaluations on the held-out set; 0 disables.
    pub eval_every: usize,
    /// Hash both networks around every update to prove the alternation
    /// never touches the other player's parameters. Slow.
    pub audit: bool,
    /// Epochs of mixed real/synthetic fine-tuning for the augmented variant.
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub arch: ArchConfig,
    /// Discriminator widths; the encoder ladder when unset.
    pub discriminator: Option<[usize; 4]>,
    pub loss: LossWeights,
    pub data: CropConfig,
    pub embedder: EmbedderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 500,
            lr_max: 1e-3,
            lr_min: 1e-5,
            seed: 0,
            deterministic: false,
            checkpoint_every: 0,
            eval_every: 1,
            audit: false,
            finetune_epochs: 10,
            finetune_lr: 1e-4,
            arch: ArchConfig::default(),
            discriminator: None,
            loss: LossWeights::default(),
            data: CropConfig::default(),
            embedder: EmbedderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn discriminator_widths(&self) -> [usize; 4] {
        self.discriminator.unwrap_or(self.arch.ladder)
    }

    /// Every problem at once, one message per field.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size < 2 {
            errs.push(format!("batch_size must be >= 2 for batch norm, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            errs.push("epochs must be positive".into());
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            errs.push(format!("need 0 < lr_min < lr_max, got lr_min={} lr_max={}", self.lr_min, self.lr_max));
        }
        if !(self.finetune_lr > 0.0 && self.finetune_lr.is_finite()) {
            errs.push(format!("finetune_lr must be positive, got {}", self.finetune_lr));
        }
        errs.extend(self.arch.validate().into_iter().map(|e| format!("arch: {e}")));
        errs.extend(self.loss.validate());
        errs.extend(self.data.validate());
        if self.data.crop != self.arch.image_size {
            errs.push(format!(
                "data.crop ({}) must equal arch.image_size ({})",
                self.data.crop, self.arch.image_size
            ));
        }
        if self.discriminator_widths().contains(&0) {
            errs.push("discriminator widths must be positive".into());
        }
        let e = &self.embedder;
        if e.dim == 0 || e.widths.contains(&0) {
            errs.push("embedder.dim and embedder.widths must be positive".into());
        }
        if !(e.lr > 0.0 && e.lr.is_finite()) {
            errs.push(format!("embedder.lr must be positive, got {}", e.lr));
        }
        if self.arch.image_size % 8 != 0 {
            errs.push(format!("arch.image_size must be a multiple of 8, got {}", self.arch.image_size));
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert!(TrainConfig::default().validate().is_empty(), "{:?}", TrainConfig::default().validate());
    }

    #[test]
    fn all_errors_reported_together() {
        let c = TrainConfig { batch_size: 1, lr_min: 1e-2, epochs: 0, ..Default::default() };
        assert_eq!(c.validate().len(), 3);
    }

    #[test]
    fn serde_round_trip_and_unknown_fields() {
        let c = TrainConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
    }
}
