//! Adversarial training loop, evaluation protocols, ablation runner and gate
//! visualisation.

pub mod ablation;
pub mod config;
pub mod embedder;
pub mod eval;
pub mod gates;
pub mod optim;
pub mod trainer;

pub use ablation::{capacity_matched, finetune_with_fes, run_ablation, AblationOutcome, AblationTable, VARIANT_NAMES};
pub use config::{EmbedderConfig, EmbedderKind, TrainConfig};
pub use embedder::{build_identity_embedder, train_conv_embedder};
pub use eval::{cross_validate, evaluate_fer, evaluate_fes_quantitative, predict, CvReport, FesReport, FesTargets};
pub use gates::{export_gate_visualizations, gate_region_response, RegionResponse};
pub use optim::{cosine_lr, Adam};
pub use trainer::{train, train_from, RunHistory, StepRow, TrainOutcome, HISTORY_HEADER};
