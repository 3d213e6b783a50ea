//! Two-stream network for joint facial-expression recognition (FER) and
//! label-conditioned expression synthesis (FES), coupled by gated
//! feature-sharing units, plus the training, evaluation and ablation harness
//! around it.

pub mod checkpoint;
pub mod convflu;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
