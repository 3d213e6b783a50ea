//! The assembled two-branch network and its patch discriminator.

mod discriminator;
mod fersnet;

pub use discriminator::{Discriminator, DiscriminatorCache};
pub use fersnet::{ArchConfig, BlockGates, FersnetModel, JointCache, JointOutput, Sharing};

use crate::error::{input_err, Result};
use crate::nn::Mode;
use crate::tensor::{Scalar, Tensor};

/// One-hot rows `[B, E]` for the given class indices.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(input_err!("empty label batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(input_err!("label {bad} outside [0, {classes})"));
    }
    Ok(Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Validate a one-hot batch (`[B, E]`, or `[E]` for a single label) and
/// return the class index of each row.
pub fn decode_one_hot<T: Scalar>(t: &Tensor<T>, classes: usize) -> Result<Vec<usize>> {
    let (rows, cols) = match t.shape() {
        [e] => (1, *e),
        [b, e] => (*b, *e),
        s => return Err(input_err!("label tensor must be [B, E], got {s:?}")),
    };
    if cols != classes {
        return Err(input_err!("label has {cols} entries, expected {classes}"));
    }
    (0..rows)
        .map(|r| {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let hot: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == T::one()).map(|(i, _)| i).collect();
            let rest_zero = row.iter().all(|&v| v == T::one() || v == T::zero());
            if hot.len() == 1 && rest_zero {
                Ok(hot[0])
            } else {
                Err(input_err!("label row {r} is not one-hot: {row:?}"))
            }
        })
        .collect()
}

/// Something that maps an image batch and target labels to an image batch of
/// the same shape, differentiably.
pub trait Generator<T: Scalar> {
    type Cache;

    fn generate_fwd(&self, image: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<(Tensor<T>, Self::Cache)>;

    /// Accumulate parameter gradients and return `dL/d image`.
    fn generate_bwd(&mut self, cache: Self::Cache, d_out: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Anything that produces class logits `[B, E]` for an image batch in eval mode.
pub trait Recognizer<T: Scalar = f32> {
    fn classes(&self) -> usize;
    fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Recognizer<T> for FersnetModel<T> {
    fn classes(&self) -> usize {
        self.config.classes
    }

    fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.fer_forward(images, Mode::Eval)?.0)
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
