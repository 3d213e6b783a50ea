//! Differentiable layers, composite blocks, and gradient checking.

pub mod blocks;
pub mod gradcheck;
pub mod layers;
pub mod param;

pub use blocks::{ConvBlock, ConvBlockCache, DeconvBlock, DeconvBlockCache};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2x2, Linear, Mode};
pub use param::{param_hash, Module, Param};
