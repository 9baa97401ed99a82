//! Denoising diffusion with neural cellular automata.
//!
//! The denoiser is a single-cell update rule replicated over the pixel grid and iterated a
//! fixed number of steps ([`nca`]). The `FourierDiff` variant first runs a second rule on a
//! low-frequency window of the image spectrum ([`fourier`]), which gives every cell global
//! context after one step. [`diffusion`] holds the DDPM forward process and the reverse-chain
//! samplers (plain, masked inpainting, 2x upscaling and large-canvas synthesis), [`optim`]
//! the Adam/EMA training step.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, PNG handling and the command
//! line live in the companion `diffnca` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod fourier;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod nca;
pub mod optim;
pub mod real;
pub mod rng;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result, Stage};
pub use model::{Model, ModelConfig, ModelKind, PositionMode};
pub use nca::{CellRuleParams, Padding, StateGrid};
pub use real::Real;
pub use tensor::Tensor;
