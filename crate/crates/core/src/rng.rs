//! Keyed random streams.
//!
//! Every random draw comes from a ChaCha8 stream selected by a master seed plus a short tag
//! path, e.g. `(seed, FIRE, diffusion_step, nca_step)`. Draws are therefore replayable
//! and independent of evaluation order, thread count or platform.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::real::Real;
use crate::tensor::Tensor;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Tag namespaces, first element of every tag path.
pub mod domain {
    pub const FIRE: u64 = 1;
    pub const INIT_NOISE: u64 = 2;
    pub const STEP_NOISE: u64 = 3;
    pub const TRAIN_TIMESTEP: u64 = 4;
    pub const TRAIN_NOISE: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const PARAM_INIT: u64 = 7;
    pub const VALIDATION: u64 = 8;
    pub const SYNTHETIC: u64 = 9;
    pub const CROP: u64 = 10;
}

const fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    let key = tags
        .iter()
        .fold(0x6a09_e667_f3bc_c909u64, |acc, &t| splitmix(acc ^ splitmix(t)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

pub fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::from_f64(rng.sample::<f64, _>(StandardNormal))
}

/// Tensor of independent standard normal draws in row-major order.
pub fn normal_tensor<T: Real>(shape: &[usize], rng: &mut StreamRng) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = normal(rng);
    }
    t
}

/// Per-cell update gate for one NCA step: `true` means the cell applies its update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FireMask {
    batch: usize,
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl FireMask {
    /// Bernoulli(`fire_rate`) per cell, drawn in `(batch, row, col)` order.
    pub fn draw(batch: usize, height: usize, width: usize, fire_rate: f64, rng: &mut StreamRng) -> Self {
        let p = fire_rate.clamp(0.0, 1.0);
        let mask = (0..batch * height * width).map(|_| rng.gen_bool(p)).collect();
        FireMask {
            batch,
            height,
            width,
            mask,
        }
    }

    pub fn all(batch: usize, height: usize, width: usize, value: bool) -> Self {
        FireMask {
            batch,
            height,
            width,
            mask: alloc::vec![value; batch * height * width],
        }
    }

    pub fn from_vec(batch: usize, height: usize, width: usize, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), batch * height * width, "fire mask length");
        FireMask {
            batch,
            height,
            width,
            mask,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn element(&self, b: usize) -> &[bool] {
        let n = self.height * self.width;
        &self.mask[b * n..(b + 1) * n]
    }

    /// Clears every cell where `active` is false; `active` is one `[H, W]` plane shared by
    /// all batch elements.
    pub fn restrict(&mut self, active: &[bool]) {
        let n = self.height * self.width;
        assert_eq!(active.len(), n, "active mask size");
        for plane in self.mask.chunks_exact_mut(n) {
            for (m, &a) in plane.iter_mut().zip(active) {
                *m &= a;
            }
        }
    }

    pub fn fired_fraction(&self) -> f64 {
        let fired = self.mask.iter().filter(|&&m| m).count();
        fired as f64 / self.mask.len().max(1) as f64
    }
}
