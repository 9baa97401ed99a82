//! Procedural datasets for quick experiments.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{domain, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Soft coloured Gaussian blobs over a dark background.
    Blobs,
    /// Left half colour `c`, right half its complement `1 - c` (a negation in `[-1, 1]`).
    BicolorHalves,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub size: usize,
    pub count: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn generate<T: Real>(&self) -> Result<Vec<Tensor<T>>> {
        if self.size < 3 {
            return Err(Error::config("synthetic images must be at least 3x3"));
        }
        Ok((0..self.count)
            .map(|i| synthetic_image(self.kind, self.size, self.seed, i as u64))
            .collect())
    }
}

/// Image `index` of a dataset, `[3, size, size]` in `[-1, 1]`. Independent of the
/// dataset length.
pub fn synthetic_image<T: Real>(kind: SyntheticKind, size: usize, seed: u64, index: u64) -> Tensor<T> {
    let mut rng = stream(seed, &[domain::SYNTHETIC, index]);
    let n = size * size;
    let mut data = Vec::with_capacity(3 * n);
    match kind {
        SyntheticKind::BicolorHalves => {
            let colour: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            for c in colour {
                let left = 2.0 * c - 1.0;
                for _ in 0..size {
                    for col in 0..size {
                        data.push(T::from_f64(if col < size / 2 { left } else { -left }));
                    }
                }
            }
        }
        SyntheticKind::Blobs => {
            let background: [f64; 3] = [0.3 * rng.gen::<f64>(), 0.3 * rng.gen::<f64>(), 0.3 * rng.gen::<f64>()];
            let count = rng.gen_range(3..=6);
            let s = size as f64;
            let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..count)
                .map(|_| {
                    let centre = [rng.gen::<f64>() * s, rng.gen::<f64>() * s];
                    let sigma = rng.gen_range(s / 10.0..s / 4.0).max(0.5);
                    (centre, sigma, [rng.gen(), rng.gen(), rng.gen()])
                })
                .collect();
            let mut rgb = [alloc::vec![0.0f64; n], alloc::vec![0.0f64; n], alloc::vec![0.0f64; n]];
            for r in 0..size {
                for col in 0..size {
                    let mut v = background;
                    for (centre, sigma, colour) in &blobs {
                        let dy = r as f64 + 0.5 - centre[0];
                        let dx = col as f64 + 0.5 - centre[1];
                        let a = libm::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                        for k in 0..3 {
                            v[k] = v[k] * (1.0 - a) + colour[k] * a;
                        }
                    }
                    for k in 0..3 {
                        rgb[k][r * size + col] = 2.0 * v[k] - 1.0;
                    }
                }
            }
            for plane in rgb {
                data.extend(plane.into_iter().map(T::from_f64));
            }
        }
    }
    Tensor::from_vec(&[3, size, size], data).expect("shape matches data")
}
