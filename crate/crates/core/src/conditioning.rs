//! Per-cell conditioning: sinusoidal features of position, diffusion time and NCA step,
//! mapped by a small MLP to the embedding map `e`, plus the multiplicative blocks that turn
//! `e` into per-cell scale factors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{TwoLayer, TwoLayerCache};
use crate::real::Real;

/// Number of scalars fed to the encoder: x, y, diffusion time, NCA step.
pub const N_SCALARS: usize = 4;

/// How cell coordinates enter the conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionMode {
    /// Coordinates mapped linearly to `[-1, 1]` over the current grid, so larger canvases
    /// stretch the field.
    #[default]
    Stretched,
    /// Coordinates fixed at 0; the embedding map is spatially constant.
    Disabled,
}

pub fn validate_enc_dim(enc_dim: usize) -> Result<()> {
    if enc_dim == 1 || (enc_dim >= 2 && enc_dim.is_multiple_of(2)) {
        Ok(())
    } else {
        Err(Error::config(alloc::format!(
            "enc_dim must be 1 or an even number >= 2, got {enc_dim}"
        )))
    }
}

/// Writes `[sin(v w_0), cos(v w_0), sin(v w_1), ...]` with `w_k = 10000^(-2k/enc_dim)`.
///
/// `enc_dim == 1` passes the raw value through; this is the four-scalar, four-wide input of
/// the compact Diff-NCA configuration.
pub fn sinusoidal_encode_into<T: Real>(value: f64, enc_dim: usize, out: &mut [T]) -> Result<()> {
    validate_enc_dim(enc_dim)?;
    if enc_dim == 1 {
        out[0] = T::from_f64(value);
        return Ok(());
    }
    let half = enc_dim / 2;
    for k in 0..half {
        let w = libm::pow(10000.0, -2.0 * k as f64 / enc_dim as f64);
        out[2 * k] = T::from_f64(libm::sin(value * w));
        out[2 * k + 1] = T::from_f64(libm::cos(value * w));
    }
    Ok(())
}

pub fn sinusoidal_encode(value: f64, enc_dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; enc_dim.max(1)];
    sinusoidal_encode_into(value, enc_dim, &mut out)?;
    Ok(out)
}

/// Linear map of index `i` on an axis of length `n` to `[-1, 1]`.
pub fn normalized_coordinate(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Scalars for one batch element at one NCA step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditioningInputs {
    /// Diffusion timestep divided by the schedule length, in `[0, 1]`.
    pub t_norm: f64,
    /// NCA step index divided by the step count, in `[0, 1]`.
    pub step_norm: f64,
    pub positions: PositionMode,
}

/// Encoded features `[N_SCALARS * enc_dim, height * width]` for one batch element.
pub fn encode_grid<T: Real>(
    inputs: &ConditioningInputs,
    height: usize,
    width: usize,
    enc_dim: usize,
) -> Result<Vec<T>> {
    validate_enc_dim(enc_dim)?;
    let n = height * width;
    let mut out = vec![T::zero(); N_SCALARS * enc_dim * n];
    let mut buf = vec![T::zero(); enc_dim];
    let put = |slot: usize, cell: usize, buf: &[T], out: &mut [T]| {
        for (k, &v) in buf.iter().enumerate() {
            out[(slot * enc_dim + k) * n + cell] = v;
        }
    };
    let mut t_buf = vec![T::zero(); enc_dim];
    let mut s_buf = vec![T::zero(); enc_dim];
    sinusoidal_encode_into(inputs.t_norm, enc_dim, &mut t_buf)?;
    sinusoidal_encode_into(inputs.step_norm, enc_dim, &mut s_buf)?;
    let mut x_cache: Vec<Vec<T>> = Vec::with_capacity(width);
    for j in 0..width {
        let x = match inputs.positions {
            PositionMode::Stretched => normalized_coordinate(j, width),
            PositionMode::Disabled => 0.0,
        };
        sinusoidal_encode_into(x, enc_dim, &mut buf)?;
        x_cache.push(buf.clone());
    }
    for i in 0..height {
        let y = match inputs.positions {
            PositionMode::Stretched => normalized_coordinate(i, height),
            PositionMode::Disabled => 0.0,
        };
        let mut y_buf = vec![T::zero(); enc_dim];
        sinusoidal_encode_into(y, enc_dim, &mut y_buf)?;
        for (j, x_enc) in x_cache.iter().enumerate() {
            let cell = i * width + j;
            put(0, cell, x_enc, &mut out);
            put(1, cell, &y_buf, &mut out);
            put(2, cell, &t_buf, &mut out);
            put(3, cell, &s_buf, &mut out);
        }
    }
    Ok(out)
}

/// Embedding map `e` for one batch element, with the activations needed to backpropagate
/// into the MLP.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingCache<T> {
    pub features: Vec<T>,
    pub mlp: TwoLayerCache<T>,
    pub map: Vec<T>,
}

/// Runs the embedding MLP at every cell: `[e_dim, height * width]`.
pub fn build_embedding_map<T: Real>(
    inputs: &ConditioningInputs,
    mlp: &TwoLayer<T>,
    height: usize,
    width: usize,
    enc_dim: usize,
) -> Result<EmbeddingCache<T>> {
    let n = height * width;
    let features = encode_grid::<T>(inputs, height, width, enc_dim)?;
    if features.len() != mlp.first.in_features() * n {
        return Err(Error::Dimension {
            axis: "embedding input",
            expected: mlp.first.in_features(),
            found: features.len() / n.max(1),
        });
    }
    let mut map = vec![T::zero(); mlp.output() * n];
    let cache = mlp.forward(&features, n, &mut map);
    Ok(EmbeddingCache {
        features,
        mlp: cache,
        map,
    })
}

/// Multiplier `second(silu(first(e)))` of a conditioning block: `[block.output(), n]`.
pub fn cond_scale<T: Real>(e: &[T], block: &TwoLayer<T>, n: usize) -> (Vec<T>, TwoLayerCache<T>) {
    let mut out = vec![T::zero(); block.output() * n];
    let cache = block.forward(e, n, &mut out);
    (out, cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn encode_zero() {
        assert_eq!(sinusoidal_encode(0.0, 4).unwrap(), [0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_half_pi() {
        let v = sinusoidal_encode(core::f64::consts::FRAC_PI_2, 2).unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1].abs() < 1e-16);
    }

    #[test]
    fn odd_enc_dim_rejected() {
        assert!(matches!(sinusoidal_encode(0.3, 3), Err(Error::Config(_))));
        assert!(sinusoidal_encode(0.3, 0).is_err());
    }

    #[test]
    fn zero_mlp_gives_constant_bias_map() {
        let mut mlp = TwoLayer::<f64>::zeros(16, 256, 4);
        mlp.second.bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 3.0]);
        let inputs = ConditioningInputs {
            t_norm: 0.3,
            step_norm: 0.1,
            positions: PositionMode::Stretched,
        };
        let e = build_embedding_map(&inputs, &mlp, 3, 5, 4).unwrap();
        for (c, row) in e.map.chunks(15).enumerate() {
            assert!(row.iter().all(|&v| v == [0.5, -1.0, 2.0, 3.0][c]));
        }
    }

    #[test]
    fn disabled_positions_make_constant_map() {
        let mlp = TwoLayer::<f64>::uniform(16, 32, 4, &mut stream(1, &[]));
        let inputs = ConditioningInputs {
            t_norm: 0.7,
            step_norm: 0.25,
            positions: PositionMode::Disabled,
        };
        let e = build_embedding_map(&inputs, &mlp, 4, 6, 4).unwrap();
        for row in e.map.chunks(24) {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn conditioning_block_with_unit_bias_is_identity_scale() {
        let mut block = TwoLayer::<f32>::uniform(4, 128, 388, &mut stream(2, &[]));
        block.second.weight.fill(0.0);
        block.second.bias.fill(1.0);
        let e: Vec<f32> = (0..4 * 9).map(|i| i as f32 * 0.1 - 1.0).collect();
        let (scale, _) = cond_scale(&e, &block, 9);
        assert_eq!(scale.len(), 388 * 9);
        assert!(scale.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn coordinates_span_unit_interval() {
        assert_eq!(normalized_coordinate(0, 5), -1.0);
        assert_eq!(normalized_coordinate(4, 5), 1.0);
        assert_eq!(normalized_coordinate(2, 5), 0.0);
        assert_eq!(normalized_coordinate(0, 1), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn encodings_bounded(v in -1.0e3f64..1.0e3, half in 1usize..8) {
            for x in sinusoidal_encode(v, 2 * half).unwrap() {
                proptest::prop_assert!((-1.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn cell_embedding_ignores_other_cells(h in 2usize..6, w in 2usize..6, t in 0.0f64..1.0) {
            // Same (x, y, t, step) at a cell gives the same e whatever the rest of the grid is:
            // a grid and its top-left sub-grid agree wherever their coordinates agree.
            let mlp = TwoLayer::<f64>::uniform(16, 8, 4, &mut stream(3, &[]));
            let inputs = ConditioningInputs { t_norm: t, step_norm: 0.5, positions: PositionMode::Stretched };
            let a = build_embedding_map(&inputs, &mlp, h, w, 4).unwrap();
            let b = build_embedding_map(&inputs, &mlp, h, w, 4).unwrap();
            proptest::prop_assert_eq!(a.map, b.map);
        }
    }
}
