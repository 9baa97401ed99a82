//! The single-cell update rule and its multi-step rollout.
//!
//! One step, evaluated independently at every cell of a `[B, C, H, W]` state `v` with
//! embedding map `e`:
//!
//! ```text
//! p  = perceive3x3(concat(v, e))
//! z  = concat(p, v, e) * cond0(e)
//! u  = leaky_relu(norm(fc0(z))) * cond1(e)
//! v' = v + fc1(u) * fire
//! ```
//!
//! `norm` normalises the `h` hidden features of each cell (one group) with a learned
//! per-feature scale and shift. Nothing but the 3x3 perception couples neighbouring cells,
//! so after `s` steps a cell has only seen its Chebyshev radius `s` neighbourhood.

use alloc::vec;
use alloc::vec::Vec;

use crate::conditioning::{
    build_embedding_map, cond_scale, validate_enc_dim, ConditioningInputs, EmbeddingCache, PositionMode, N_SCALARS,
};
use crate::error::{Error, Result, Stage};
use crate::layers::{Linear, TwoLayer, TwoLayerCache};
use crate::real::{cast, Real};
use crate::rng::{domain, stream, FireMask, StreamRng};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const NOISE_CHANNELS: usize = 3;
/// First hidden channel; channels `3..6` hold the predicted noise.
pub const HIDDEN_START: usize = IMAGE_CHANNELS + NOISE_CHANNELS;

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Upper bound on cells processed at once by the no-tape forward pass. Large canvases are
/// swept in row bands so scratch memory stays bounded.
const BAND_CELLS: usize = 1 << 14;

/// Border handling of the 3x3 perception.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Mirror without repeating the edge (`[1, 0, 1, 2, ...]`).
    #[default]
    Reflect,
    Zero,
    Circular,
}

impl Padding {
    /// Source index for coordinate `i` (possibly -1 or `n`) on an axis of length `n`.
    #[inline]
    fn source(self, i: isize, n: usize) -> Option<usize> {
        let n_i = n as isize;
        if (0..n_i).contains(&i) {
            return Some(i as usize);
        }
        match self {
            Padding::Zero => None,
            Padding::Circular => Some(i.rem_euclid(n_i) as usize),
            Padding::Reflect => {
                if n == 1 {
                    Some(0)
                } else if i < 0 {
                    Some((-i) as usize)
                } else {
                    Some((2 * (n_i - 1) - i) as usize)
                }
            }
        }
    }
}

/// Layer widths of one branch of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchDims {
    /// State channels `c` (image + noise + hidden for the image branch).
    pub channels: usize,
    /// Hidden width `h` of the per-cell MLP.
    pub hidden: usize,
    /// Channels of the embedding map `e`.
    pub embed_dim: usize,
    /// Sinusoidal features per conditioning scalar.
    pub enc_dim: usize,
    /// Hidden width of the embedding MLP.
    pub embed_hidden: usize,
    /// Hidden width of the two multiplicative conditioning blocks.
    pub cond_hidden: usize,
}

impl BranchDims {
    pub fn perceive_in(&self) -> usize {
        self.channels + self.embed_dim
    }

    pub fn concat_dim(&self) -> usize {
        2 * self.channels + self.embed_dim
    }

    pub fn embed_in(&self) -> usize {
        N_SCALARS * self.enc_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < HIDDEN_START {
            return Err(Error::config(alloc::format!(
                "channel count {} is below the {} image + noise channels",
                self.channels,
                HIDDEN_START
            )));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("embed_hidden", self.embed_hidden),
            ("cond_hidden", self.cond_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(alloc::format!("{name} must be positive")));
            }
        }
        validate_enc_dim(self.enc_dim)
    }
}

/// Learnable tensors of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRuleParams<T> {
    pub dims: BranchDims,
    /// `[c, c + e_dim, 3, 3]`
    pub perceive: Linear<T>,
    /// `[h, concat_dim]`
    pub fc0: Linear<T>,
    /// `[c, h]`
    pub fc1: Linear<T>,
    pub norm_scale: Tensor<T>,
    pub norm_shift: Tensor<T>,
    /// `4 * enc_dim -> embed_hidden -> e_dim`
    pub embed: TwoLayer<T>,
    /// `e_dim -> cond_hidden -> concat_dim`
    pub cond0: TwoLayer<T>,
    /// `e_dim -> cond_hidden -> h`
    pub cond1: TwoLayer<T>,
}

pub const PARAM_NAMES: [&str; 20] = [
    "perceive.weight",
    "perceive.bias",
    "fc0.weight",
    "fc0.bias",
    "fc1.weight",
    "fc1.bias",
    "norm.weight",
    "norm.bias",
    "embed.0.weight",
    "embed.0.bias",
    "embed.2.weight",
    "embed.2.bias",
    "cond0.0.weight",
    "cond0.0.bias",
    "cond0.2.weight",
    "cond0.2.bias",
    "cond1.0.weight",
    "cond1.0.bias",
    "cond1.2.weight",
    "cond1.2.bias",
];

impl<T: Real> CellRuleParams<T> {
    pub fn zeros(dims: BranchDims) -> Self {
        let c = dims.channels;
        CellRuleParams {
            dims,
            perceive: Linear::zeros(&[c, dims.perceive_in(), 3, 3]),
            fc0: Linear::zeros(&[dims.hidden, dims.concat_dim()]),
            fc1: Linear::zeros(&[c, dims.hidden]),
            norm_scale: Tensor::zeros(&[dims.hidden]),
            norm_shift: Tensor::zeros(&[dims.hidden]),
            embed: TwoLayer::zeros(dims.embed_in(), dims.embed_hidden, dims.embed_dim),
            cond0: TwoLayer::zeros(dims.embed_dim, dims.cond_hidden, dims.concat_dim()),
            cond1: TwoLayer::zeros(dims.embed_dim, dims.cond_hidden, dims.hidden),
        }
    }

    /// Uniform `+-1/sqrt(fan_in)` everywhere except the output layer, which starts at zero
    /// so a fresh rule is the identity map; norm affine starts at scale 1, shift 0.
    pub fn init(dims: BranchDims, rng: &mut StreamRng) -> Self {
        let mut p = Self::init_random(dims, rng);
        p.fc1.weight.fill(T::zero());
        p.fc1.bias.fill(T::zero());
        p
    }

    /// Like [`init`](Self::init) but with a random output layer too.
    pub fn init_random(dims: BranchDims, rng: &mut StreamRng) -> Self {
        let c = dims.channels;
        CellRuleParams {
            dims,
            perceive: Linear::uniform(&[c, dims.perceive_in(), 3, 3], rng),
            fc0: Linear::uniform(&[dims.hidden, dims.concat_dim()], rng),
            fc1: Linear::uniform(&[c, dims.hidden], rng),
            norm_scale: Tensor::full(&[dims.hidden], T::one()),
            norm_shift: Tensor::zeros(&[dims.hidden]),
            embed: TwoLayer::uniform(dims.embed_in(), dims.embed_hidden, dims.embed_dim, rng),
            cond0: TwoLayer::uniform(dims.embed_dim, dims.cond_hidden, dims.concat_dim(), rng),
            cond1: TwoLayer::uniform(dims.embed_dim, dims.cond_hidden, dims.hidden, rng),
        }
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor<T>; 20] {
        [
            &self.perceive.weight,
            &self.perceive.bias,
            &self.fc0.weight,
            &self.fc0.bias,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.norm_scale,
            &self.norm_shift,
            &self.embed.first.weight,
            &self.embed.first.bias,
            &self.embed.second.weight,
            &self.embed.second.bias,
            &self.cond0.first.weight,
            &self.cond0.first.bias,
            &self.cond0.second.weight,
            &self.cond0.second.bias,
            &self.cond1.first.weight,
            &self.cond1.first.bias,
            &self.cond1.second.weight,
            &self.cond1.second.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 20] {
        [
            &mut self.perceive.weight,
            &mut self.perceive.bias,
            &mut self.fc0.weight,
            &mut self.fc0.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.norm_scale,
            &mut self.norm_shift,
            &mut self.embed.first.weight,
            &mut self.embed.first.bias,
            &mut self.embed.second.weight,
            &mut self.embed.second.bias,
            &mut self.cond0.first.weight,
            &mut self.cond0.first.bias,
            &mut self.cond0.second.weight,
            &mut self.cond0.second.bias,
            &mut self.cond1.first.weight,
            &mut self.cond1.first.bias,
            &mut self.cond1.second.weight,
            &mut self.cond1.second.bias,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn cast<U: Real>(&self) -> CellRuleParams<U> {
        let mut out = CellRuleParams::<U>::zeros(self.dims);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}

/// Replicated cell state `[B, C, H, W]`: channels `0..3` image, `3..6` predicted noise,
/// the rest hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid<T> {
    tensor: Tensor<T>,
}

impl<T: Real> StateGrid<T> {
    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        let [_, c, _, _] = tensor.dims4()?;
        if c < HIDDEN_START {
            return Err(Error::Dimension {
                axis: "channels",
                expected: HIDDEN_START,
                found: c,
            });
        }
        Ok(StateGrid { tensor })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// Channels `3..6`.
    pub fn read_noise_prediction(&self) -> Tensor<T> {
        self.channel_block(IMAGE_CHANNELS, NOISE_CHANNELS)
    }

    pub fn read_image(&self) -> Tensor<T> {
        self.channel_block(0, IMAGE_CHANNELS)
    }

    pub fn write_noise(&mut self, noise: &Tensor<T>) -> Result<()> {
        self.write_channel_block(IMAGE_CHANNELS, noise)
    }

    pub fn write_image(&mut self, image: &Tensor<T>) -> Result<()> {
        self.write_channel_block(0, image)
    }

    fn channel_block(&self, start: usize, count: usize) -> Tensor<T> {
        let [b, _, h, w] = self.dims();
        let n = h * w;
        let mut out = Tensor::zeros(&[b, count, h, w]);
        for bi in 0..b {
            let src = &self.tensor.outer(bi)[start * n..(start + count) * n];
            out.outer_mut(bi).copy_from_slice(src);
        }
        out
    }

    fn write_channel_block(&mut self, start: usize, block: &Tensor<T>) -> Result<()> {
        let [b, _, h, w] = self.dims();
        let [bb, count, bh, bw] = block.dims4()?;
        check_dim("batch", b, bb)?;
        check_dim("height", h, bh)?;
        check_dim("width", w, bw)?;
        let n = h * w;
        for bi in 0..b {
            self.tensor.outer_mut(bi)[start * n..(start + count) * n].copy_from_slice(block.outer(bi));
        }
        Ok(())
    }
}

pub(crate) fn check_dim(axis: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension { axis, expected, found })
    }
}

/// Initial state: image channels hold the noisy image, every other channel is zero.
pub fn seed_state<T: Real>(noisy_image: &Tensor<T>, channels: usize) -> Result<StateGrid<T>> {
    let [b, c, h, w] = noisy_image.dims4()?;
    check_dim("channels", IMAGE_CHANNELS, c)?;
    if channels < HIDDEN_START {
        return Err(Error::config(alloc::format!(
            "state needs at least {HIDDEN_START} channels, got {channels}"
        )));
    }
    if h < 3 {
        return Err(Error::Dimension {
            axis: "height",
            expected: 3,
            found: h,
        });
    }
    if w < 3 {
        return Err(Error::Dimension {
            axis: "width",
            expected: 3,
            found: w,
        });
    }
    let mut state = StateGrid {
        tensor: Tensor::zeros(&[b, channels, h, w]),
    };
    state.write_image(noisy_image)?;
    Ok(state)
}

/// Activations of one batch element through one step.
#[derive(Debug, Clone, Default)]
struct ElementCache<T> {
    embedding: EmbeddingCache<T>,
    cond0: TwoLayerCache<T>,
    gate0: Vec<T>,
    cond1: TwoLayerCache<T>,
    gate1: Vec<T>,
    cols: Vec<T>,
    z: Vec<T>,
    zc: Vec<T>,
    a_hat: Vec<T>,
    inv_std: Vec<T>,
    y: Vec<T>,
    u: Vec<T>,
    fire: Vec<bool>,
}

/// Saved activations of a rollout, consumed by [`rollout_backward`].
#[derive(Debug, Clone)]
pub struct RolloutTape<T> {
    height: usize,
    width: usize,
    padding: Padding,
    steps: Vec<Vec<ElementCache<T>>>,
}

impl<T> RolloutTape<T> {
    pub fn steps(&self) -> usize {
        self.steps.len()
    }
}

fn im2col<T: Real>(
    v: &[T],
    e: &[T],
    channels: usize,
    embed_dim: usize,
    height: usize,
    width: usize,
    rows: core::ops::Range<usize>,
    padding: Padding,
    cols: &mut [T],
) {
    let n = height * width;
    let nb = rows.len() * width;
    for ci in 0..channels + embed_dim {
        let plane = if ci < channels {
            &v[ci * n..(ci + 1) * n]
        } else {
            &e[(ci - channels) * n..(ci - channels + 1) * n]
        };
        for ky in 0..3 {
            for kx in 0..3 {
                let row_out = &mut cols[(ci * 9 + ky * 3 + kx) * nb..(ci * 9 + ky * 3 + kx + 1) * nb];
                for (bi, i) in rows.clone().enumerate() {
                    let out = &mut row_out[bi * width..(bi + 1) * width];
                    match padding.source(i as isize + ky as isize - 1, height) {
                        None => out.iter_mut().for_each(|x| *x = T::zero()),
                        Some(si) => {
                            let src = &plane[si * width..(si + 1) * width];
                            if kx == 1 {
                                out.copy_from_slice(src);
                            } else {
                                for (j, o) in out.iter_mut().enumerate() {
                                    *o = match padding.source(j as isize + kx as isize - 1, width) {
                                        Some(sj) => src[sj],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] over the full grid: scatters `dcols` into `dx[(c + e_dim), n]`.
fn col2im<T: Real>(dcols: &[T], total_channels: usize, height: usize, width: usize, padding: Padding, dx: &mut [T]) {
    let n = height * width;
    for ci in 0..total_channels {
        let plane = &mut dx[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row_in = &dcols[(ci * 9 + ky * 3 + kx) * n..(ci * 9 + ky * 3 + kx + 1) * n];
                for i in 0..height {
                    let Some(si) = padding.source(i as isize + ky as isize - 1, height) else {
                        continue;
                    };
                    for j in 0..width {
                        if let Some(sj) = padding.source(j as isize + kx as isize - 1, width) {
                            plane[si * width + sj] += row_in[i * width + j];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn leaky<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * cast::<T>(LEAKY_SLOPE)
    }
}

/// Computes the gated residual `fc1(u) * fire` for cells in `rows`, adding it to `out`
/// (which must already hold `v` for those cells). With `cache`, the activations are kept.
#[allow(clippy::too_many_arguments)]
fn element_band<T: Real>(
    params: &CellRuleParams<T>,
    v: &[T],
    e: &[T],
    fire: &[bool],
    height: usize,
    width: usize,
    rows: core::ops::Range<usize>,
    padding: Padding,
    stage: Stage,
    step_index: usize,
    out: &mut [T],
    cache: Option<&mut ElementCache<T>>,
) -> Result<()> {
    let d = params.dims;
    let (c, hd, ed, cd) = (d.channels, d.hidden, d.embed_dim, d.concat_dim());
    let n = height * width;
    let nb = rows.len() * width;
    let cell0 = rows.start * width;

    let band_plane = |src: &[T], channels: usize| -> Vec<T> {
        let mut o = Vec::with_capacity(channels * nb);
        for ch in 0..channels {
            o.extend_from_slice(&src[ch * n + cell0..ch * n + cell0 + nb]);
        }
        o
    };
    let e_band = band_plane(e, ed);

    let mut cols = vec![T::zero(); d.perceive_in() * 9 * nb];
    im2col(v, e, c, ed, height, width, rows.clone(), padding, &mut cols);

    let mut z = vec![T::zero(); cd * nb];
    params.perceive.forward(&cols, nb, &mut z[..c * nb]);
    for ch in 0..c {
        z[(c + ch) * nb..(c + ch + 1) * nb].copy_from_slice(&v[ch * n + cell0..ch * n + cell0 + nb]);
    }
    z[2 * c * nb..].copy_from_slice(&e_band);

    let (gate0, cond0_cache) = cond_scale(&e_band, &params.cond0, nb);
    let zc: Vec<T> = z.iter().zip(&gate0).map(|(&a, &g)| a * g).collect();

    let mut a = vec![T::zero(); hd * nb];
    params.fc0.forward(&zc, nb, &mut a);

    // Per-cell normalisation over the hidden features.
    let mut mean = vec![T::zero(); nb];
    let mut sq = vec![T::zero(); nb];
    for row in a.chunks_exact(nb) {
        for ((m, s), &x) in mean.iter_mut().zip(sq.iter_mut()).zip(row) {
            *m += x;
            *s += x * x;
        }
    }
    let inv_h = T::one() / cast::<T>(hd as f64);
    let eps = cast::<T>(NORM_EPS);
    let mut inv_std = vec![T::zero(); nb];
    for j in 0..nb {
        let m = mean[j] * inv_h;
        let var = (sq[j] * inv_h - m * m).max(T::zero());
        mean[j] = m;
        inv_std[j] = T::one() / (var + eps).sqrt();
    }
    let scale = params.norm_scale.data();
    let shift = params.norm_shift.data();
    let mut a_hat = a;
    let mut y = vec![T::zero(); hd * nb];
    for r in 0..hd {
        let ar = &mut a_hat[r * nb..(r + 1) * nb];
        let yr = &mut y[r * nb..(r + 1) * nb];
        for j in 0..nb {
            ar[j] = (ar[j] - mean[j]) * inv_std[j];
            yr[j] = ar[j] * scale[r] + shift[r];
        }
    }

    let (gate1, cond1_cache) = cond_scale(&e_band, &params.cond1, nb);
    let u: Vec<T> = y.iter().zip(&gate1).map(|(&x, &g)| leaky(x) * g).collect();

    let mut o = vec![T::zero(); c * nb];
    params.fc1.forward(&u, nb, &mut o);
    if !o.iter().all(|x| x.is_finite()) {
        return Err(Error::NumericFailure {
            stage,
            step: step_index,
        });
    }
    let fire_band = &fire[cell0..cell0 + nb];
    for ch in 0..c {
        let dst = &mut out[ch * n + cell0..ch * n + cell0 + nb];
        for ((x, &delta), &f) in dst.iter_mut().zip(&o[ch * nb..(ch + 1) * nb]).zip(fire_band) {
            if f {
                *x += delta;
            }
        }
    }

    if let Some(cache) = cache {
        cache.cond0 = cond0_cache;
        cache.gate0 = gate0;
        cache.cond1 = cond1_cache;
        cache.gate1 = gate1;
        cache.cols = cols;
        cache.z = z;
        cache.zc = zc;
        cache.a_hat = a_hat;
        cache.inv_std = inv_std;
        cache.y = y;
        cache.u = u;
        cache.fire = fire_band.to_vec();
    }
    Ok(())
}

/// One update of batch element `v` (flattened `[C, H*W]`), returning the new state.
#[allow(clippy::too_many_arguments)]
fn element_step<T: Real>(
    params: &CellRuleParams<T>,
    v: &[T],
    e: &[T],
    fire: &[bool],
    height: usize,
    width: usize,
    padding: Padding,
    stage: Stage,
    step_index: usize,
    cache: Option<&mut ElementCache<T>>,
) -> Result<Vec<T>> {
    let mut out = v.to_vec();
    match cache {
        Some(cache) => element_band(
            params,
            v,
            e,
            fire,
            height,
            width,
            0..height,
            padding,
            stage,
            step_index,
            &mut out,
            Some(cache),
        )?,
        None => {
            let band_rows = (BAND_CELLS / width.max(1)).max(1);
            let mut r0 = 0;
            while r0 < height {
                let r1 = (r0 + band_rows).min(height);
                element_band(
                    params,
                    v,
                    e,
                    fire,
                    height,
                    width,
                    r0..r1,
                    padding,
                    stage,
                    step_index,
                    &mut out,
                    None,
                )?;
                r0 = r1;
            }
        }
    }
    Ok(out)
}

fn check_branch<T: Real>(params: &CellRuleParams<T>, state: &StateGrid<T>) -> Result<()> {
    let [_, c, _, _] = state.dims();
    check_dim("channels", params.dims.channels, c)
}

/// Applies one update step with an explicit embedding map `[B, e_dim, H, W]` and fire mask.
pub fn nca_step<T: Real>(
    state: &StateGrid<T>,
    params: &CellRuleParams<T>,
    e: &Tensor<T>,
    fire: &FireMask,
    padding: Padding,
    step_index: usize,
) -> Result<StateGrid<T>> {
    check_branch(params, state)?;
    let [b, _, h, w] = state.dims();
    let [eb, ec, eh, ew] = e.dims4()?;
    check_dim("batch", b, eb)?;
    check_dim("embedding channels", params.dims.embed_dim, ec)?;
    check_dim("height", h, eh)?;
    check_dim("width", w, ew)?;
    let (fb, fh, fw) = fire.dims();
    check_dim("batch", b, fb)?;
    check_dim("height", h, fh)?;
    check_dim("width", w, fw)?;
    let mut out = state.clone();
    for bi in 0..b {
        let next = element_step(
            params,
            state.tensor.outer(bi),
            e.outer(bi),
            fire.element(bi),
            h,
            w,
            padding,
            Stage::Image,
            step_index,
            None,
        )?;
        out.tensor.outer_mut(bi).copy_from_slice(&next);
    }
    Ok(out)
}

/// Everything that parameterises a rollout besides the state and the weights.
#[derive(Debug, Clone)]
pub struct RolloutSpec<'a> {
    pub steps: usize,
    pub fire_rate: f64,
    pub padding: Padding,
    pub stage: Stage,
    pub positions: PositionMode,
    /// Diffusion timestep over schedule length, one per batch element.
    pub t_norm: &'a [f64],
    /// Master seed of the fire-mask streams.
    pub seed: u64,
    /// Stream key prefix; step `k` draws from `(seed, FIRE, key.., k)`.
    pub key: &'a [u64],
    /// `[H, W]` plane of cells allowed to update; others never fire.
    pub active: Option<&'a [bool]>,
}

impl RolloutSpec<'_> {
    pub fn fire_mask(&self, step: usize, batch: usize, height: usize, width: usize) -> FireMask {
        let mut tags = Vec::with_capacity(self.key.len() + 2);
        tags.push(domain::FIRE);
        tags.extend_from_slice(self.key);
        tags.push(step as u64);
        let mut rng = stream(self.seed, &tags);
        let mut mask = FireMask::draw(batch, height, width, self.fire_rate, &mut rng);
        if let Some(active) = self.active {
            mask.restrict(active);
        }
        mask
    }

    fn inputs(&self, b: usize, step: usize) -> ConditioningInputs {
        ConditioningInputs {
            t_norm: self.t_norm[b],
            step_norm: step as f64 / self.steps as f64,
            positions: self.positions,
        }
    }
}

fn rollout_impl<T: Real>(
    state: &StateGrid<T>,
    params: &CellRuleParams<T>,
    spec: &RolloutSpec<'_>,
    mut tape: Option<&mut RolloutTape<T>>,
) -> Result<StateGrid<T>> {
    check_branch(params, state)?;
    if spec.steps == 0 {
        return Err(Error::config("rollout needs at least one step"));
    }
    let [b, _, h, w] = state.dims();
    check_dim("batch", b, spec.t_norm.len())?;
    if let Some(active) = spec.active {
        check_dim("active cells", h * w, active.len())?;
    }
    let mut cur = state.clone();
    for k in 0..spec.steps {
        let fire = spec.fire_mask(k, b, h, w);
        let mut step_caches = Vec::new();
        for bi in 0..b {
            let emb = build_embedding_map(&spec.inputs(bi, k), &params.embed, h, w, params.dims.enc_dim)?;
            let next = match tape.as_deref_mut() {
                Some(_) => {
                    let mut cache = ElementCache::default();
                    let next = element_step(
                        params,
                        cur.tensor.outer(bi),
                        &emb.map,
                        fire.element(bi),
                        h,
                        w,
                        spec.padding,
                        spec.stage,
                        k,
                        Some(&mut cache),
                    )?;
                    cache.embedding = emb;
                    step_caches.push(cache);
                    next
                }
                None => element_step(
                    params,
                    cur.tensor.outer(bi),
                    &emb.map,
                    fire.element(bi),
                    h,
                    w,
                    spec.padding,
                    spec.stage,
                    k,
                    None,
                )?,
            };
            cur.tensor.outer_mut(bi).copy_from_slice(&next);
        }
        if let Some(t) = tape.as_deref_mut() {
            t.steps.push(step_caches);
        }
    }
    Ok(cur)
}

/// `spec.steps` updates with a fresh embedding map and fire mask per step.
pub fn rollout<T: Real>(
    state: &StateGrid<T>,
    params: &CellRuleParams<T>,
    spec: &RolloutSpec<'_>,
) -> Result<StateGrid<T>> {
    rollout_impl(state, params, spec, None)
}

/// [`rollout`] that also records what [`rollout_backward`] needs.
pub fn rollout_taped<T: Real>(
    state: &StateGrid<T>,
    params: &CellRuleParams<T>,
    spec: &RolloutSpec<'_>,
) -> Result<(StateGrid<T>, RolloutTape<T>)> {
    let [_, _, h, w] = state.dims();
    let mut tape = RolloutTape {
        height: h,
        width: w,
        padding: spec.padding,
        steps: Vec::with_capacity(spec.steps),
    };
    let out = rollout_impl(state, params, spec, Some(&mut tape))?;
    Ok((out, tape))
}

fn element_backward<T: Real>(
    params: &CellRuleParams<T>,
    cache: &ElementCache<T>,
    height: usize,
    width: usize,
    padding: Padding,
    d_out: &[T],
    grads: &mut CellRuleParams<T>,
) -> Vec<T> {
    let d = params.dims;
    let (c, hd, ed, cd) = (d.channels, d.hidden, d.embed_dim, d.concat_dim());
    let n = height * width;
    let e = &cache.embedding.map;

    let mut d_in = d_out.to_vec();
    let mut de = vec![T::zero(); ed * n];
    let mut tmp_e = vec![T::zero(); ed * n];

    let mut d_o = d_out.to_vec();
    for ch in 0..c {
        for (x, &f) in d_o[ch * n..(ch + 1) * n].iter_mut().zip(&cache.fire) {
            if !f {
                *x = T::zero();
            }
        }
    }

    let mut du = vec![T::zero(); hd * n];
    params.fc1.backward(&cache.u, &d_o, n, &mut grads.fc1, Some(&mut du));

    let slope = cast::<T>(LEAKY_SLOPE);
    let mut dg1 = vec![T::zero(); hd * n];
    let mut dy = vec![T::zero(); hd * n];
    for i in 0..hd * n {
        let y = cache.y[i];
        dg1[i] = du[i] * leaky(y);
        let dr = du[i] * cache.gate1[i];
        dy[i] = if y > T::zero() { dr } else { dr * slope };
    }
    params
        .cond1
        .backward(e, &cache.cond1, &dg1, n, &mut grads.cond1, Some(&mut tmp_e));
    de.iter_mut().zip(&tmp_e).for_each(|(a, &b)| *a += b);

    let scale = params.norm_scale.data();
    let gscale = grads.norm_scale.data_mut();
    for r in 0..hd {
        let mut acc = T::zero();
        for j in 0..n {
            acc += dy[r * n + j] * cache.a_hat[r * n + j];
        }
        gscale[r] += acc;
    }
    crate::linalg::accumulate_row_sums(grads.norm_shift.data_mut(), &dy, n);

    // d a_hat, then the normalisation adjoint per cell.
    let mut da = dy;
    for r in 0..hd {
        for x in &mut da[r * n..(r + 1) * n] {
            *x *= scale[r];
        }
    }
    let mut m1 = vec![T::zero(); n];
    let mut m2 = vec![T::zero(); n];
    for r in 0..hd {
        for j in 0..n {
            let g = da[r * n + j];
            m1[j] += g;
            m2[j] += g * cache.a_hat[r * n + j];
        }
    }
    let inv_h = T::one() / cast::<T>(hd as f64);
    for j in 0..n {
        m1[j] *= inv_h;
        m2[j] *= inv_h;
    }
    for r in 0..hd {
        for j in 0..n {
            let i = r * n + j;
            da[i] = cache.inv_std[j] * (da[i] - m1[j] - cache.a_hat[i] * m2[j]);
        }
    }

    let mut dzc = vec![T::zero(); cd * n];
    params.fc0.backward(&cache.zc, &da, n, &mut grads.fc0, Some(&mut dzc));

    let mut dg0 = vec![T::zero(); cd * n];
    let mut dz = dzc;
    for i in 0..cd * n {
        dg0[i] = dz[i] * cache.z[i];
        dz[i] *= cache.gate0[i];
    }
    params
        .cond0
        .backward(e, &cache.cond0, &dg0, n, &mut grads.cond0, Some(&mut tmp_e));
    de.iter_mut().zip(&tmp_e).for_each(|(a, &b)| *a += b);

    for (a, &b) in d_in.iter_mut().zip(&dz[c * n..2 * c * n]) {
        *a += b;
    }
    for (a, &b) in de.iter_mut().zip(&dz[2 * c * n..]) {
        *a += b;
    }

    let pin = d.perceive_in();
    let mut dcols = vec![T::zero(); pin * 9 * n];
    params
        .perceive
        .backward(&cache.cols, &dz[..c * n], n, &mut grads.perceive, Some(&mut dcols));
    let mut dx = vec![T::zero(); pin * n];
    col2im(&dcols, pin, height, width, padding, &mut dx);
    for (a, &b) in d_in.iter_mut().zip(&dx[..c * n]) {
        *a += b;
    }
    for (a, &b) in de.iter_mut().zip(&dx[c * n..]) {
        *a += b;
    }

    params.embed.backward(
        &cache.embedding.features,
        &cache.embedding.mlp,
        &de,
        n,
        &mut grads.embed,
        None,
    );
    d_in
}

/// Backpropagates `d_state` (gradient w.r.t. the rollout output) through the recorded
/// steps. Parameter gradients are added to `grads`; the returned tensor is the gradient
/// w.r.t. the rollout input.
pub fn rollout_backward<T: Real>(
    params: &CellRuleParams<T>,
    tape: &RolloutTape<T>,
    d_state: &Tensor<T>,
    grads: &mut CellRuleParams<T>,
) -> Tensor<T> {
    let mut d = d_state.clone();
    for step in tape.steps.iter().rev() {
        for (bi, cache) in step.iter().enumerate() {
            let next = element_backward(params, cache, tape.height, tape.width, tape.padding, d.outer(bi), grads);
            d.outer_mut(bi).copy_from_slice(&next);
        }
    }
    d
}

/// Bytes of scratch the no-tape forward pass touches for a `[batch, c, height, width]`
/// state: two state copies, the embedding map and one row band of activations.
pub fn inference_bytes(dims: &BranchDims, batch: usize, height: usize, width: usize) -> usize {
    let n = height * width;
    let band = n.min(BAND_CELLS.max(width));
    let per_band_cell = dims.perceive_in() * 9
        + 3 * dims.concat_dim()
        + 4 * dims.hidden
        + 2 * dims.cond_hidden
        + dims.channels
        + dims.embed_hidden
        + dims.embed_in();
    let floats = batch * (2 * dims.channels + dims.embed_dim) * n + per_band_cell * band;
    floats * core::mem::size_of::<f32>()
}

#[cfg(test)]
mod tests;
