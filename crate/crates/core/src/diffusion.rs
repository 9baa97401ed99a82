//! DDPM forward process, loss and reverse-chain samplers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conditioning::PositionMode;
use crate::error::{Error, Result, Stage};
use crate::model::{predict_noise, Model, ModelKind, NoiseQuery};
use crate::nca::{Padding, IMAGE_CHANNELS};
use crate::real::Real;
use crate::rng::{domain, normal_tensor, stream};
use crate::tensor::Tensor;

/// Linear β schedule with the derived α and cumulative ᾱ tables, indexed by `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Schedule length of the small CPU preset.
pub const DESK_TIMESTEPS: usize = 50;

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::config("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange { t, max: self.len() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    /// First timestep of a chain that starts from 90% noise.
    pub fn upscale_start(&self) -> usize {
        (self.len() * 9 / 10).max(1)
    }
}

/// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`, elementwise over any shape.
pub fn q_sample<T: Real>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    same_shape(x0, eps)?;
    let mut out = x0.clone();
    q_sample_into(x0.data(), eps.data(), t, schedule, out.data_mut())?;
    Ok(out)
}

pub fn q_sample_into<T: Real>(x0: &[T], eps: &[T], t: usize, schedule: &NoiseSchedule, out: &mut [T]) -> Result<()> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (T::from_f64(libm::sqrt(ab)), T::from_f64(libm::sqrt(1.0 - ab)));
    for ((o, &x), &e) in out.iter_mut().zip(x0).zip(eps) {
        *o = a * x + b * e;
    }
    Ok(())
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            axis: "elements",
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

/// `mean((n_p − n)²) + mean(|n_p − n|)`.
pub fn diffusion_loss<T: Real>(n_p: &Tensor<T>, n: &Tensor<T>) -> Result<f64> {
    Ok(diffusion_loss_grad(n_p, n)?.0)
}

/// Loss and its gradient with respect to `n_p` (`sign(0)` taken as 0).
pub fn diffusion_loss_grad<T: Real>(n_p: &Tensor<T>, n: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    same_shape(n_p, n)?;
    let m = n.len().max(1) as f64;
    let (mut l2, mut l1) = (0.0, 0.0);
    let mut grad = n.clone();
    for ((g, &p), &y) in grad.data_mut().iter_mut().zip(n_p.data()).zip(n.data()) {
        let d = p.as_f64() - y.as_f64();
        l2 += d * d;
        l1 += libm::fabs(d);
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = T::from_f64((2.0 * d + sign) / m);
    }
    Ok((l2 / m + l1 / m, grad))
}

/// One ancestral step `x_t → x_{t−1}` with `σ_t = sqrt(β_t)`; `z` is ignored at `t = 1`.
pub fn ddpm_step<T: Real>(
    x_t: &Tensor<T>,
    n_p: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
    z: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    same_shape(x_t, n_p)?;
    let (beta, alpha, ab) = (schedule.beta(t)?, schedule.alpha(t)?, schedule.alpha_bar(t)?);
    let scale = T::from_f64(1.0 / libm::sqrt(alpha));
    let coef = T::from_f64(beta / libm::sqrt(1.0 - ab));
    let sigma = T::from_f64(libm::sqrt(beta));
    let mut out = x_t.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(n_p.data()) {
        *o = scale * (*o - coef * e);
    }
    if let (Some(z), true) = (z, t > 1) {
        same_shape(x_t, z)?;
        for (o, &zv) in out.data_mut().iter_mut().zip(z.data()) {
            *o += sigma * zv;
        }
    }
    Ok(out)
}

/// Binary `[H, W]` plane: `true` cells are denoised, `false` cells stay frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMask {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl SampleMask {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::Dimension {
                axis: "mask cells",
                expected: height * width,
                found: mask.len(),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        Ok(SampleMask { height, width, mask })
    }

    pub fn all(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    /// Active rectangle `[top, top + rows) x [left, left + cols)`, clipped to the canvas.
    pub fn rect(height: usize, width: usize, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        let mut mask = vec![false; height * width];
        for r in top..(top + rows).min(height) {
            for c in left..(left + cols).min(width) {
                mask[r * width + c] = true;
            }
        }
        Self::new(height, width, mask)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Key prefix separating sampling fire masks from training ones.
pub(crate) const SAMPLING_KEY: u64 = 1;

struct Chain<'a, T> {
    model: &'a Model<T>,
    schedule: &'a NoiseSchedule,
    seed: u64,
    active: Option<&'a [bool]>,
    stochastic: bool,
}

impl<T: Real> Chain<'_, T> {
    /// Runs `t = start..=1` on `x` (`[B, 3, H, W]`), calling `after` once per step.
    fn run(&self, x: &mut Tensor<T>, start: usize, mut after: impl FnMut(&mut Tensor<T>)) -> Result<()> {
        let [b, _, h, w] = x.dims4()?;
        let n = h * w;
        let len = self.schedule.len();
        for t in (1..=start).rev() {
            let ts = vec![t; b];
            let key = [SAMPLING_KEY, t as u64];
            let q = NoiseQuery {
                t: &ts,
                schedule_len: len,
                seed: self.seed,
                key: &key,
                active: self.active,
            };
            let n_p = predict_noise(self.model, x, &q)?;
            let z = (self.stochastic && t > 1)
                .then(|| normal_tensor::<T>(x.shape(), &mut stream(self.seed, &[domain::STEP_NOISE, t as u64])));
            let next = ddpm_step(x, &n_p, t, self.schedule, z.as_ref())?;
            match self.active {
                None => *x = next,
                Some(active) => {
                    for (dst, src) in x.data_mut().chunks_exact_mut(n).zip(next.data().chunks_exact(n)) {
                        for ((d, &s), &a) in dst.iter_mut().zip(src).zip(active) {
                            if a {
                                *d = s;
                            }
                        }
                    }
                }
            }
            after(x);
            if !x.all_finite() {
                return Err(Error::NumericFailure {
                    stage: Stage::Image,
                    step: len - t,
                });
            }
        }
        Ok(())
    }
}

fn check_canvas(height: usize, width: usize) -> Result<()> {
    if height < 3 || width < 3 {
        return Err(Error::config(format!(
            "canvas must be at least 3x3, got {height}x{width}"
        )));
    }
    Ok(())
}

fn clamp_unit<T: Real>(v: &mut T) {
    *v = v.max(-T::one()).min(T::one());
}

fn single<T: Real>(image: Tensor<T>) -> Result<Tensor<T>> {
    let [_, c, h, w] = image.dims4()?;
    let data = image.into_vec();
    Tensor::from_vec(&[c, h, w], data)
}

/// Reverse chain from `x_T ~ N(0, I)` on a `count x 3 x height x width` canvas.
pub fn sample_batch<T: Real>(
    model: &Model<T>,
    count: usize,
    height: usize,
    width: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor<T>> {
    check_canvas(height, width)?;
    let mut x = normal_tensor::<T>(
        &[count, IMAGE_CHANNELS, height, width],
        &mut stream(seed, &[domain::INIT_NOISE]),
    );
    let chain = Chain {
        model,
        schedule,
        seed,
        active: None,
        stochastic: true,
    };
    chain.run(&mut x, schedule.len(), |_| {})?;
    x.map_inplace(|mut v| {
        clamp_unit(&mut v);
        v
    });
    Ok(x)
}

/// One `[3, height, width]` image; the canvas need not match the training size.
pub fn sample<T: Real>(
    model: &Model<T>,
    height: usize,
    width: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor<T>> {
    single(sample_batch(model, 1, height, width, schedule, seed)?)
}

fn image_dims<T: Real>(image: &Tensor<T>) -> Result<[usize; 2]> {
    match image.shape() {
        &[c, h, w] if c == IMAGE_CHANNELS => Ok([h, w]),
        &[c, _, _] => Err(Error::Dimension {
            axis: "channels",
            expected: IMAGE_CHANNELS,
            found: c,
        }),
        s => Err(Error::Dimension {
            axis: "rank",
            expected: 3,
            found: s.len(),
        }),
    }
}

/// Inpainting: cells outside `mask` keep `known` exactly; cells inside start from noise.
pub fn sample_masked<T: Real>(
    model: &Model<T>,
    known: &Tensor<T>,
    mask: &SampleMask,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor<T>> {
    let [h, w] = image_dims(known)?;
    check_canvas(h, w)?;
    if mask.dims() != (h, w) {
        return Err(Error::Dimension {
            axis: "mask cells",
            expected: h * w,
            found: mask.height * mask.width,
        });
    }
    let n = h * w;
    let active = mask.as_slice();
    let mut x = normal_tensor::<T>(&[1, IMAGE_CHANNELS, h, w], &mut stream(seed, &[domain::INIT_NOISE]));
    for (dst, src) in x.data_mut().chunks_exact_mut(n).zip(known.data().chunks_exact(n)) {
        for ((d, &s), &a) in dst.iter_mut().zip(src).zip(active) {
            if !a {
                *d = s;
            }
        }
    }
    let chain = Chain {
        model,
        schedule,
        seed,
        active: Some(active),
        stochastic: true,
    };
    chain.run(&mut x, schedule.len(), |_| {})?;
    for plane in x.data_mut().chunks_exact_mut(n) {
        for (v, &a) in plane.iter_mut().zip(active) {
            if a {
                clamp_unit(v);
            }
        }
    }
    single(x)
}

/// Fraction of the nearest-neighbour estimate blended into new cells after every step.
pub const UPSCALE_BLEND: f64 = 0.02;

/// 2x upscaling: originals at even `(row, col)`, the other three cells of each 2x2 block
/// denoised from `t* = floor(0.9·T)` starting at their nearest-neighbour values.
pub fn upscale<T: Real>(
    model: &Model<T>,
    low_res: &Tensor<T>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor<T>> {
    let [h, w] = image_dims(low_res)?;
    let (hh, ww) = (2 * h, 2 * w);
    check_canvas(hh, ww)?;
    let n = hh * ww;
    let mut nn = Tensor::<T>::zeros(&[1, IMAGE_CHANNELS, hh, ww]);
    let mut active = vec![false; n];
    for c in 0..IMAGE_CHANNELS {
        for r in 0..hh {
            for col in 0..ww {
                nn.data_mut()[c * n + r * ww + col] = low_res.data()[(c * h + r / 2) * w + col / 2];
            }
        }
    }
    for r in 0..hh {
        for col in 0..ww {
            active[r * ww + col] = r % 2 == 1 || col % 2 == 1;
        }
    }
    let start = schedule.upscale_start();
    let eps = normal_tensor::<T>(nn.shape(), &mut stream(seed, &[domain::INIT_NOISE]));
    let noised = q_sample(&nn, start, &eps, schedule)?;
    let mut x = nn.clone();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if active[i % n] {
            *v = noised.data()[i];
        }
    }
    let keep = T::from_f64(1.0 - UPSCALE_BLEND);
    let blend = T::from_f64(UPSCALE_BLEND);
    let chain = Chain {
        model,
        schedule,
        seed,
        active: Some(&active),
        stochastic: true,
    };
    chain.run(&mut x, start, |x| {
        for (i, (v, &p)) in x.data_mut().iter_mut().zip(nn.data()).enumerate() {
            if active[i % n] {
                *v = keep * *v + blend * p;
            }
        }
    })?;
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if active[i % n] {
            clamp_unit(v);
        }
    }
    single(x)
}

/// Overrides for large-canvas synthesis with a Diff-NCA.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileOptions {
    pub positions: PositionMode,
    /// Padding used instead of the trained one; circular removes the canvas border.
    pub padding: Option<Padding>,
    /// Refuse canvases whose estimated working set exceeds this many bytes.
    pub memory_budget: Option<usize>,
}

impl Default for TileOptions {
    fn default() -> Self {
        TileOptions {
            positions: PositionMode::Stretched,
            padding: None,
            memory_budget: None,
        }
    }
}

/// Working set of one reverse-chain step at `height x width` (activations plus the
/// four `[3, H, W]` chain buffers).
pub fn sampling_bytes<T>(model: &Model<T>, height: usize, width: usize) -> usize {
    model.config.inference_bytes(height, width) + 4 * IMAGE_CHANNELS * height * width * core::mem::size_of::<f32>()
}

/// One reverse chain over the whole canvas; locality of the rule means there are no seams.
pub fn sample_tiled<T: Real>(
    model: &Model<T>,
    height: usize,
    width: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    options: TileOptions,
) -> Result<Tensor<T>> {
    if model.config.kind != ModelKind::Diff {
        return Err(Error::Unsupported(
            "tiled synthesis needs a Diff-NCA; the spectral window is tied to the training size".into(),
        ));
    }
    check_canvas(height, width)?;
    let requested = sampling_bytes(model, height, width);
    if let Some(budget) = options.memory_budget {
        if requested > budget {
            return Err(Error::OutOfMemory { requested, budget });
        }
    }
    let mut tuned = model.clone();
    tuned.config.positions = options.positions;
    if let Some(p) = options.padding {
        tuned.config.padding = p;
    }
    sample(&tuned, height, width, schedule, seed)
}
