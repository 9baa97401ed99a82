//! Spectral global communication.
//!
//! The noisy image is moved to frequency space, a second update rule runs on a small
//! low-frequency window of the DC-centred spectrum, and the window is transformed back.
//! Every coefficient of the window touches every output pixel, so one step in the window
//! already spreads information across the whole image.
//!
//! Spectra are stored as real tensors `[B, 2C, H, W]` with the real and imaginary parts of
//! channel `c` in channels `2c` and `2c + 1`, so the same update rule code runs on them.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::nca::{
    check_dim, rollout, rollout_backward, rollout_taped, seed_state, CellRuleParams, RolloutSpec, RolloutTape,
    StateGrid, IMAGE_CHANNELS,
};
use crate::real::Real;
use crate::tensor::Tensor;

enum Kernel<T> {
    Radix2 { twiddles: Vec<Complex<T>> },
    Direct { roots: Vec<Complex<T>> },
}

/// 1-D transform of a fixed length: radix-2 for powers of two, a direct DFT otherwise.
/// Unnormalised in both directions.
pub struct FftPlan<T> {
    n: usize,
    kernel: Kernel<T>,
}

impl<T: Real> FftPlan<T> {
    pub fn new(n: usize) -> Self {
        let root = |k: usize| {
            let a = -2.0 * core::f64::consts::PI * k as f64 / n as f64;
            Complex::new(T::from_f64(libm::cos(a)), T::from_f64(libm::sin(a)))
        };
        let kernel = if n.is_power_of_two() {
            Kernel::Radix2 {
                twiddles: (0..n / 2).map(root).collect(),
            }
        } else {
            Kernel::Direct {
                roots: (0..n).map(root).collect(),
            }
        };
        FftPlan { n, kernel }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place transform; `inverse` uses `e^{+i...}` and does not divide by `n`.
    pub fn process(&self, buf: &mut [Complex<T>], scratch: &mut Vec<Complex<T>>, inverse: bool) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        match &self.kernel {
            Kernel::Radix2 { twiddles } => {
                let bits = n.trailing_zeros();
                if n > 1 {
                    for i in 0..n {
                        let j = i.reverse_bits() >> (usize::BITS - bits);
                        if j > i {
                            buf.swap(i, j);
                        }
                    }
                }
                let mut len = 2;
                while len <= n {
                    let half = len / 2;
                    let stride = n / len;
                    for start in (0..n).step_by(len) {
                        for j in 0..half {
                            let mut w = twiddles[j * stride];
                            if inverse {
                                w = w.conj();
                            }
                            let u = buf[start + j];
                            let v = buf[start + j + half] * w;
                            buf[start + j] = u + v;
                            buf[start + j + half] = u - v;
                        }
                    }
                    len <<= 1;
                }
            }
            Kernel::Direct { roots } => {
                scratch.clear();
                scratch.extend_from_slice(buf);
                for (k, out) in buf.iter_mut().enumerate() {
                    let mut acc = Complex::new(T::zero(), T::zero());
                    for (x, &v) in scratch.iter().enumerate() {
                        let mut w = roots[(k * x) % n];
                        if inverse {
                            w = w.conj();
                        }
                        acc = acc + v * w;
                    }
                    *out = acc;
                }
            }
        }
    }
}

/// Unshifted frequency index for shifted position `p` (DC sits at `n / 2`).
#[inline]
pub fn unshift_index(p: usize, n: usize) -> usize {
    (p + n - n / 2) % n
}

/// 2-D transform of one `[h, w]` plane in natural (unshifted) order.
fn fft2_plane<T: Real>(
    plane: &mut [Complex<T>],
    h: usize,
    w: usize,
    rows: &FftPlan<T>,
    cols: &FftPlan<T>,
    inverse: bool,
) {
    let mut scratch = Vec::new();
    for r in plane.chunks_exact_mut(w) {
        cols.process(r, &mut scratch, inverse);
    }
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = plane[i * w + j];
        }
        rows.process(&mut column, &mut scratch, inverse);
        for i in 0..h {
            plane[i * w + j] = column[i];
        }
    }
}

/// DC-centred spectrum `[B, 2C, H, W]` (interleaved real / imaginary planes).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    pub data: Tensor<T>,
    pub shifted: bool,
}

impl<T: Real> Spectrum<T> {
    pub fn dims(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// Coefficient of channel `c` at shifted position `(r, col)`.
    pub fn coefficient(&self, b: usize, c: usize, r: usize, col: usize) -> Complex<T> {
        let [_, _, h, w] = self.dims();
        let e = self.data.outer(b);
        let i = r * w + col;
        Complex::new(e[2 * c * h * w + i], e[(2 * c + 1) * h * w + i])
    }
}

/// Per-channel 2-D DFT of a `[B, C, H, W]` tensor, DC-centred.
pub fn fft2<T: Real>(input: &Tensor<T>) -> Result<Spectrum<T>> {
    let [b, c, h, w] = input.dims4()?;
    let rows = FftPlan::new(h);
    let cols = FftPlan::new(w);
    let n = h * w;
    let mut out = Tensor::zeros(&[b, 2 * c, h, w]);
    let mut plane = vec![Complex::new(T::zero(), T::zero()); n];
    for bi in 0..b {
        let src = input.outer(bi);
        let dst = out.outer_mut(bi);
        for ch in 0..c {
            let x = &src[ch * n..(ch + 1) * n];
            if x.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for (p, &v) in plane.iter_mut().zip(x) {
                *p = Complex::new(v, T::zero());
            }
            fft2_plane(&mut plane, h, w, &rows, &cols, false);
            for r in 0..h {
                let ur = unshift_index(r, h);
                for col in 0..w {
                    let v = plane[ur * w + unshift_index(col, w)];
                    dst[2 * ch * n + r * w + col] = v.re;
                    dst[(2 * ch + 1) * n + r * w + col] = v.im;
                }
            }
        }
    }
    Ok(Spectrum {
        data: out,
        shifted: true,
    })
}

/// Inverse transform keeping the real part.
///
/// Returns the image `[B, C, H, W]` and the largest absolute imaginary part that was
/// dropped, which is round-off for a conjugate-symmetric spectrum.
pub fn ifft2_real<T: Real>(spec: &Spectrum<T>) -> Result<(Tensor<T>, T)> {
    if !spec.shifted {
        return Err(Error::config("ifft2_real expects a DC-centred spectrum"));
    }
    let [b, c2, h, w] = spec.dims();
    if c2 % 2 != 0 {
        return Err(Error::Dimension {
            axis: "spectrum channels",
            expected: c2 + 1,
            found: c2,
        });
    }
    let c = c2 / 2;
    let rows = FftPlan::new(h);
    let cols = FftPlan::new(w);
    let n = h * w;
    let scale = T::one() / T::from_f64(n as f64);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let mut residue = T::zero();
    let mut plane = vec![Complex::new(T::zero(), T::zero()); n];
    for bi in 0..b {
        let src = spec.data.outer(bi);
        let dst = out.outer_mut(bi);
        for ch in 0..c {
            let re = &src[2 * ch * n..(2 * ch + 1) * n];
            let im = &src[(2 * ch + 1) * n..(2 * ch + 2) * n];
            if re.iter().chain(im).all(|&v| v == T::zero()) {
                continue;
            }
            for r in 0..h {
                let ur = unshift_index(r, h);
                for col in 0..w {
                    let i = r * w + col;
                    plane[ur * w + unshift_index(col, w)] = Complex::new(re[i], im[i]);
                }
            }
            fft2_plane(&mut plane, h, w, &rows, &cols, true);
            for (d, v) in dst[ch * n..(ch + 1) * n].iter_mut().zip(&plane) {
                *d = v.re * scale;
                residue = residue.max((v.im * scale).abs());
            }
        }
    }
    Ok((out, residue))
}

/// Where the window sits in the shifted spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowAnchor {
    /// Block centred on DC: rows `[H/2 - s/2, H/2 + s/2)`.
    #[default]
    Centered,
    /// Block whose top-left corner is DC.
    FromCenter,
}

pub fn window_origin(height: usize, width: usize, size: usize, anchor: WindowAnchor) -> Result<(usize, usize)> {
    if size == 0 || size > height.min(width) {
        return Err(Error::Window {
            what: "size",
            detail: alloc::format!("{size} does not fit a {height}x{width} spectrum"),
        });
    }
    let origin = match anchor {
        WindowAnchor::Centered => (height / 2 - size / 2, width / 2 - size / 2),
        WindowAnchor::FromCenter => (height / 2, width / 2),
    };
    if origin.0 + size > height || origin.1 + size > width {
        return Err(Error::Window {
            what: "size",
            detail: alloc::format!("{size} starting at the centre overflows a {height}x{width} spectrum"),
        });
    }
    Ok(origin)
}

/// Square block of spectrum coefficients `[B, 2C, size, size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierWindow<T> {
    pub data: Tensor<T>,
    pub origin: (usize, usize),
    pub size: usize,
}

pub fn extract_window<T: Real>(spec: &Spectrum<T>, size: usize, anchor: WindowAnchor) -> Result<FourierWindow<T>> {
    let [b, c2, h, w] = spec.dims();
    let origin = window_origin(h, w, size, anchor)?;
    Ok(FourierWindow {
        data: crop(&spec.data, b, c2, h, w, origin, size),
        origin,
        size,
    })
}

fn crop<T: Real>(
    data: &Tensor<T>,
    b: usize,
    c2: usize,
    h: usize,
    w: usize,
    origin: (usize, usize),
    size: usize,
) -> Tensor<T> {
    let mut out = Tensor::zeros(&[b, c2, size, size]);
    for bi in 0..b {
        let src = data.outer(bi);
        let dst = out.outer_mut(bi);
        for ch in 0..c2 {
            for r in 0..size {
                let s0 = ch * h * w + (origin.0 + r) * w + origin.1;
                let d0 = (ch * size + r) * size;
                dst[d0..d0 + size].copy_from_slice(&src[s0..s0 + size]);
            }
        }
    }
    out
}

/// Replaces the window's coefficients in `spec`; everything else is left untouched.
///
/// With `enforce_symmetry`, the conjugate partner `F(-u, -v)` of every written coefficient
/// is set too, so the inverse transform stays real. Pairs that both lie in the window are
/// replaced by their Hermitian average.
pub fn write_window<T: Real>(
    spec: &Spectrum<T>,
    win: &FourierWindow<T>,
    enforce_symmetry: bool,
) -> Result<Spectrum<T>> {
    let [b, c2, h, w] = spec.dims();
    let [wb, wc, ws, ws2] = win.data.dims4()?;
    check_dim("batch", b, wb)?;
    check_dim("spectrum channels", c2, wc)?;
    if ws != win.size || ws2 != win.size {
        return Err(Error::Window {
            what: "size",
            detail: alloc::format!("declared {} but data is {ws}x{ws2}", win.size),
        });
    }
    let centred = window_origin(h, w, win.size, WindowAnchor::Centered).ok();
    let from_centre = window_origin(h, w, win.size, WindowAnchor::FromCenter).ok();
    if Some(win.origin) != centred && Some(win.origin) != from_centre {
        return Err(Error::Window {
            what: "origin",
            detail: alloc::format!(
                "{:?} is not a valid anchor for size {} in {h}x{w}",
                win.origin,
                win.size
            ),
        });
    }
    let mut out = spec.clone();
    let (r0, c0) = win.origin;
    let size = win.size;
    let n = h * w;
    for bi in 0..b {
        let src = win.data.outer(bi);
        let dst = out.data.outer_mut(bi);
        for ch in 0..c2 {
            for r in 0..size {
                let d0 = ch * n + (r0 + r) * w + c0;
                let s0 = (ch * size + r) * size;
                dst[d0..d0 + size].copy_from_slice(&src[s0..s0 + size]);
            }
        }
        if enforce_symmetry {
            let inside = |r: usize, c: usize| (r0..r0 + size).contains(&r) && (c0..c0 + size).contains(&c);
            // Partner of shifted (r, c): unshifted index negated, then shifted back.
            let partner = |p: usize, len: usize| {
                let k = unshift_index(p, len);
                let neg = (len - k) % len;
                (neg + len / 2) % len
            };
            for ch in 0..c2 / 2 {
                let (re, im) = (2 * ch * n, (2 * ch + 1) * n);
                for r in r0..r0 + size {
                    for c in c0..c0 + size {
                        let (pr, pc) = (partner(r, h), partner(c, w));
                        let (i, j) = (r * w + c, pr * w + pc);
                        if inside(pr, pc) {
                            if i < j {
                                let half = T::from_f64(0.5);
                                let a_re = (dst[re + i] + dst[re + j]) * half;
                                let a_im = (dst[im + i] - dst[im + j]) * half;
                                dst[re + i] = a_re;
                                dst[im + i] = a_im;
                                dst[re + j] = a_re;
                                dst[im + j] = -a_im;
                            } else if i == j {
                                dst[im + i] = T::zero();
                            }
                        } else {
                            dst[re + j] = dst[re + i];
                            dst[im + j] = -dst[im + i];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Keeps only the centred `keep x keep` block of each channel's spectrum.
pub fn lowpass_preview<T: Real>(image: &Tensor<T>, keep: usize) -> Result<Tensor<T>> {
    let spec = fft2(image)?;
    let win = extract_window(&spec, keep, WindowAnchor::Centered)?;
    let empty = Spectrum {
        data: Tensor::zeros(spec.data.shape()),
        shifted: true,
    };
    let filtered = write_window(&empty, &win, false)?;
    Ok(ifft2_real(&filtered)?.0)
}

/// Fraction of coefficients a `keep x keep` window retains of an `h x w` spectrum.
pub fn kept_fraction(height: usize, width: usize, keep: usize) -> f64 {
    (keep * keep) as f64 / (height * width) as f64
}

/// Settings of the spectral stage.
#[derive(Debug, Clone)]
pub struct FourierStageSpec<'a> {
    pub window: usize,
    pub anchor: WindowAnchor,
    /// Rollout of the spectral rule; its `stage` should be `Stage::Fourier`.
    pub rollout: RolloutSpec<'a>,
}

/// What the backward pass of the stage needs.
#[derive(Debug, Clone)]
pub struct FourierStageTape<T> {
    rollout: RolloutTape<T>,
    origin: (usize, usize),
    window: usize,
    height: usize,
    width: usize,
}

/// Output of the spectral stage: the initial state for the image-space rule.
#[derive(Debug, Clone)]
pub struct StageOutput<T> {
    pub state: StateGrid<T>,
    /// Largest imaginary residue dropped by the inverse transform.
    pub residue: T,
}

fn stage_prepare<T: Real>(
    noisy_image: &Tensor<T>,
    channels: usize,
    params: &CellRuleParams<T>,
    spec: &FourierStageSpec<'_>,
) -> Result<(Spectrum<T>, FourierWindow<T>)> {
    if params.dims.channels != 2 * channels {
        return Err(Error::Dimension {
            axis: "fourier channels",
            expected: 2 * channels,
            found: params.dims.channels,
        });
    }
    let seed = seed_state(noisy_image, channels)?;
    let spectrum = fft2(seed.tensor())?;
    let window = extract_window(&spectrum, spec.window, spec.anchor)?;
    Ok((spectrum, window))
}

fn stage_finish<T: Real>(
    noisy_image: &Tensor<T>,
    spectrum: &Spectrum<T>,
    window: &FourierWindow<T>,
) -> Result<StageOutput<T>> {
    let merged = write_window(spectrum, window, false)?;
    let (image_space, residue) = ifft2_real(&merged)?;
    let mut state = StateGrid::from_tensor(image_space)?;
    state.write_image(noisy_image)?;
    Ok(StageOutput { state, residue })
}

/// Runs the spectral rule on the low-frequency window of the seeded state and returns the
/// state handed to the image-space rule. Image channels are reset to the exact noisy image.
pub fn fourier_stage<T: Real>(
    noisy_image: &Tensor<T>,
    channels: usize,
    params: &CellRuleParams<T>,
    spec: &FourierStageSpec<'_>,
) -> Result<StageOutput<T>> {
    let (spectrum, window) = stage_prepare(noisy_image, channels, params, spec)?;
    fourier_stage_from_window(noisy_image, &spectrum, window, params, spec)
}

/// Stage evaluation from an explicit (possibly edited) window of `spectrum`.
pub fn fourier_stage_from_window<T: Real>(
    noisy_image: &Tensor<T>,
    spectrum: &Spectrum<T>,
    window: FourierWindow<T>,
    params: &CellRuleParams<T>,
    spec: &FourierStageSpec<'_>,
) -> Result<StageOutput<T>> {
    let evolved = rollout(&StateGrid::from_tensor(window.data)?, params, &spec.rollout)?;
    let window = FourierWindow {
        data: evolved.into_tensor(),
        origin: window.origin,
        size: window.size,
    };
    stage_finish(noisy_image, spectrum, &window)
}

pub fn fourier_stage_taped<T: Real>(
    noisy_image: &Tensor<T>,
    channels: usize,
    params: &CellRuleParams<T>,
    spec: &FourierStageSpec<'_>,
) -> Result<(StageOutput<T>, FourierStageTape<T>)> {
    let (spectrum, window) = stage_prepare(noisy_image, channels, params, spec)?;
    let (evolved, tape) = rollout_taped(&StateGrid::from_tensor(window.data)?, params, &spec.rollout)?;
    let [_, _, h, w] = spectrum.dims();
    let tape = FourierStageTape {
        rollout: tape,
        origin: window.origin,
        window: window.size,
        height: h,
        width: w,
    };
    let window = FourierWindow {
        data: evolved.into_tensor(),
        origin: window.origin,
        size: window.size,
    };
    Ok((stage_finish(noisy_image, &spectrum, &window)?, tape))
}

/// Backpropagates the gradient of the stage output `[B, C, H, W]` into `grads`.
///
/// The output is `Re(IFFT(S))` with `S` holding the evolved window, so the gradient with
/// respect to a coefficient `(re, im)` is `FFT(g) / (H W)` at that coefficient. Image
/// channels are overwritten by the noisy input and pass no gradient.
pub fn fourier_stage_backward<T: Real>(
    params: &CellRuleParams<T>,
    tape: &FourierStageTape<T>,
    d_state: &Tensor<T>,
    grads: &mut CellRuleParams<T>,
) -> Result<()> {
    let [b, c, h, w] = d_state.dims4()?;
    check_dim("height", tape.height, h)?;
    check_dim("width", tape.width, w)?;
    let mut g = d_state.clone();
    let n = h * w;
    for bi in 0..b {
        g.outer_mut(bi)[..IMAGE_CHANNELS * n].fill(T::zero());
    }
    let mut spec = fft2(&g)?;
    let scale = T::one() / T::from_f64(n as f64);
    spec.data.map_inplace(|v| v * scale);
    let d_window = crop(&spec.data, b, 2 * c, h, w, tape.origin, tape.window);
    rollout_backward(params, &tape.rollout, &d_window, grads);
    Ok(())
}

#[cfg(test)]
mod tests;
