use super::*;
use crate::conditioning::PositionMode;
use crate::error::Stage;
use crate::nca::{BranchDims, Padding};
use crate::rng::{normal_tensor, stream};

/// O(N^2) DFT of one real plane, natural order.
fn naive_dft(x: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let a = -2.0 * core::f64::consts::PI * ((u * i) as f64 / h as f64 + (v * j) as f64 / w as f64);
                    acc += Complex::new(a.cos(), a.sin()) * x[i * w + j];
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

#[test]
fn constant_image_has_only_dc() {
    let a = 0.75;
    let x = Tensor::full(&[1, 1, 4, 4], a);
    let s = fft2(&x).unwrap();
    for r in 0..4 {
        for c in 0..4 {
            let v = s.coefficient(0, 0, r, c);
            if (r, c) == (2, 2) {
                assert_eq!(v, Complex::new(16.0 * a, 0.0));
            } else {
                assert_eq!(v, Complex::new(0.0, 0.0));
            }
        }
    }
}

#[test]
fn zero_in_zero_out() {
    let s = fft2(&Tensor::<f32>::zeros(&[2, 3, 8, 8])).unwrap();
    assert!(s.data.data().iter().all(|&v| v == 0.0));
    let (img, residue) = ifft2_real(&s).unwrap();
    assert!(img.data().iter().all(|&v| v == 0.0));
    assert_eq!(residue, 0.0);
}

#[test]
fn matches_naive_dft_and_is_conjugate_symmetric() {
    for (h, w) in [(8, 8), (6, 10), (5, 4)] {
        let x = normal_tensor::<f64>(&[1, 1, h, w], &mut stream(1, &[h as u64, w as u64]));
        let s = fft2(&x).unwrap();
        let want = naive_dft(x.data(), h, w);
        for r in 0..h {
            for c in 0..w {
                let (u, v) = (unshift_index(r, h), unshift_index(c, w));
                let got = s.coefficient(0, 0, r, c);
                assert!((got - want[u * w + v]).norm() < 1e-9);
                let mirror = want[((h - u) % h) * w + (w - v) % w];
                assert!((got - mirror.conj()).norm() < 1e-5);
            }
        }
    }
}

#[test]
fn round_trip_and_parseval() {
    for (h, w) in [(16, 16), (12, 20)] {
        let x = normal_tensor::<f32>(&[2, 3, h, w], &mut stream(2, &[]));
        let s = fft2(&x).unwrap();
        let (back, residue) = ifft2_real(&s).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-5);
        assert!(residue < 1e-4);
        let x64 = x.cast::<f64>();
        let s64 = fft2(&x64).unwrap();
        let energy: f64 = x64.data().iter().map(|v| v * v).sum();
        let spectral: f64 = s64.data.data().iter().map(|v| v * v).sum::<f64>() / (h * w) as f64;
        assert!((energy - spectral).abs() / energy < 1e-4);
    }
}

#[test]
fn broken_symmetry_reports_residue() {
    let x = normal_tensor::<f64>(&[1, 1, 8, 8], &mut stream(3, &[]));
    let mut s = fft2(&x).unwrap();
    // Nudge one off-axis coefficient without touching its conjugate partner.
    s.data.data_mut()[64 + 2 * 8 + 5] += 3.0;
    let (img, residue) = ifft2_real(&s).unwrap();
    assert!(residue > 1e-3);
    assert!(img.all_finite());
}

#[test]
fn window_keeps_six_and_a_quarter_percent() {
    let s = fft2(&normal_tensor::<f32>(&[1, 3, 64, 64], &mut stream(4, &[]))).unwrap();
    let win = extract_window(&s, 16, WindowAnchor::Centered).unwrap();
    assert_eq!(win.origin, (24, 24));
    assert_eq!(win.data.shape(), &[1, 6, 16, 16]);
    assert_eq!(kept_fraction(64, 64, 16), 0.0625);
    assert_eq!(256.0 / 4096.0, kept_fraction(64, 64, 16));
}

#[test]
fn full_size_window_is_whole_spectrum() {
    let s = fft2(&normal_tensor::<f32>(&[1, 1, 8, 8], &mut stream(5, &[]))).unwrap();
    let win = extract_window(&s, 8, WindowAnchor::Centered).unwrap();
    assert_eq!(win.origin, (0, 0));
    assert_eq!(win.data, s.data);
}

#[test]
fn oversized_window_rejected() {
    let s = fft2(&Tensor::<f32>::zeros(&[1, 1, 8, 8])).unwrap();
    assert!(matches!(
        extract_window(&s, 9, WindowAnchor::Centered),
        Err(Error::Window { .. })
    ));
    assert!(extract_window(&s, 5, WindowAnchor::FromCenter).is_err());
    assert_eq!(extract_window(&s, 4, WindowAnchor::FromCenter).unwrap().origin, (4, 4));
}

#[test]
fn write_of_extract_is_identity() {
    let s = fft2(&normal_tensor::<f32>(&[2, 3, 16, 16], &mut stream(6, &[]))).unwrap();
    for anchor in [WindowAnchor::Centered, WindowAnchor::FromCenter] {
        let win = extract_window(&s, 8, anchor).unwrap();
        assert_eq!(write_window(&s, &win, false).unwrap(), s);
    }
}

#[test]
fn write_leaves_other_coefficients_bit_identical() {
    let s = fft2(&normal_tensor::<f32>(&[1, 2, 16, 16], &mut stream(7, &[]))).unwrap();
    let mut win = extract_window(&s, 6, WindowAnchor::Centered).unwrap();
    win.data = normal_tensor(win.data.shape(), &mut stream(8, &[]));
    let out = write_window(&s, &win, false).unwrap();
    let (r0, c0) = win.origin;
    for ch in 0..4 {
        for r in 0..16 {
            for c in 0..16 {
                let i = ch * 256 + r * 16 + c;
                let inside = (r0..r0 + 6).contains(&r) && (c0..c0 + 6).contains(&c);
                if inside {
                    assert_eq!(out.data.data()[i], win.data.data()[(ch * 6 + r - r0) * 6 + c - c0]);
                } else {
                    assert_eq!(out.data.data()[i].to_bits(), s.data.data()[i].to_bits());
                }
            }
        }
    }
}

#[test]
fn write_rejects_bad_origin() {
    let s = fft2(&Tensor::<f32>::zeros(&[1, 1, 16, 16])).unwrap();
    let mut win = extract_window(&s, 4, WindowAnchor::Centered).unwrap();
    win.origin = (1, 1);
    assert!(matches!(
        write_window(&s, &win, false),
        Err(Error::Window { what: "origin", .. })
    ));
}

#[test]
fn zeroed_window_removes_dc() {
    let x = Tensor::full(&[1, 1, 8, 8], 0.4f64);
    let s = fft2(&x).unwrap();
    let mut win = extract_window(&s, 4, WindowAnchor::Centered).unwrap();
    win.data.fill(0.0);
    let (img, _) = ifft2_real(&write_window(&s, &win, false).unwrap()).unwrap();
    assert!(img.data().iter().all(|&v| v.abs() < 1e-15));
}

#[test]
fn symmetry_enforcement_keeps_inverse_real() {
    let s = fft2(&normal_tensor::<f64>(&[1, 2, 16, 16], &mut stream(9, &[]))).unwrap();
    for anchor in [WindowAnchor::Centered, WindowAnchor::FromCenter] {
        let mut win = extract_window(&s, 8, anchor).unwrap();
        win.data = normal_tensor(win.data.shape(), &mut stream(10, &[]));
        let (_, loose) = ifft2_real(&write_window(&s, &win, false).unwrap()).unwrap();
        let (_, strict) = ifft2_real(&write_window(&s, &win, true).unwrap()).unwrap();
        assert!(loose > 1e-3);
        assert!(strict < 1e-12, "{anchor:?}: residue {strict}");
    }
}

#[test]
fn lowpass_constant_image_survives() {
    let x = Tensor::full(&[1, 3, 16, 16], -0.3f32);
    let y = lowpass_preview(&x, 4).unwrap();
    assert!(y.max_abs_diff(&x) < 1e-6);
}

#[test]
fn lowpass_full_window_is_identity() {
    let x = normal_tensor::<f32>(&[1, 3, 16, 16], &mut stream(11, &[]));
    assert!(lowpass_preview(&x, 16).unwrap().max_abs_diff(&x) <= 1e-5);
}

#[test]
fn lowpass_removes_nyquist_checkerboard() {
    // (-1)^(i+j) puts all energy at frequency (32, 32): the corner of the shifted layout.
    let mut x = Tensor::<f64>::zeros(&[1, 3, 64, 64]);
    for ch in 0..3 {
        for i in 0..64 {
            for j in 0..64 {
                x.data_mut()[ch * 4096 + i * 64 + j] = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
    }
    let s = fft2(&x).unwrap();
    assert!((s.coefficient(0, 0, 0, 0).re - 4096.0).abs() < 1e-9);
    let y = lowpass_preview(&x, 16).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1e-12));
}

fn stage_dims(channels: usize) -> BranchDims {
    BranchDims {
        channels: 2 * channels,
        hidden: 12,
        embed_dim: 4,
        enc_dim: 4,
        embed_hidden: 8,
        cond_hidden: 6,
    }
}

fn stage_spec<'a>(steps: usize, window: usize, t: &'a [f64]) -> FourierStageSpec<'a> {
    FourierStageSpec {
        window,
        anchor: WindowAnchor::Centered,
        rollout: RolloutSpec {
            steps,
            fire_rate: 1.0,
            padding: Padding::Zero,
            stage: Stage::Fourier,
            positions: PositionMode::Stretched,
            t_norm: t,
            seed: 3,
            key: &[1],
            active: None,
        },
    }
}

#[test]
fn identity_rule_reduces_to_plain_seeding() {
    let mut params = CellRuleParams::<f32>::init_random(stage_dims(8), &mut stream(12, &[]));
    params.fc1.weight.fill(0.0);
    params.fc1.bias.fill(0.0);
    let x = normal_tensor::<f32>(&[2, 3, 16, 16], &mut stream(13, &[]));
    let out = fourier_stage(&x, 8, &params, &stage_spec(3, 8, &[0.2, 0.9])).unwrap();
    let seeded = seed_state(&x, 8).unwrap();
    assert_eq!(out.state.read_image(), x);
    let n = 256;
    for b in 0..2 {
        let hidden = &out.state.tensor().outer(b)[3 * n..];
        assert!(hidden.iter().all(|&v| v == 0.0));
        assert_eq!(&seeded.tensor().outer(b)[3 * n..], hidden);
    }
}

#[test]
fn one_window_coefficient_reaches_every_pixel() {
    let params = CellRuleParams::<f64>::init_random(stage_dims(8), &mut stream(14, &[]));
    let x = normal_tensor::<f64>(&[1, 3, 16, 16], &mut stream(15, &[]));
    let spec = stage_spec(1, 8, &[0.5]);
    let seed = seed_state(&x, 8).unwrap();
    let spectrum = fft2(seed.tensor()).unwrap();
    let win = extract_window(&spectrum, 8, WindowAnchor::Centered).unwrap();
    let mut bumped = win.clone();
    bumped.data.data_mut()[3 * 8 + 5] += 1.0;
    let a = fourier_stage_from_window(&x, &spectrum, win, &params, &spec).unwrap();
    let b = fourier_stage_from_window(&x, &spectrum, bumped, &params, &spec).unwrap();
    let n = 256;
    let changed = (0..n)
        .filter(|&cell| {
            (3..8).any(|ch| a.state.tensor().data()[ch * n + cell] != b.state.tensor().data()[ch * n + cell])
        })
        .count();
    assert_eq!(changed, n);
}

#[test]
fn stage_rejects_wrong_branch_width() {
    let params = CellRuleParams::<f32>::init_random(stage_dims(6), &mut stream(16, &[]));
    let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
    assert!(matches!(
        fourier_stage(&x, 8, &params, &stage_spec(1, 4, &[0.0])),
        Err(Error::Dimension {
            axis: "fourier channels",
            ..
        })
    ));
}

#[test]
fn stage_gradients_match_finite_differences() {
    let params = CellRuleParams::<f64>::init_random(stage_dims(6), &mut stream(17, &[]));
    let x = normal_tensor::<f64>(&[2, 3, 8, 8], &mut stream(18, &[]));
    let weights = normal_tensor::<f64>(&[2, 6, 8, 8], &mut stream(19, &[]));
    let t = [0.25, 0.75];
    let spec = stage_spec(2, 4, &t);
    let loss = |p: &CellRuleParams<f64>| -> f64 {
        let out = fourier_stage(&x, 6, p, &spec).unwrap();
        out.state
            .tensor()
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let (_, tape) = fourier_stage_taped(&x, 6, &params, &spec).unwrap();
    let mut grads = params.zeros_like();
    fourier_stage_backward(&params, &tape, &weights, &mut grads).unwrap();
    let h = 1e-5;
    for ti in 0..20 {
        let analytic = grads.tensors()[ti].data().to_vec();
        let n = analytic.len();
        for k in [0, n / 2, n - 1] {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data_mut()[k] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data_mut()[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let scale = fd.abs().max(analytic[k].abs()).max(1e-6);
            assert!(
                (fd - analytic[k]).abs() / scale < 1e-4,
                "tensor {ti}[{k}]: analytic {} vs fd {fd}",
                analytic[k]
            );
        }
    }
}
