use super::*;
use crate::conditioning::{build_embedding_map, ConditioningInputs, PositionMode};
use crate::layers::Linear;
use crate::rng::{normal_tensor, stream};

fn tiny_dims() -> BranchDims {
    BranchDims {
        channels: 8,
        hidden: 16,
        embed_dim: 4,
        enc_dim: 4,
        embed_hidden: 12,
        cond_hidden: 6,
    }
}

fn random_state(b: usize, c: usize, h: usize, w: usize, seed: u64) -> StateGrid<f64> {
    StateGrid::from_tensor(normal_tensor(&[b, c, h, w], &mut stream(seed, &[99]))).unwrap()
}

fn embedding(params: &CellRuleParams<f64>, b: usize, h: usize, w: usize, t: f64) -> Tensor<f64> {
    let mut e = Tensor::zeros(&[b, params.dims.embed_dim, h, w]);
    for bi in 0..b {
        let inputs = ConditioningInputs {
            t_norm: t + 0.1 * bi as f64,
            step_norm: 0.0,
            positions: PositionMode::Stretched,
        };
        let map = build_embedding_map(&inputs, &params.embed, h, w, params.dims.enc_dim).unwrap();
        e.outer_mut(bi).copy_from_slice(&map.map);
    }
    e
}

#[test]
fn seed_zero_input() {
    let s = seed_state(&Tensor::<f32>::zeros(&[1, 3, 4, 4]), 8).unwrap();
    assert_eq!(s.dims(), [1, 8, 4, 4]);
    assert!(s.tensor().data().iter().all(|&x| x == 0.0));
}

#[test]
fn seed_places_image_and_zeros_rest() {
    let x = normal_tensor::<f32>(&[2, 3, 5, 6], &mut stream(1, &[]));
    let s = seed_state(&x, 96).unwrap();
    assert_eq!(s.read_image(), x);
    for b in 0..2 {
        assert!(s.tensor().outer(b)[3 * 30..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn seed_rejects_bad_shapes() {
    let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
    assert!(matches!(seed_state(&x, 5), Err(Error::Config(_))));
    let small = Tensor::<f32>::zeros(&[1, 3, 2, 4]);
    assert!(matches!(
        seed_state(&small, 8),
        Err(Error::Dimension { axis: "height", .. })
    ));
    let gray = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
    assert!(matches!(
        seed_state(&gray, 8),
        Err(Error::Dimension { axis: "channels", .. })
    ));
}

#[test]
fn noise_readout() {
    let x = normal_tensor::<f32>(&[1, 3, 4, 4], &mut stream(2, &[]));
    let mut s = seed_state(&x, 8).unwrap();
    assert!(s.read_noise_prediction().data().iter().all(|&v| v == 0.0));
    let ones = Tensor::full(&[1, 3, 4, 4], 1.0f32);
    s.write_noise(&ones).unwrap();
    assert_eq!(s.read_noise_prediction(), ones);
    let n = normal_tensor::<f32>(&[1, 3, 4, 4], &mut stream(3, &[]));
    s.write_noise(&n).unwrap();
    assert_eq!(s.read_noise_prediction(), n);
    assert_eq!(s.read_image(), x);
}

#[test]
fn pointwise_parameter_count() {
    assert_eq!(Linear::<f32>::zeros(&[2, 3]).parameter_count(), 8);
}

#[test]
fn default_widths() {
    let dims = BranchDims {
        channels: 96,
        hidden: 512,
        embed_dim: 4,
        enc_dim: 4,
        embed_hidden: 256,
        cond_hidden: 128,
    };
    let p = CellRuleParams::<f32>::zeros(dims);
    assert_eq!(p.perceive.weight.shape(), &[96, 100, 3, 3]);
    assert_eq!(p.fc0.in_features(), 196);
    assert_eq!(p.cond0.output(), 196);
    assert_eq!(p.cond1.output(), 512);
    assert_eq!(p.embed.first.in_features(), 16);
    let four = BranchDims { channels: 192, ..dims };
    let p = CellRuleParams::<f32>::zeros(four);
    assert_eq!(p.perceive.weight.shape(), &[192, 196, 3, 3]);
    assert_eq!(p.fc0.in_features(), 388);
}

#[test]
fn zero_output_layer_is_identity() {
    let mut params = CellRuleParams::<f64>::init_random(tiny_dims(), &mut stream(4, &[]));
    params.fc1.weight.fill(0.0);
    params.fc1.bias.fill(0.0);
    let s = random_state(2, 8, 5, 4, 5);
    let e = embedding(&params, 2, 5, 4, 0.3);
    let fire = FireMask::all(2, 5, 4, true);
    let out = nca_step(&s, &params, &e, &fire, Padding::Reflect, 0).unwrap();
    assert_eq!(out, s);
}

#[test]
fn no_fire_is_identity() {
    let params = CellRuleParams::<f64>::init_random(tiny_dims(), &mut stream(6, &[]));
    let s = random_state(1, 8, 4, 4, 7);
    let e = embedding(&params, 1, 4, 4, 0.5);
    let out = nca_step(&s, &params, &e, &FireMask::all(1, 4, 4, false), Padding::Zero, 0).unwrap();
    assert_eq!(out, s);
}

#[test]
fn unfired_cells_untouched() {
    let params = CellRuleParams::<f64>::init_random(tiny_dims(), &mut stream(8, &[]));
    let s = random_state(1, 8, 4, 4, 9);
    let e = embedding(&params, 1, 4, 4, 0.5);
    let fire = FireMask::draw(1, 4, 4, 0.5, &mut stream(10, &[]));
    let out = nca_step(&s, &params, &e, &fire, Padding::Reflect, 0).unwrap();
    for (cell, &f) in fire.as_slice().iter().enumerate() {
        for ch in 0..8 {
            let i = ch * 16 + cell;
            if f {
                assert_ne!(out.tensor().data()[i], s.tensor().data()[i]);
            } else {
                assert_eq!(out.tensor().data()[i].to_bits(), s.tensor().data()[i].to_bits());
            }
        }
    }
}

/// Straight-line evaluation of one update at one cell, written independently of the
/// batched kernel: explicit loops, no im2col, no matrix products.
fn reference_step(
    p: &CellRuleParams<f64>,
    v: &[f64],
    e: &[f64],
    fire: &[bool],
    h: usize,
    w: usize,
    padding: Padding,
) -> Vec<f64> {
    let d = p.dims;
    let (c, ed, hd) = (d.channels, d.embed_dim, d.hidden);
    let n = h * w;
    let fetch = |ch: usize, i: isize, j: isize| -> f64 {
        let wrap = |k: isize, len: usize| -> Option<usize> {
            let l = len as isize;
            if k >= 0 && k < l {
                return Some(k as usize);
            }
            match padding {
                Padding::Zero => None,
                Padding::Circular => Some(((k % l + l) % l) as usize),
                Padding::Reflect => Some(if k < 0 { (-k) as usize } else { (2 * l - 2 - k) as usize }),
            }
        };
        match (wrap(i, h), wrap(j, w)) {
            (Some(a), Some(b)) => {
                if ch < c {
                    v[ch * n + a * w + b]
                } else {
                    e[(ch - c) * n + a * w + b]
                }
            }
            _ => 0.0,
        }
    };
    let silu = |x: f64| x / (1.0 + (-x).exp());
    let two_layer = |blk: &TwoLayer<f64>, x: &[f64]| -> Vec<f64> {
        let hid: Vec<f64> = (0..blk.first.out_features())
            .map(|r| {
                let wts = &blk.first.weight.data()[r * x.len()..(r + 1) * x.len()];
                silu(blk.first.bias.data()[r] + wts.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect();
        (0..blk.second.out_features())
            .map(|r| {
                let wts = &blk.second.weight.data()[r * hid.len()..(r + 1) * hid.len()];
                blk.second.bias.data()[r] + wts.iter().zip(&hid).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    let mut out = v.to_vec();
    for i in 0..h {
        for j in 0..w {
            let cell = i * w + j;
            let ev: Vec<f64> = (0..ed).map(|k| e[k * n + cell]).collect();
            let mut z = Vec::new();
            for o in 0..c {
                let mut acc = p.perceive.bias.data()[o];
                for ci in 0..c + ed {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wt = p.perceive.weight.data()[((o * (c + ed) + ci) * 3 + ky) * 3 + kx];
                            acc += wt * fetch(ci, i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                        }
                    }
                }
                z.push(acc);
            }
            for ch in 0..c {
                z.push(v[ch * n + cell]);
            }
            z.extend_from_slice(&ev);
            let g0 = two_layer(&p.cond0, &ev);
            let zc: Vec<f64> = z.iter().zip(&g0).map(|(a, b)| a * b).collect();
            let a: Vec<f64> = (0..hd)
                .map(|r| {
                    let wts = &p.fc0.weight.data()[r * zc.len()..(r + 1) * zc.len()];
                    p.fc0.bias.data()[r] + wts.iter().zip(&zc).map(|(x, y)| x * y).sum::<f64>()
                })
                .collect();
            let mean = a.iter().sum::<f64>() / hd as f64;
            let var = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / hd as f64;
            let g1 = two_layer(&p.cond1, &ev);
            let u: Vec<f64> = (0..hd)
                .map(|r| {
                    let y = (a[r] - mean) / (var + 1e-5).sqrt() * p.norm_scale.data()[r] + p.norm_shift.data()[r];
                    let act = if y > 0.0 { y } else { 0.01 * y };
                    act * g1[r]
                })
                .collect();
            if fire[cell] {
                for o in 0..c {
                    let wts = &p.fc1.weight.data()[o * hd..(o + 1) * hd];
                    out[o * n + cell] += p.fc1.bias.data()[o] + wts.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
    }
    out
}

#[test]
fn step_matches_straight_line_reference() {
    let params = CellRuleParams::<f64>::init_random(tiny_dims(), &mut stream(7, &[]));
    let s = random_state(1, 8, 4, 4, 7);
    let e = embedding(&params, 1, 4, 4, 0.25);
    let fire = FireMask::draw(1, 4, 4, 0.9, &mut stream(7, &[1]));
    for padding in [Padding::Reflect, Padding::Zero, Padding::Circular] {
        let got = nca_step(&s, &params, &e, &fire, padding, 0).unwrap();
        let want = reference_step(&params, s.tensor().data(), e.data(), fire.as_slice(), 4, 4, padding);
        let err = got
            .tensor()
            .data()
            .iter()
            .zip(&want)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-12, "{padding:?}: max error {err}");
    }
}

#[test]
fn banded_forward_matches_single_band() {
    // 200 x 100 cells exceeds one band, so the no-tape path splits rows.
    let dims = BranchDims {
        channels: 6,
        hidden: 4,
        embed_dim: 2,
        enc_dim: 2,
        embed_hidden: 4,
        cond_hidden: 4,
    };
    let params = CellRuleParams::<f64>::init_random(dims, &mut stream(12, &[]));
    let s = random_state(1, 6, 200, 100, 13);
    let spec = RolloutSpec {
        steps: 2,
        fire_rate: 0.8,
        padding: Padding::Reflect,
        stage: Stage::Image,
        positions: PositionMode::Stretched,
        t_norm: &[0.4],
        seed: 3,
        key: &[],
        active: None,
    };
    let banded = rollout(&s, &params, &spec).unwrap();
    let (taped, _) = rollout_taped(&s, &params, &spec).unwrap();
    assert_eq!(banded, taped);
}

fn spec<'a>(steps: usize, t: &'a [f64], padding: Padding, positions: PositionMode) -> RolloutSpec<'a> {
    RolloutSpec {
        steps,
        fire_rate: 1.0,
        padding,
        stage: Stage::Image,
        positions,
        t_norm: t,
        seed: 21,
        key: &[5],
        active: None,
    }
}

#[test]
fn single_step_rollout_is_one_step() {
    let params = CellRuleParams::<f64>::init_random(tiny_dims(), &mut stream(14, &[]));
    let s = random_state(1, 8, 5, 5, 15);
    let mut sp = spec(1, &[0.6], Padding::Reflect, PositionMode::Stretched);
    sp.fire_rate = 0.7;
    let rolled = rollout(&s, &params, &sp).unwrap();
    let inputs = ConditioningInputs {
        t_norm: 0.6,
        step_norm: 0.0,
        positions: PositionMode::Stretched,
    };
    let map = build_embedding_map(&inputs, &params.embed, 5, 5, 4).unwrap();
    let e = Tensor::from_vec(&[1, 4, 5, 5], map.map).unwrap();
    let fire = sp.fire_mask(0, 1, 5, 5);
    let stepped = nca_step(&s, &params, &e, &fire, Padding::Reflect, 0).unwrap();
    assert_eq!(rolled, stepped);
}

#[test]
fn zero_steps_rejected() {
    let params = CellRuleParams::<f64>::init_random(tiny_dims(), &mut stream(14, &[]));
    let s = random_state(1, 8, 5, 5, 15);
    assert!(rollout(&s, &params, &spec(0, &[0.1], Padding::Zero, PositionMode::Stretched)).is_err());
}

#[test]
fn perturbation_stays_within_step_radius() {
    let params = CellRuleParams::<f64>::init_random(tiny_dims(), &mut stream(16, &[]));
    let (h, w) = (15, 15);
    let s = random_state(1, 8, h, w, 17);
    let mut s2 = s.clone();
    let (ci, cj) = (7usize, 7usize);
    s2.tensor_mut().data_mut()[6 * h * w + ci * w + cj] += 0.5;
    let sp = spec(5, &[0.5], Padding::Zero, PositionMode::Stretched);
    let a = rollout(&s, &params, &sp).unwrap();
    let b = rollout(&s2, &params, &sp).unwrap();
    let mut max_radius = 0;
    for ch in 0..8 {
        for i in 0..h {
            for j in 0..w {
                let idx = ch * h * w + i * w + j;
                if a.tensor().data()[idx] != b.tensor().data()[idx] {
                    let r = i.abs_diff(ci).max(j.abs_diff(cj));
                    max_radius = max_radius.max(r);
                }
            }
        }
    }
    assert_eq!(max_radius, 5);
}

#[test]
fn circular_rollout_commutes_with_translation() {
    let params = CellRuleParams::<f64>::init_random(tiny_dims(), &mut stream(18, &[]));
    let (h, w) = (6, 7);
    let s = random_state(1, 8, h, w, 19);
    let (dy, dx) = (2usize, 3usize);
    let shift = |t: &Tensor<f64>| -> Tensor<f64> {
        let mut out = t.clone();
        for ch in 0..8 {
            for i in 0..h {
                for j in 0..w {
                    out.data_mut()[ch * h * w + ((i + dy) % h) * w + (j + dx) % w] = t.data()[ch * h * w + i * w + j];
                }
            }
        }
        out
    };
    let shifted = StateGrid::from_tensor(shift(s.tensor())).unwrap();
    let sp = spec(3, &[0.2], Padding::Circular, PositionMode::Disabled);
    let a = rollout(&s, &params, &sp).unwrap();
    let b = rollout(&shifted, &params, &sp).unwrap();
    assert!(shift(a.tensor()).max_abs_diff(b.tensor()) < 1e-5);

    // Same with a sparse fire mask translated alongside the state.
    let inputs = ConditioningInputs {
        t_norm: 0.2,
        step_norm: 0.0,
        positions: PositionMode::Disabled,
    };
    let map = build_embedding_map(&inputs, &params.embed, h, w, 4).unwrap();
    let e = Tensor::from_vec(&[1, 4, h, w], map.map).unwrap();
    let fire = FireMask::draw(1, h, w, 0.5, &mut stream(20, &[]));
    let mut moved = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            moved[((i + dy) % h) * w + (j + dx) % w] = fire.as_slice()[i * w + j];
        }
    }
    let fire_moved = FireMask::from_vec(1, h, w, moved);
    let a = nca_step(&s, &params, &e, &fire, Padding::Circular, 0).unwrap();
    let b = nca_step(&shifted, &params, &e, &fire_moved, Padding::Circular, 0).unwrap();
    assert!(shift(a.tensor()).max_abs_diff(b.tensor()) < 1e-5);
}

#[test]
fn rollout_is_deterministic() {
    let params = CellRuleParams::<f32>::init_random(tiny_dims(), &mut stream(22, &[]));
    let s = StateGrid::from_tensor(normal_tensor::<f32>(&[2, 8, 5, 5], &mut stream(23, &[]))).unwrap();
    let mut sp = spec(4, &[0.1, 0.9], Padding::Reflect, PositionMode::Stretched);
    sp.fire_rate = 0.9;
    let a = rollout(&s, &params, &sp).unwrap();
    let b = rollout(&s, &params, &sp).unwrap();
    assert_eq!(a, b);
}

#[test]
fn non_finite_update_reports_step() {
    let mut params = CellRuleParams::<f64>::init_random(tiny_dims(), &mut stream(24, &[]));
    params.fc1.bias.data_mut()[0] = f64::INFINITY;
    let s = random_state(1, 8, 4, 4, 25);
    let mut sp = spec(3, &[0.5], Padding::Reflect, PositionMode::Stretched);
    sp.stage = Stage::Fourier;
    assert_eq!(
        rollout(&s, &params, &sp),
        Err(Error::NumericFailure {
            stage: Stage::Fourier,
            step: 0
        })
    );
}

fn scalar_loss(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn rollout_gradients_match_finite_differences() {
    let params = CellRuleParams::<f64>::init_random(tiny_dims(), &mut stream(26, &[]));
    let s = random_state(2, 8, 4, 4, 27);
    let weights = normal_tensor::<f64>(&[2, 8, 4, 4], &mut stream(28, &[]));
    let t = [0.3, 0.8];
    let mut sp = spec(2, &t, Padding::Reflect, PositionMode::Stretched);
    sp.fire_rate = 0.75;
    let (_, tape) = rollout_taped(&s, &params, &sp).unwrap();
    let mut grads = params.zeros_like();
    let d_in = rollout_backward(&params, &tape, &weights, &mut grads);

    let loss =
        |p: &CellRuleParams<f64>, st: &StateGrid<f64>| scalar_loss(rollout(st, p, &sp).unwrap().tensor(), &weights);
    let h = 1e-5;
    for (ti, name) in PARAM_NAMES.iter().enumerate() {
        let analytic = grads.tensors()[ti].data().to_vec();
        let n = analytic.len();
        for k in [0, n / 3, n / 2, n - 1] {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data_mut()[k] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data_mut()[k] -= h;
            let fd = (loss(&plus, &s) - loss(&minus, &s)) / (2.0 * h);
            let scale = fd.abs().max(analytic[k].abs()).max(1e-6);
            assert!(
                (fd - analytic[k]).abs() / scale < 1e-4,
                "{name}[{k}]: analytic {} vs fd {fd}",
                analytic[k]
            );
        }
    }
    // Input gradient.
    for k in [0, 40, 255] {
        let mut plus = s.clone();
        plus.tensor_mut().data_mut()[k] += h;
        let mut minus = s.clone();
        minus.tensor_mut().data_mut()[k] -= h;
        let fd = (loss(&params, &plus) - loss(&params, &minus)) / (2.0 * h);
        assert!((fd - d_in.data()[k]).abs() < 1e-6 * fd.abs().max(1.0));
    }
}
