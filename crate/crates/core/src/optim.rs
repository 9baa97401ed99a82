//! Adam with per-step exponential learning-rate decay, EMA shadow weights and the
//! training step.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffusion::{diffusion_loss, diffusion_loss_grad, q_sample_into, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{backward, predict_noise, predict_noise_taped, Model, NoiseQuery};
use crate::real::Real;
use crate::rng::{domain, normal_tensor, stream};
use crate::tensor::Tensor;

/// Key prefixes of the fire-mask streams used while training and validating.
const TRAIN_KEY: u64 = 0;
const VALIDATION_KEY: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative decay applied after every optimizer step.
    pub lr_gamma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    pub batch: usize,
    pub ema_decay: f64,
    pub seed: u64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1.6e-3,
            lr_gamma: 0.9999,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            steps: 200_000,
            batch: 16,
            ema_decay: 0.99,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        unit("adam_beta1", self.adam_beta1)?;
        unit("adam_beta2", self.adam_beta2)?;
        unit("ema_decay", self.ema_decay)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::config(format!(
                "lr_gamma must lie in (0, 1], got {}",
                self.lr_gamma
            )));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be positive"));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::config("steps and batch must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }

    /// `lr · gamma^step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * libm::pow(self.lr_gamma, step as f64)
    }
}

fn check_layout<T: Real>(a: &Model<T>, b: &Model<T>) -> Result<()> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if ta.len() != tb.len() {
        return Err(Error::Dimension {
            axis: "parameter tensors",
            expected: ta.len(),
            found: tb.len(),
        });
    }
    for (x, y) in ta.iter().zip(&tb) {
        if x.shape() != y.shape() {
            return Err(Error::Dimension {
                axis: "parameter elements",
                expected: x.len(),
                found: y.len(),
            });
        }
    }
    Ok(())
}

/// Exponential moving average of the weights, used for sampling and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema<T> {
    pub shadow: Model<T>,
    pub decay: f64,
}

impl<T: Real> Ema<T> {
    pub fn new(params: &Model<T>, decay: f64) -> Self {
        Ema {
            shadow: params.clone(),
            decay,
        }
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, params: &Model<T>) -> Result<()> {
        check_layout(&self.shadow, params)?;
        let d = T::from_f64(self.decay);
        let k = T::from_f64(1.0 - self.decay);
        for (s, p) in self.shadow.tensors_mut().into_iter().zip(params.tensors()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + k * b;
            }
        }
        Ok(())
    }
}

/// First and second moment estimates, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Model<T>,
    pub v: Model<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &Model<T>) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Bias-corrected update for optimizer step `step` (0-based) at learning rate `lr`.
    pub fn apply(
        &mut self,
        params: &mut Model<T>,
        grads: &Model<T>,
        step: u64,
        lr: f64,
        config: &TrainConfig,
    ) -> Result<()> {
        check_layout(params, grads)?;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let n = step as f64 + 1.0;
        let c1 = 1.0 - libm::pow(b1, n);
        let c2 = 1.0 - libm::pow(b2, n);
        let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
        let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let step_size = T::from_f64(lr / c1);
        let inv_c2 = T::from_f64(1.0 / c2);
        let eps = T::from_f64(config.adam_eps);
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(moments) {
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = tb1 * m[i] + ob1 * gi;
                v[i] = tb2 * v[i] + ob2 * gi * gi;
                *w -= step_size * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Live weights, optimizer moments, EMA shadow and the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub ema: Ema<T>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, config: &TrainConfig) -> Self {
        TrainState {
            adam: Adam::new(&model),
            ema: Ema::new(&model, config.ema_decay),
            model,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Index of the step just taken (0-based).
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub timesteps: Vec<usize>,
}

fn noisy_batch<T: Real>(x0: &Tensor<T>, ts: &[usize], eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    let [b, ..] = x0.dims4()?;
    let mut x_t = x0.clone();
    for (i, &t) in ts.iter().enumerate().take(b) {
        q_sample_into(x0.outer(i), eps.outer(i), t, schedule, x_t.outer_mut(i))?;
    }
    Ok(x_t)
}

/// Diffusion loss at explicit timesteps and noise, with its parameter gradient.
pub fn loss_and_grad<T: Real>(
    model: &Model<T>,
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    seed: u64,
    key: &[u64],
) -> Result<(f64, Model<T>)> {
    let x_t = noisy_batch(x0, ts, eps, schedule)?;
    let q = NoiseQuery {
        t: ts,
        schedule_len: schedule.len(),
        seed,
        key,
        active: None,
    };
    let (n_p, tape) = predict_noise_taped(model, &x_t, &q)?;
    let (loss, d_noise) = diffusion_loss_grad(&n_p, eps)?;
    Ok((loss, backward(model, &tape, &d_noise)?))
}

/// Forward-only counterpart of [`loss_and_grad`].
pub fn loss_at<T: Real>(
    model: &Model<T>,
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    seed: u64,
    key: &[u64],
) -> Result<f64> {
    let x_t = noisy_batch(x0, ts, eps, schedule)?;
    let q = NoiseQuery {
        t: ts,
        schedule_len: schedule.len(),
        seed,
        key,
        active: None,
    };
    diffusion_loss(&predict_noise(model, &x_t, &q)?, eps)
}

/// Timesteps and noise of training step `step`, drawn from their own keyed streams.
pub fn draw_step_noise<T: Real>(seed: u64, step: u64, shape: &[usize], schedule_len: usize) -> (Vec<usize>, Tensor<T>) {
    let mut rng = stream(seed, &[domain::TRAIN_TIMESTEP, step]);
    let ts = (0..shape[0]).map(|_| rng.gen_range(1..=schedule_len)).collect();
    let eps = normal_tensor(shape, &mut stream(seed, &[domain::TRAIN_NOISE, step]));
    (ts, eps)
}

fn global_norm<T: Real>(grads: &Model<T>) -> f64 {
    let sq: f64 = grads
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    libm::sqrt(sq)
}

/// One optimizer step on the clean batch `x0` (`[B, 3, H, W]` in `[-1, 1]`).
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    x0: &Tensor<T>,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<StepReport> {
    let step = state.step;
    let (ts, eps) = draw_step_noise::<T>(config.seed, step, x0.shape(), schedule.len());
    let key = [TRAIN_KEY, step];
    let (loss, mut grads) = match loss_and_grad(&state.model, x0, &ts, &eps, schedule, config.seed, &key) {
        Err(Error::NumericFailure { .. }) => (f64::NAN, state.model.zeros_like()),
        other => other?,
    };
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, timesteps: ts });
    }
    if let Some(clip) = config.grad_clip {
        let norm = global_norm(&grads);
        if norm > clip {
            let k = T::from_f64(clip / norm);
            for g in grads.tensors_mut() {
                g.map_inplace(|v| v * k);
            }
        }
    }
    let lr = config.lr_at(step);
    state.adam.apply(&mut state.model, &grads, step, lr, config)?;
    state.ema.update(&state.model)?;
    state.step += 1;
    Ok(StepReport {
        step,
        loss,
        lr,
        timesteps: ts,
    })
}

/// Loss on `x0` with timesteps, noise and fire masks fixed by `seed`, so successive
/// evaluations are comparable.
pub fn validation_loss<T: Real>(model: &Model<T>, x0: &Tensor<T>, schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, &[domain::VALIDATION, 0]);
    let ts: Vec<usize> = (0..x0.shape()[0]).map(|_| rng.gen_range(1..=schedule.len())).collect();
    let eps = normal_tensor(x0.shape(), &mut stream(seed, &[domain::VALIDATION, 1]));
    loss_at(model, x0, &ts, &eps, schedule, seed, &[VALIDATION_KEY])
}
