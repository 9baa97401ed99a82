//! Diff-NCA and FourierDiff-NCA: configuration, parameters and the noise predictor.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub use crate::conditioning::PositionMode;
use crate::error::{Error, Result, Stage};
use crate::fourier::{
    fourier_stage, fourier_stage_backward, fourier_stage_taped, FourierStageSpec, FourierStageTape, WindowAnchor,
};
use crate::nca::{
    inference_bytes, rollout, rollout_backward, rollout_taped, seed_state, BranchDims, CellRuleParams, Padding,
    RolloutSpec, RolloutTape, StateGrid, IMAGE_CHANNELS, PARAM_NAMES,
};
use crate::real::Real;
use crate::rng::{domain, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Image-space rule only.
    Diff,
    /// Spectral stage followed by the image-space rule.
    FourierDiff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// State channels `c` of the image branch; the spectral branch uses `2c`.
    pub channels: usize,
    /// Hidden width `h`.
    pub hidden: usize,
    /// Image-space steps `s`.
    pub steps: usize,
    pub fourier_steps: usize,
    pub fourier_window: usize,
    pub window_anchor: WindowAnchor,
    pub embed_dim: usize,
    pub enc_dim: usize,
    pub embed_hidden: usize,
    pub cond_hidden: usize,
    pub fire_rate: f64,
    pub padding: Padding,
    pub fourier_padding: Padding,
    pub positions: PositionMode,
}

impl ModelConfig {
    /// FourierDiff-NCA with `c = 96, h = 512, s = 20`, 32 spectral steps on a 16x16 window.
    pub fn paper_default() -> Self {
        ModelConfig {
            kind: ModelKind::FourierDiff,
            channels: 96,
            hidden: 512,
            steps: 20,
            fourier_steps: 32,
            fourier_window: 16,
            window_anchor: WindowAnchor::Centered,
            embed_dim: 4,
            enc_dim: 4,
            embed_hidden: 256,
            cond_hidden: 128,
            fire_rate: 0.9,
            padding: Padding::Reflect,
            fourier_padding: Padding::Zero,
            positions: PositionMode::Stretched,
        }
    }

    /// Diff-NCA with the compact two-channel embedding (four raw scalars in).
    pub fn paper_diff() -> Self {
        ModelConfig {
            kind: ModelKind::Diff,
            embed_dim: 2,
            enc_dim: 1,
            ..Self::paper_default()
        }
    }

    /// FourierDiff-NCA with `c = 128, h = 640`.
    pub fn paper_1_85m() -> Self {
        Self::paper_default().with_channels(128).with_hidden(640)
    }

    /// Small Diff-NCA for CPU experiments on 16x16 images.
    pub fn desk() -> Self {
        ModelConfig {
            kind: ModelKind::Diff,
            steps: 8,
            fourier_steps: 8,
            fourier_window: 4,
            ..Self::paper_default()
        }
        .with_channels(32)
        .with_hidden(64)
    }

    /// Sets `h` and rescales the embedding and conditioning MLPs to `h/2` and `h/4`.
    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self.embed_hidden = (hidden / 2).max(1);
        self.cond_hidden = (hidden / 4).max(1);
        self
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn image_dims(&self) -> BranchDims {
        BranchDims {
            channels: self.channels,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            enc_dim: self.enc_dim,
            embed_hidden: self.embed_hidden,
            cond_hidden: self.cond_hidden,
        }
    }

    pub fn fourier_dims(&self) -> BranchDims {
        BranchDims {
            channels: 2 * self.channels,
            ..self.image_dims()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image_dims().validate()?;
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if !(self.fire_rate > 0.0 && self.fire_rate <= 1.0) {
            return Err(Error::config(format!(
                "fire_rate must lie in (0, 1], got {}",
                self.fire_rate
            )));
        }
        if self.kind == ModelKind::FourierDiff {
            if self.fourier_steps == 0 {
                return Err(Error::config("fourier_steps must be at least 1"));
            }
            if self.fourier_window < 3 {
                return Err(Error::config("fourier_window must be at least 3"));
            }
        }
        Ok(())
    }

    /// Parameter count of a model built from this configuration.
    pub fn parameter_count(&self) -> usize {
        let branch = |d: BranchDims| CellRuleParams::<f32>::zeros(d).parameter_count();
        match self.kind {
            ModelKind::Diff => branch(self.image_dims()),
            ModelKind::FourierDiff => branch(self.image_dims()) + branch(self.fourier_dims()),
        }
    }

    /// Rough scratch size of one reverse-chain step at `height x width`.
    pub fn inference_bytes(&self, height: usize, width: usize) -> usize {
        let image = inference_bytes(&self.image_dims(), 1, height, width);
        match self.kind {
            ModelKind::Diff => image,
            ModelKind::FourierDiff => {
                let w = self.fourier_window;
                image
                    + inference_bytes(&self.fourier_dims(), 1, w, w)
                    + 4 * self.channels * height * width * core::mem::size_of::<f32>()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub image: CellRuleParams<T>,
    pub fourier: Option<CellRuleParams<T>>,
}

/// Fire-mask stream of a noise prediction: `(seed, FIRE, key.., branch, step)`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseQuery<'a> {
    /// Diffusion timestep `1..=schedule_len`, one per batch element.
    pub t: &'a [usize],
    pub schedule_len: usize,
    pub seed: u64,
    pub key: &'a [u64],
    /// `[H, W]` plane of cells the image-space rule may update.
    pub active: Option<&'a [bool]>,
}

/// Recorded forward pass of [`predict_noise_taped`].
pub struct ModelTape<T> {
    image: RolloutTape<T>,
    fourier: Option<FourierStageTape<T>>,
    dims: [usize; 4],
}

const IMAGE_BRANCH: u64 = 0;
const FOURIER_BRANCH: u64 = 1;

impl<T: Real> Model<T> {
    /// Fresh weights drawn from `(seed, PARAM_INIT, branch)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let image = CellRuleParams::init(
            config.image_dims(),
            &mut stream(seed, &[domain::PARAM_INIT, IMAGE_BRANCH]),
        );
        let fourier = (config.kind == ModelKind::FourierDiff).then(|| {
            CellRuleParams::init(
                config.fourier_dims(),
                &mut stream(seed, &[domain::PARAM_INIT, FOURIER_BRANCH]),
            )
        });
        Ok(Model { config, image, fourier })
    }

    /// Same layout as `self`, every tensor zero (gradient and optimizer buffers).
    pub fn zeros_like(&self) -> Self {
        Model {
            config: self.config.clone(),
            image: self.image.zeros_like(),
            fourier: self.fourier.as_ref().map(|f| f.zeros_like()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.image.tensors().into_iter().collect();
        if let Some(f) = &self.fourier {
            out.extend(f.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.image.tensors_mut().into_iter().collect();
        if let Some(f) = &mut self.fourier {
            out.extend(f.tensors_mut());
        }
        out
    }

    /// Tensor names in [`tensors`](Self::tensors) order: `img.*` then `four.*`.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = PARAM_NAMES.iter().map(|n| format!("img.{n}")).collect();
        if self.fourier.is_some() {
            names.extend(PARAM_NAMES.iter().map(|n| format!("four.{n}")));
        }
        names
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            image: self.image.cast(),
            fourier: self.fourier.as_ref().map(|f| f.cast()),
        }
    }

    fn image_spec<'a>(&self, q: &NoiseQuery<'a>, t_norm: &'a [f64], key: &'a [u64]) -> RolloutSpec<'a> {
        RolloutSpec {
            steps: self.config.steps,
            fire_rate: self.config.fire_rate,
            padding: self.config.padding,
            stage: Stage::Image,
            positions: self.config.positions,
            t_norm,
            seed: q.seed,
            key,
            active: q.active,
        }
    }

    fn fourier_spec<'a>(&self, q: &NoiseQuery<'a>, t_norm: &'a [f64], key: &'a [u64]) -> FourierStageSpec<'a> {
        FourierStageSpec {
            window: self.config.fourier_window,
            anchor: self.config.window_anchor,
            rollout: RolloutSpec {
                steps: self.config.fourier_steps,
                fire_rate: self.config.fire_rate,
                padding: self.config.fourier_padding,
                stage: Stage::Fourier,
                positions: self.config.positions,
                t_norm,
                seed: q.seed,
                key,
                active: None,
            },
        }
    }
}

fn query_inputs(x_t: &Tensor<impl Real>, q: &NoiseQuery<'_>) -> Result<(Vec<f64>, Vec<u64>, Vec<u64>)> {
    let [b, c, _, _] = x_t.dims4()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::Dimension {
            axis: "channels",
            expected: IMAGE_CHANNELS,
            found: c,
        });
    }
    if q.t.len() != b {
        return Err(Error::Dimension {
            axis: "timesteps",
            expected: b,
            found: q.t.len(),
        });
    }
    let mut t_norm = Vec::with_capacity(b);
    for &t in q.t {
        if t == 0 || t > q.schedule_len {
            return Err(Error::TimestepOutOfRange { t, max: q.schedule_len });
        }
        t_norm.push(t as f64 / q.schedule_len as f64);
    }
    let mut image_key = q.key.to_vec();
    image_key.push(IMAGE_BRANCH);
    let mut fourier_key = q.key.to_vec();
    fourier_key.push(FOURIER_BRANCH);
    Ok((t_norm, image_key, fourier_key))
}

/// Predicted noise `[B, 3, H, W]` for the noisy batch `x_t`.
pub fn predict_noise<T: Real>(model: &Model<T>, x_t: &Tensor<T>, q: &NoiseQuery<'_>) -> Result<Tensor<T>> {
    let (t_norm, image_key, fourier_key) = query_inputs(x_t, q)?;
    let initial = match &model.fourier {
        None => seed_state(x_t, model.config.channels)?,
        Some(params) => {
            let spec = model.fourier_spec(q, &t_norm, &fourier_key);
            fourier_stage(x_t, model.config.channels, params, &spec)?.state
        }
    };
    let spec = model.image_spec(q, &t_norm, &image_key);
    Ok(rollout(&initial, &model.image, &spec)?.read_noise_prediction())
}

/// [`predict_noise`] keeping every activation for [`backward`].
pub fn predict_noise_taped<T: Real>(
    model: &Model<T>,
    x_t: &Tensor<T>,
    q: &NoiseQuery<'_>,
) -> Result<(Tensor<T>, ModelTape<T>)> {
    let (t_norm, image_key, fourier_key) = query_inputs(x_t, q)?;
    let (initial, fourier) = match &model.fourier {
        None => (seed_state(x_t, model.config.channels)?, None),
        Some(params) => {
            let spec = model.fourier_spec(q, &t_norm, &fourier_key);
            let (out, tape) = fourier_stage_taped(x_t, model.config.channels, params, &spec)?;
            (out.state, Some(tape))
        }
    };
    let dims = initial.dims();
    let spec = model.image_spec(q, &t_norm, &image_key);
    let (out, image) = rollout_taped(&initial, &model.image, &spec)?;
    Ok((out.read_noise_prediction(), ModelTape { image, fourier, dims }))
}

/// Gradient of a scalar loss with respect to every parameter, given `d_noise`, its gradient
/// with respect to the predicted noise.
pub fn backward<T: Real>(model: &Model<T>, tape: &ModelTape<T>, d_noise: &Tensor<T>) -> Result<Model<T>> {
    let mut grads = model.zeros_like();
    let [b, c, h, w] = tape.dims;
    let mut d_state = StateGrid::from_tensor(Tensor::zeros(&[b, c, h, w]))?;
    d_state.write_noise(d_noise)?;
    let d_initial = rollout_backward(&model.image, &tape.image, d_state.tensor(), &mut grads.image);
    if let (Some(params), Some(ftape), Some(fgrads)) = (&model.fourier, &tape.fourier, grads.fourier.as_mut()) {
        fourier_stage_backward(params, ftape, &d_initial, fgrads)?;
    }
    Ok(grads)
}

/// Zeroes the residual of both branches, making the model predict zero noise.
pub fn zero_output_layers<T: Real>(model: &mut Model<T>) {
    model.image.fc1.weight.fill(T::zero());
    model.image.fc1.bias.fill(T::zero());
    if let Some(f) = &mut model.fourier {
        f.fc1.weight.fill(T::zero());
        f.fc1.bias.fill(T::zero());
    }
}

/// Randomises the output layers (fresh models start with them at zero).
pub fn randomize_output_layers<T: Real>(model: &mut Model<T>, seed: u64) {
    let dims = model.config.image_dims();
    let img = CellRuleParams::<T>::init_random(dims, &mut stream(seed, &[domain::PARAM_INIT, 2]));
    model.image.fc1 = img.fc1;
    if let Some(f) = &mut model.fourier {
        let four =
            CellRuleParams::<T>::init_random(model.config.fourier_dims(), &mut stream(seed, &[domain::PARAM_INIT, 3]));
        f.fc1 = four.fc1;
    }
}
