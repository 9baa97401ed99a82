//! JSON run configuration. A file names a preset and overrides any subset of its keys:
//!
//! ```json
//! { "preset": "desk", "train": { "steps": 500 }, "out_dir": "runs/blobs" }
//! ```
//!
//! Unknown keys are rejected with their full path. `docs/config.md` lists every key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use diffnca_core::diffusion::{make_schedule, NoiseSchedule};
use diffnca_core::fourier::WindowAnchor;
use diffnca_core::optim::TrainConfig;
use diffnca_core::synthetic::SyntheticKind;
use diffnca_core::{ModelConfig, ModelKind, Padding, PositionMode};

use crate::error::{CliError, Result};

pub const PRESETS: &[&str] = &[
    "paper-default",
    "paper-1.85m",
    "paper-diff",
    "ablation-s10",
    "ablation-s30",
    "ablation-h256",
    "ablation-c48",
    "desk",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Diff,
    Fourierdiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingName {
    Reflect,
    Zero,
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionName {
    Stretched,
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorName {
    Centered,
    FromCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticName {
    Blobs,
    BicolorHalves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub lr_gamma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    pub batch: usize,
    pub ema_decay: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many steps (and always at the end).
    pub checkpoint_every: u64,
    /// Evaluate the validation loss every this many steps (and at the end).
    pub val_every: u64,
    /// Validation patches per evaluation.
    pub val_batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub kind: SyntheticName,
    pub size: usize,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Folder of PNG files (searched recursively). Mutually exclusive with `synthetic`.
    pub root: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
    pub patch_size: usize,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    /// Resize every source image to `[height, width]` before patching.
    pub resize: Option<[usize; 2]>,
    /// Integer box-filter downscale applied before patching.
    pub downscale_factor: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelName,
    pub c: usize,
    pub h: usize,
    pub s: usize,
    pub fourier_steps: usize,
    pub fourier_window: usize,
    pub window_anchor: AnchorName,
    pub e_dim: usize,
    pub enc_dim: usize,
    pub embed_hidden: usize,
    pub cond_hidden: usize,
    pub fire_rate: f64,
    pub padding: PaddingName,
    pub fourier_padding: PaddingName,
    pub position_mode: PositionName,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub out_dir: PathBuf,
}

impl From<Padding> for PaddingName {
    fn from(p: Padding) -> Self {
        match p {
            Padding::Reflect => PaddingName::Reflect,
            Padding::Zero => PaddingName::Zero,
            Padding::Circular => PaddingName::Circular,
        }
    }
}

impl From<PaddingName> for Padding {
    fn from(p: PaddingName) -> Self {
        match p {
            PaddingName::Reflect => Padding::Reflect,
            PaddingName::Zero => Padding::Zero,
            PaddingName::Circular => Padding::Circular,
        }
    }
}

impl From<PositionName> for PositionMode {
    fn from(p: PositionName) -> Self {
        match p {
            PositionName::Stretched => PositionMode::Stretched,
            PositionName::Disabled => PositionMode::Disabled,
        }
    }
}

impl From<SyntheticName> for SyntheticKind {
    fn from(k: SyntheticName) -> Self {
        match k {
            SyntheticName::Blobs => SyntheticKind::Blobs,
            SyntheticName::BicolorHalves => SyntheticKind::BicolorHalves,
        }
    }
}

fn train_section(steps: u64, batch: usize, checkpoint_every: u64, val_every: u64) -> TrainSection {
    let d = TrainConfig::default();
    TrainSection {
        lr: d.lr,
        lr_gamma: d.lr_gamma,
        adam_beta1: d.adam_beta1,
        adam_beta2: d.adam_beta2,
        adam_eps: d.adam_eps,
        steps,
        batch,
        ema_decay: d.ema_decay,
        seed: d.seed,
        grad_clip: d.grad_clip,
        checkpoint_every,
        val_every,
        val_batch: 16,
    }
}

impl RunConfig {
    fn from_model(
        m: &ModelConfig,
        schedule: ScheduleSection,
        train: TrainSection,
        data: DataSection,
        out_dir: &str,
    ) -> Self {
        RunConfig {
            model: match m.kind {
                ModelKind::Diff => ModelName::Diff,
                ModelKind::FourierDiff => ModelName::Fourierdiff,
            },
            c: m.channels,
            h: m.hidden,
            s: m.steps,
            fourier_steps: m.fourier_steps,
            fourier_window: m.fourier_window,
            window_anchor: match m.window_anchor {
                WindowAnchor::Centered => AnchorName::Centered,
                WindowAnchor::FromCenter => AnchorName::FromCenter,
            },
            e_dim: m.embed_dim,
            enc_dim: m.enc_dim,
            embed_hidden: m.embed_hidden,
            cond_hidden: m.cond_hidden,
            fire_rate: m.fire_rate,
            padding: m.padding.into(),
            fourier_padding: m.fourier_padding.into(),
            position_mode: match m.positions {
                PositionMode::Stretched => PositionName::Stretched,
                PositionMode::Disabled => PositionName::Disabled,
            },
            schedule,
            train,
            data,
            out_dir: out_dir.into(),
        }
    }

    /// One of [`PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        let paper_schedule = ScheduleSection {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        };
        let paper_data = DataSection {
            root: None,
            synthetic: Some(SyntheticSection {
                kind: SyntheticName::Blobs,
                size: 64,
                count: 2048,
                seed: 0,
            }),
            patch_size: 64,
            split: [0.8, 0.1, 0.1],
            resize: None,
            downscale_factor: None,
        };
        let paper = |m: ModelConfig| {
            RunConfig::from_model(
                &m,
                paper_schedule.clone(),
                train_section(200_000, 16, 10_000, 1_000),
                paper_data.clone(),
                &format!("runs/{name}"),
            )
        };
        let base = ModelConfig::paper_default();
        Ok(match name {
            "paper-default" => paper(base),
            "paper-1.85m" => paper(ModelConfig::paper_1_85m()),
            "paper-diff" => paper(ModelConfig::paper_diff()),
            "ablation-s10" => paper(ModelConfig { steps: 10, ..base }),
            "ablation-s30" => paper(ModelConfig { steps: 30, ..base }),
            "ablation-h256" => paper(base.with_hidden(256)),
            "ablation-c48" => paper(base.with_channels(48)),
            "desk" => RunConfig::from_model(
                &ModelConfig::desk(),
                ScheduleSection {
                    timesteps: 50,
                    ..paper_schedule
                },
                train_section(2_000, 8, 500, 100),
                DataSection {
                    synthetic: Some(SyntheticSection {
                        kind: SyntheticName::Blobs,
                        size: 16,
                        count: 512,
                        seed: 0,
                    }),
                    patch_size: 16,
                    ..paper_data
                },
                "runs/desk",
            ),
            other => {
                return Err(CliError::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    /// Parses a config document, applies `key.path=value` overrides and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
        Self::from_value(user, overrides)
    }

    pub fn from_value(user: Value, overrides: &[String]) -> Result<Self> {
        let Value::Object(mut user) = user else {
            return Err(CliError::Config("top level must be a JSON object".into()));
        };
        let preset = match user.remove("preset") {
            None => "paper-default".to_string(),
            Some(Value::String(s)) => s,
            Some(other) => return Err(CliError::Config(format!("`preset` must be a string, got {other}"))),
        };
        let mut merged = serde_json::to_value(Self::preset(&preset)?).expect("presets serialize");
        // a user-supplied folder replaces the preset's synthetic source
        let root_given = user
            .get("data")
            .and_then(|d| d.get("root"))
            .is_some_and(|r| !r.is_null());
        let synthetic_given = user.get("data").and_then(|d| d.get("synthetic")).is_some();
        if root_given && !synthetic_given {
            merged["data"]["synthetic"] = Value::Null;
        }
        merge(&mut merged, Value::Object(user));
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let config: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("key `{path}`: {}", e.into_inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: match self.model {
                ModelName::Diff => ModelKind::Diff,
                ModelName::Fourierdiff => ModelKind::FourierDiff,
            },
            channels: self.c,
            hidden: self.h,
            steps: self.s,
            fourier_steps: self.fourier_steps,
            fourier_window: self.fourier_window,
            window_anchor: match self.window_anchor {
                AnchorName::Centered => WindowAnchor::Centered,
                AnchorName::FromCenter => WindowAnchor::FromCenter,
            },
            embed_dim: self.e_dim,
            enc_dim: self.enc_dim,
            embed_hidden: self.embed_hidden,
            cond_hidden: self.cond_hidden,
            fire_rate: self.fire_rate,
            padding: self.padding.into(),
            fourier_padding: self.fourier_padding.into(),
            positions: self.position_mode.into(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            lr_gamma: t.lr_gamma,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            steps: t.steps,
            batch: t.batch,
            ema_decay: t.ema_decay,
            seed: t.seed,
            grad_clip: t.grad_clip,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        Ok(make_schedule(s.timesteps, s.beta_start, s.beta_end)?)
    }

    /// Every check that can fail later, run before any compute.
    pub fn validate(&self) -> Result<()> {
        let keyed = |key: &str, e: diffnca_core::Error| CliError::Config(format!("{key}: {e}"));
        self.model_config().validate().map_err(|e| keyed("model", e))?;
        self.train_config().validate().map_err(|e| keyed("train", e))?;
        self.noise_schedule().map_err(|e| match e {
            CliError::Core(e) => keyed("schedule", e),
            other => other,
        })?;
        let t = &self.train;
        if t.checkpoint_every == 0 || t.val_every == 0 || t.val_batch == 0 {
            return Err(CliError::Config(
                "train: checkpoint_every, val_every and val_batch must be at least 1".into(),
            ));
        }
        let d = &self.data;
        match (&d.root, &d.synthetic) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "data: set either `root` or `synthetic`, not both".into(),
                ))
            }
            (None, None) => {
                return Err(CliError::Config(
                    "data: one of `root` or `synthetic` is required".into(),
                ))
            }
            (None, Some(s)) => {
                if s.size < d.patch_size {
                    return Err(CliError::Config(format!(
                        "data.synthetic.size ({}) is smaller than data.patch_size ({})",
                        s.size, d.patch_size
                    )));
                }
                if s.count == 0 {
                    return Err(CliError::Config("data.synthetic.count must be at least 1".into()));
                }
            }
            (Some(_), None) => {}
        }
        if d.patch_size < 3 {
            return Err(CliError::Config("data.patch_size must be at least 3".into()));
        }
        if d.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "data.split must be fractions summing to 1, got {:?}",
                d.split
            )));
        }
        if d.downscale_factor == Some(0) {
            return Err(CliError::Config("data.downscale_factor must be at least 1".into()));
        }
        if let Some([h, w]) = d.resize {
            if h < 3 || w < 3 {
                return Err(CliError::Config("data.resize must be at least 3x3".into()));
            }
        }
        if self.model == ModelName::Fourierdiff && self.fourier_window > d.patch_size {
            return Err(CliError::Config(format!(
                "fourier_window ({}) exceeds data.patch_size ({})",
                self.fourier_window, d.patch_size
            )));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `train.steps=100`, `data.root="imgs"`; values are JSON, falling back to a bare string.
fn apply_override(config: &mut Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = config;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = slot else {
            return Err(CliError::Config(format!(
                "override `{path}`: `{}` is not an object",
                keys[..i].join(".")
            )));
        };
        slot = map.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    *slot = value;
    Ok(())
}
