//! Subcommands. Every artifact gets a `<name>.json` sidecar with everything needed to
//! regenerate it.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use diffnca_core::diffusion::{sample, sample_masked, sample_tiled, upscale, SampleMask, TileOptions};
use diffnca_core::fourier::{kept_fraction, lowpass_preview};
use diffnca_core::{Model, Padding, PositionMode, Tensor};

use crate::checkpoint::{file_sha256, load_checkpoint, read_tensor_file};
use crate::config::{RunConfig, PRESETS};
use crate::data::{export_png, ingest, load_png, Split};
use crate::error::{CliError, Result};
use crate::train::{train, LogRow};

fn sidecar_path(artifact: &Path) -> PathBuf {
    artifact.with_extension("json")
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Sampling weights (the EMA shadow) and provenance of a checkpoint.
pub struct Loaded {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub sha256: String,
}

pub fn load_for_sampling(path: &Path) -> Result<Loaded> {
    let ck = load_checkpoint(path)?;
    Ok(Loaded {
        config: ck.config,
        model: ck.state.ema.shadow,
        sha256: file_sha256(path)?,
    })
}

fn provenance(command: &str, args: &impl Serialize, loaded: Option<&Loaded>, checkpoint: Option<&Path>) -> Value {
    let mut v = json!({
        "command": command,
        "args": args,
        "version": env!("CARGO_PKG_VERSION"),
    });
    if let (Some(l), Some(p)) = (loaded, checkpoint) {
        v["checkpoint"] = json!(p);
        v["checkpoint_sha256"] = json!(l.sha256);
        v["config"] = l.config.to_json();
    }
    v
}

fn check_geometry(height: usize, width: usize) -> Result<()> {
    if height < 3 || width < 3 {
        return Err(CliError::Config(format!(
            "geometry must be at least 3x3, got {height}x{width}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<u64> {
    let config = RunConfig::load(&args.config, &args.overrides)?;
    write_json(
        &config.out_dir.join("run.json"),
        &json!({
            "command": "train",
            "args": args,
            "config": config.to_json(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    let every = config.train.val_every;
    let summary = train(&config, args.resume.as_deref(), |row: &LogRow| {
        if let Some(v) = row.val_loss {
            log::info!(
                "step {:>7}  loss {:.5}  val {:.5}  lr {:.3e}",
                row.step + 1,
                row.train_loss,
                v,
                row.lr
            );
        } else if (row.step + 1).is_multiple_of(every.max(1)) {
            log::info!("step {:>7}  loss {:.5}", row.step + 1, row.train_loss);
        }
    })?;
    for c in &summary.checkpoints {
        log::info!("wrote {}", c.display());
    }
    Ok(summary.final_step)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the training patch size.
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_sample(args: &SampleArgs) -> Result<Tensor<f32>> {
    let l = load_for_sampling(&args.checkpoint)?;
    let p = l.config.data.patch_size;
    let (h, w) = (args.height.unwrap_or(p), args.width.unwrap_or(p));
    check_geometry(h, w)?;
    let schedule = l.config.noise_schedule()?;
    let img = sample(&l.model, h, w, &schedule, args.seed)?;
    export_png(&img, &args.out)?;
    write_json(
        &sidecar_path(&args.out),
        &provenance("sample", args, Some(&l), Some(&args.checkpoint)),
    )?;
    Ok(img)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InpaintArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image whose masked region is regenerated.
    #[arg(long)]
    pub image: PathBuf,
    /// Region to regenerate as `top,left,height,width`.
    #[arg(long, conflicts_with = "mask", required_unless_present = "mask")]
    pub rect: Option<String>,
    /// PNG of the same size; bright pixels (luma > 127) are regenerated.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_rect(text: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Config(format!("--rect `{text}` must be top,left,height,width")))?;
    parts
        .try_into()
        .map_err(|_| CliError::Config(format!("--rect `{text}` must have four numbers")))
}

pub fn cmd_inpaint(args: &InpaintArgs) -> Result<Tensor<f32>> {
    let l = load_for_sampling(&args.checkpoint)?;
    let known = load_png(&args.image)?;
    let &[_, h, w] = known.shape() else { unreachable!() };
    check_geometry(h, w)?;
    let mask = match (&args.rect, &args.mask) {
        (Some(r), _) => {
            let [top, left, rh, rw] = parse_rect(r)?;
            SampleMask::rect(h, w, top, left, rh, rw)?
        }
        (None, Some(path)) => {
            let m = load_png(path)?;
            if m.shape() != known.shape() {
                return Err(CliError::Config(format!(
                    "mask is {:?} but the image is {:?}",
                    m.shape(),
                    known.shape()
                )));
            }
            let n = h * w;
            let active = (0..n)
                .map(|i| {
                    let luma = 0.299 * m.data()[i] + 0.587 * m.data()[n + i] + 0.114 * m.data()[2 * n + i];
                    luma > 127.0 / 127.5 - 1.0
                })
                .collect();
            SampleMask::new(h, w, active)?
        }
        (None, None) => return Err(CliError::Config("pass --rect or --mask".into())),
    };
    let schedule = l.config.noise_schedule()?;
    let img = sample_masked(&l.model, &known, &mask, &schedule, args.seed)?;
    export_png(&img, &args.out)?;
    write_json(
        &sidecar_path(&args.out),
        &provenance("inpaint", args, Some(&l), Some(&args.checkpoint)),
    )?;
    Ok(img)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct UpscaleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_upscale(args: &UpscaleArgs) -> Result<Tensor<f32>> {
    let l = load_for_sampling(&args.checkpoint)?;
    let low = load_png(&args.image)?;
    let schedule = l.config.noise_schedule()?;
    let img = upscale(&l.model, &low, &schedule, args.seed)?;
    export_png(&img, &args.out)?;
    write_json(
        &sidecar_path(&args.out),
        &provenance("upscale", args, Some(&l), Some(&args.checkpoint)),
    )?;
    Ok(img)
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionArg {
    Stretched,
    Disabled,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingArg {
    Reflect,
    Zero,
    Circular,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TileArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PositionArg::Stretched)]
    pub positions: PositionArg,
    /// Padding used instead of the trained one.
    #[arg(long, value_enum)]
    pub padding: Option<PaddingArg>,
    /// Refuse canvases whose working set exceeds this many MiB.
    #[arg(long)]
    pub memory_budget_mb: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_tile(args: &TileArgs) -> Result<Tensor<f32>> {
    let l = load_for_sampling(&args.checkpoint)?;
    check_geometry(args.height, args.width)?;
    let options = TileOptions {
        positions: match args.positions {
            PositionArg::Stretched => PositionMode::Stretched,
            PositionArg::Disabled => PositionMode::Disabled,
        },
        padding: args.padding.map(|p| match p {
            PaddingArg::Reflect => Padding::Reflect,
            PaddingArg::Zero => Padding::Zero,
            PaddingArg::Circular => Padding::Circular,
        }),
        memory_budget: args.memory_budget_mb.map(|m| m << 20),
    };
    let schedule = l.config.noise_schedule()?;
    let img = sample_tiled(&l.model, args.height, args.width, &schedule, args.seed, options)?;
    export_png(&img, &args.out)?;
    write_json(
        &sidecar_path(&args.out),
        &provenance("tile", args, Some(&l), Some(&args.checkpoint)),
    )?;
    Ok(img)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LowpassArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Side of the centred block of frequencies to keep.
    #[arg(long, default_value_t = 16)]
    pub keep: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Writes `before.png`, `after.png` and `lowpass.json`; returns the kept fraction.
pub fn cmd_lowpass_demo(args: &LowpassArgs) -> Result<f64> {
    let img = load_png(&args.image)?;
    let &[c, h, w] = img.shape() else { unreachable!() };
    let batch = Tensor::from_vec(&[1, c, h, w], img.data().to_vec())?;
    let filtered = lowpass_preview(&batch, args.keep)?;
    let after = Tensor::from_vec(&[c, h, w], filtered.into_vec())?;
    export_png(&img, &args.out_dir.join("before.png"))?;
    export_png(&after, &args.out_dir.join("after.png"))?;
    let kept = kept_fraction(h, w, args.keep);
    let mut side = provenance("lowpass-demo", args, None, None);
    side["kept"] = json!(format!("kept {:.2}%", 100.0 * kept));
    side["kept_fraction"] = json!(kept);
    write_json(&args.out_dir.join("lowpass.json"), &side)?;
    Ok(kept)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of generated and of real images.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Image `i` is sampled with seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// `generated/NNNNN.png` and `real/NNNNN.png` (test split patches) plus `export.json`.
pub fn cmd_eval_export(args: &EvalExportArgs) -> Result<()> {
    if args.n == 0 {
        return Err(CliError::Config("--n must be at least 1".into()));
    }
    let l = load_for_sampling(&args.checkpoint)?;
    let ds = ingest(&l.config.data)?;
    let p = ds.patch_size;
    let real: Vec<Tensor<f32>> = ds
        .split(Split::Test)
        .iter()
        .flat_map(|img| crate::data::grid_patches(img, p, p))
        .take(args.n)
        .collect();
    if real.len() < args.n {
        return Err(CliError::Dataset(format!(
            "test split has {} patches, {} requested",
            real.len(),
            args.n
        )));
    }
    let schedule = l.config.noise_schedule()?;
    let mut seeds = Vec::with_capacity(args.n);
    for (i, r) in real.iter().enumerate() {
        let seed = args.seed.wrapping_add(i as u64);
        let img = sample(&l.model, p, p, &schedule, seed)?;
        export_png(&img, &args.out_dir.join("generated").join(format!("{i:05}.png")))?;
        export_png(r, &args.out_dir.join("real").join(format!("{i:05}.png")))?;
        seeds.push(seed);
    }
    let mut side = provenance("eval-export", args, Some(&l), Some(&args.checkpoint));
    side["seeds"] = json!(seeds);
    write_json(&args.out_dir.join("export.json"), &side)?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InspectArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub checkpoint: Option<PathBuf>,
    /// Build a fresh model from a preset instead of reading a checkpoint.
    #[arg(long)]
    pub preset: Option<String>,
}

/// Parameter table: one line per tensor, then the total.
pub fn cmd_inspect(args: &InspectArgs) -> Result<String> {
    let (model, title) = match (&args.checkpoint, &args.preset) {
        (Some(path), _) => {
            // surface format errors before config errors
            read_tensor_file(path)?;
            let ck = load_checkpoint(path)?;
            (ck.state.model, format!("{} (step {})", path.display(), ck.state.step))
        }
        (None, Some(name)) => {
            if !PRESETS.contains(&name.as_str()) {
                return Err(CliError::Config(format!("unknown preset `{name}`")));
            }
            let config = RunConfig::preset(name)?;
            (Model::new(config.model_config(), 0)?, format!("preset {name}"))
        }
        (None, None) => return Err(CliError::Config("pass --checkpoint or --preset".into())),
    };
    let mut out = format!("{title}\n");
    for (name, t) in model.tensor_names().iter().zip(model.tensors()) {
        out += &format!("{name:<28} {:<18} {:>10}\n", format!("{:?}", t.shape()), t.len());
    }
    out += &format!("total {}\n", model.parameter_count());
    Ok(out)
}
