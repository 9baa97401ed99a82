use clap::{Parser, Subcommand};

use diffnca::commands::{
    cmd_eval_export, cmd_inpaint, cmd_inspect, cmd_lowpass_demo, cmd_sample, cmd_tile, cmd_train, cmd_upscale,
    EvalExportArgs, InpaintArgs, InspectArgs, LowpassArgs, SampleArgs, TileArgs, TrainArgs, UpscaleArgs,
};
use diffnca::Result;

/// Diffusion models whose denoiser is a neural cellular automaton.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config.
    Train(TrainArgs),
    /// Sample one image, at any size.
    Sample(SampleArgs),
    /// Regenerate a masked region of an image.
    Inpaint(InpaintArgs),
    /// Double the resolution of an image.
    Upscale(UpscaleArgs),
    /// Synthesize a large canvas with a Diff-NCA.
    Tile(TileArgs),
    /// Show what a centred block of Fourier coefficients keeps.
    LowpassDemo(LowpassArgs),
    /// Export generated and real test images for external FID/KID tools.
    EvalExport(EvalExportArgs),
    /// Print parameter shapes and counts.
    Inspect(InspectArgs),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let step = cmd_train(&a)?;
            println!("trained to step {step}");
        }
        Command::Sample(a) => {
            cmd_sample(&a)?;
            println!("wrote {}", a.out.display());
        }
        Command::Inpaint(a) => {
            cmd_inpaint(&a)?;
            println!("wrote {}", a.out.display());
        }
        Command::Upscale(a) => {
            cmd_upscale(&a)?;
            println!("wrote {}", a.out.display());
        }
        Command::Tile(a) => {
            cmd_tile(&a)?;
            println!("wrote {}", a.out.display());
        }
        Command::LowpassDemo(a) => {
            let kept = cmd_lowpass_demo(&a)?;
            println!(
                "kept {:.2}% of the coefficients; wrote {}",
                100.0 * kept,
                a.out_dir.display()
            );
        }
        Command::EvalExport(a) => {
            cmd_eval_export(&a)?;
            println!("wrote {} image pairs to {}", a.n, a.out_dir.display());
        }
        Command::Inspect(a) => print!("{}", cmd_inspect(&a)?),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
