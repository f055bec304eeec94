//! `partwarp`: dataset synthesis, training, the inference modes and
//! evaluation from one binary.
//!
//! Settings come from a TOML file (`--config`). Precedence, lowest first:
//! built-in defaults, the file, `PARTWARP_DATA_ROOT`, `--set key=value`,
//! then the dedicated flags (`--seed`, `--data`, ...).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "partwarp", version, about = "Part-structured latent person image generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; receives the artifacts, `manifest.json` and the
    /// resolved `config.toml`.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset root, overriding `data.root`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct Model {
    /// Trained bundle (`.safetensors`).
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural mannequin dataset into `--out`.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Unwrap one image into a texture atlas.
    ExtractTexture {
        #[command(flatten)]
        common: Common,
        /// Frame stem (`<stem>.img.png` + `<stem>.iuv.png`).
        #[arg(long)]
        frame: String,
    },
    /// Train encoder, generator and discriminator.
    Train {
        #[command(flatten)]
        common: Common,
        /// Total step budget, overriding `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint of an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Random appearances on a fixed pose.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        /// Pose: a frame stem or an IUV png.
        #[arg(long)]
        pose: String,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Re-render a source frame's appearance in other poses.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        source: String,
        /// Target pose; repeatable.
        #[arg(long = "target", required = true)]
        targets: Vec<String>,
    },
    /// Resample the latents of one part group only.
    Parts {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        pose: String,
        /// Group name, `all`, `none` or a comma list of part indices.
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        /// Encode this frame for the fixed rows instead of drawing them.
        #[arg(long)]
        source: Option<String>,
    },
    /// Body appearance from one frame with garment parts from another.
    Garment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        body: String,
        #[arg(long)]
        garment: String,
        /// Parts taken from the garment frame.
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        pose: String,
    },
    /// Decode a straight line between two encodings.
    Interp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        first: String,
        #[arg(long)]
        second: String,
        #[arg(long)]
        pose: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Metrics report for a checkpoint, or diversity over sample outputs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "samples")]
        checkpoint: Option<PathBuf>,
        /// Output directory of an earlier `sample`/`parts` run; repeatable.
        /// Tiles with the same pose are pooled across directories.
        #[arg(long = "samples", conflicts_with = "checkpoint")]
        samples: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
