//! The `must` command-line tool: adaptation runs, visualization dumps and
//! the synthetic fixture.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use must_core::fixture::FixtureConfig;

pub mod commands;
pub mod config;
mod error;

pub use config::AdaptOptions;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "must", version, about = "Adapt a zero-shot image classifier with unlabeled images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adapt the zero-shot model on a manifest's images. A repeated flag
    /// takes its last value.
    #[command(args_override_self = true)]
    Adapt {
        /// TOML file with the same keys as the flags; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        options: Box<AdaptOptions>,
    },
    /// Write original / masked / recovered triplets for each image.
    RecoverDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        mask_ratio: f64,
        #[arg(long, default_value_t = 8)]
        mask_patch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write [CLS] attention overlays and a heatmaps.json for each image.
    AttentionDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Render the synthetic shapes dataset and pretrain its backbone.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        prompt_noise: Option<f64>,
    },
}

/// Runs one command and returns what it printed as a JSON value.
pub fn execute(command: Command) -> Result<serde_json::Value, CliError> {
    match command {
        Command::Adapt { config, options } => {
            let merged = match config {
                Some(path) => AdaptOptions::load(&path)?.overlaid(&options),
                None => *options,
            };
            Ok(json(&commands::cmd_adapt(&merged)?))
        }
        Command::RecoverDump { checkpoint, out, mask_ratio, mask_patch_size, seed, images } => {
            let opts = commands::RecoverOptions { mask_ratio, mask_patch_size, seed };
            Ok(json(&commands::cmd_recover_dump(&checkpoint, &images, &out, &opts)?))
        }
        Command::AttentionDump { checkpoint, out, images } => {
            let maps = commands::cmd_attention_dump(&checkpoint, &images, &out)?;
            let files: Vec<&str> = maps.iter().map(|m| m.overlay.as_str()).collect();
            Ok(json(&files))
        }
        Command::Fixture { out, seed, pretrain_epochs, prompt_noise } => {
            let mut cfg = FixtureConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = pretrain_epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(n) = prompt_noise {
                cfg.prompt_noise = n;
            }
            let files = commands::cmd_fixture(&cfg, &out)?;
            Ok(serde_json::json!({
                "manifest": files.manifest,
                "embeddings": files.embeddings,
                "init_checkpoint": files.init_checkpoint,
                "zero_shot_accuracy": files.zero_shot_accuracy,
            }))
        }
    }
}

fn json<T: serde::Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("output serializes")
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code: 0 on success, 1 on a runtime failure,
/// 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("json prints"));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
