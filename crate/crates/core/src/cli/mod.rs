//! Config-driven experiment runner.
//!
//! Every subcommand reads one TOML document (see [`ExperimentConfig`]),
//! writes its artifacts plus `config.resolved.toml` into the output
//! directory and appends a line to `manifest.jsonl` there.
//!
//! Exit codes: 0 success, 1 verification failure, 2 config error,
//! 3 numeric abort.

mod commands;
mod config;
mod manifest;
mod plot;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::grad::GradError;
use crate::model::ModelError;
use crate::sampler::SamplerError;

pub use config::{
    toy_reward, BenchSection, EvadeSection, ExperimentConfig, FinetuneSection, Model, ModelSource,
    OptimizeSection, VerifySection, BUNDLED_CHECKPOINT, TOY_MODE_CENTER,
};
pub use manifest::{stable_digest, ArtifactRecord, RunManifest, MANIFEST_FILE};
pub use plot::{LinePlot, Series};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Parser)]
#[command(name = "sdo", version, about = "Toy diffusion sampling and gradient experiments")]
pub struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory; overrides the config. Defaults to `runs/<command>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a denoiser by score matching and save a checkpoint.
    Train,
    /// Picard equivalence, oracle agreement and decomposition checks.
    Verify,
    /// Gradient norm, tape size and timing over step counts.
    Bench,
    /// Latent steering, or classifier evasion with `[optimize.evade]`.
    Optimize,
    /// Reward fine-tuning of the model parameters.
    Finetune,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Verify => "verify",
            Command::Bench => "bench",
            Command::Optimize => "optimize",
            Command::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diverged { .. } => CliError::Numeric(e.to_string()),
            ModelError::Tape(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            SamplerError::Model(m) => m.into(),
            SamplerError::Io(io) => CliError::Io(io),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<GradError> for CliError {
    fn from(e: GradError) -> Self {
        match e {
            GradError::NonFinite { .. } | GradError::Singular | GradError::Tape(_) => {
                CliError::Numeric(e.to_string())
            }
            GradError::Model(m) => m.into(),
            GradError::Sampler(s) => s.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

/// Settings shared by every subcommand after flag/config precedence.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub command: Command,
    pub seed: u64,
    pub out: PathBuf,
    pub quiet: bool,
}

impl RunContext {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Parse the config, apply flag precedence and run the subcommand.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| Path::new("runs").join(cli.command.name()));
    config.seed = Some(seed);
    config.out = None;
    let ctx = RunContext {
        command: cli.command,
        seed,
        out,
        quiet: cli.quiet,
    };
    commands::execute(&ctx, &config)
}

/// Entry point of the `sdo` binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_in_any_position() {
        let cli = Cli::try_parse_from(["sdo", "--seed", "4", "bench", "--quiet", "--out", "x"]).unwrap();
        assert_eq!(cli.command, Command::Bench);
        assert_eq!(cli.seed, Some(4));
        assert!(cli.quiet);
        assert_eq!(cli.out, Some(PathBuf::from("x")));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Verify(String::new()).exit_code(), 1);
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Numeric(String::new()).exit_code(), 3);
        let diverged: CliError = ModelError::Diverged { step: 3, loss: f64::NAN }.into();
        assert_eq!(diverged.exit_code(), 3);
        let request: CliError = GradError::TooLarge { size: 9, limit: 1 }.into();
        assert_eq!(request.exit_code(), 2);
        assert_eq!(main_with_args(["sdo", "--seed", "x", "train"]), 2);
    }
}
