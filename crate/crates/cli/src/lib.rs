//! The `wavescore` command-line tool.
//!
//! Every subcommand reads an optional experiment config (`--config`) and
//! applies flag overrides on top. Exit codes: 0 success, 1 usage error,
//! 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use wavescore_core::config::{configure_threads, ExperimentConfig};
use wavescore_core::Error;

mod commands;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "wavescore", version, about = "Wavelet conditional score models at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Config override, e.g. `--set data.side=32`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

/// Denoiser used by `denoise`, `eval-psnr` and `jacobian`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Pipeline {
    /// Low-pass CNN plus per-scale conditional CNNs.
    Multiscale,
    /// Single full-resolution CNN.
    Pixel,
    /// Blind Wiener filter of the configured Gaussian model.
    Oracle,
}

/// Source of conditional models for `synthesize` and `superres`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Prior {
    /// Trained checkpoints from the config.
    Trained,
    /// Exact Gaussian oracle from the config.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuperresMethod {
    /// Coarse-to-fine conditional sampling.
    Cascade,
    /// Full-resolution sampling projected onto the low-pass measurement.
    Pixel,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser and write a checkpoint plus loss CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (defaults to the config's `model.checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Denoise one image.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Add Gaussian noise of this level before denoising.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, value_enum, default_value_t = Pipeline::Multiscale)]
        pipeline: Pipeline,
    },
    /// Draw an unconditional sample with score ascent.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Pipeline::Pixel)]
        pipeline: Pipeline,
    },
    /// Stochastic super-resolution of an image's low-pass band.
    Superres {
        #[command(flatten)]
        common: Common,
        /// Full-resolution image whose low-pass band is the measurement.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = SuperresMethod::Cascade)]
        method: SuperresMethod,
        #[arg(long, value_enum, default_value_t = Prior::Trained)]
        prior: Prior,
    },
    /// Coarse-to-fine synthesis from a sampled low-pass band.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Prior::Trained)]
        prior: Prior,
    },
    /// PSNR of a denoising pipeline across a noise grid, as CSV.
    EvalPsnr {
        #[command(flatten)]
        common: Common,
        /// Noise levels, replacing the config grid.
        #[arg(long, value_delimiter = ',')]
        sigma: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Pipeline::Multiscale)]
        pipeline: Pipeline,
    },
    /// Adaptive filter (one Jacobian row) of a trained model as a heatmap.
    Jacobian {
        #[command(flatten)]
        common: Common,
        /// Image to linearize around; defaults to the first test image.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Add noise of this level to the input first.
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long, value_enum, default_value_t = Pipeline::Pixel)]
        pipeline: Pipeline,
        #[arg(long)]
        row: Option<usize>,
        #[arg(long)]
        col: Option<usize>,
    },
    /// Verify the closed-form identities on the configured Gaussian model.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Random trials per identity.
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Denoise { common, .. }
            | Command::Sample { common, .. }
            | Command::Superres { common, .. }
            | Command::Synthesize { common, .. }
            | Command::EvalPsnr { common, .. }
            | Command::Jacobian { common, .. }
            | Command::OracleCheck { common, .. } => common,
        }
    }
}

/// Builds the effective config: file (or defaults), `--set` overrides,
/// then `--seed` and `--output`.
pub fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for s in &common.set {
        let (key, value) = s.split_once('=').ok_or_else(|| Error::Parse {
            location: "--set".into(),
            message: format!("expected SECTION.KEY=VALUE, got `{s}`"),
        })?;
        let (section, key) = key.split_once('.').ok_or_else(|| Error::Parse {
            location: "--set".into(),
            message: format!("expected SECTION.KEY, got `{key}`"),
        })?;
        cfg.set(section.trim(), key.trim(), value.trim(), "--set")?;
    }
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &common.output {
        cfg.experiment.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::File {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = configure_threads()
        .and_then(|_| load_config(cli.command.common()))
        .and_then(|cfg| commands::execute(&cli.command, &cfg));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
