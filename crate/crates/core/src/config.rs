//! Experiment configuration files.
//!
//! Plain `key = value` lines grouped under `[model]`, `[data]`, `[sampler]`
//! and `[experiment]`; `#` starts a comment. Unknown sections and keys are
//! errors. Relative paths are taken relative to the working directory.
//!
//! ```text
//! [model]
//! lowpass = lowpass.ckpt
//! conditional = cond1.ckpt, cond2.ckpt   # scale 1 first
//! depth = 2
//!
//! [data]
//! source = toy-faces
//! side = 64
//! test = 50
//!
//! [experiment]
//! noise_grid = 0.05, 0.1, 0.2, 0.4, 0.7, 1.0
//! output = out
//! seed = 7
//! ```

use std::path::{Path, PathBuf};

use crate::data::{DataSource, DatasetSpec};
use crate::error::{Error, Result};
use crate::oracle::{Basis, GaussianModel, Spectrum};
use crate::sampler::SamplerConfig;
use crate::train::{TrainConfig, TrainMode};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "WAVESCORE_THREADS";

/// Architecture family built by `train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Lowpass,
    Conditional,
    Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    /// Checkpoint of the low-pass denoiser.
    pub lowpass: Option<PathBuf>,
    /// Conditional checkpoints, scale 1 first.
    pub conditional: Vec<PathBuf>,
    /// Checkpoint of a full-resolution denoiser.
    pub pixel: Option<PathBuf>,
    /// Number of wavelet scales `J`.
    pub depth: usize,
    /// Architecture trained by `train`.
    pub kind: ModelKind,
    pub width: usize,
    /// Conv layer count; defaults to 20 for low-pass and 21 otherwise.
    pub layers: Option<usize>,
    pub rf: usize,
    /// Scale a conditional model is trained for.
    pub scale: usize,
    /// Where `train` writes its checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Gaussian oracle used by `oracle-check` and oracle pipelines.
    pub oracle_basis: Basis,
    pub oracle_spectrum: Spectrum,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            lowpass: None,
            conditional: Vec::new(),
            pixel: None,
            depth: 2,
            kind: ModelKind::Lowpass,
            width: 64,
            layers: None,
            rf: 13,
            scale: 1,
            checkpoint: None,
            oracle_basis: Basis::Haar { depth: 2 },
            oracle_spectrum: Spectrum::PowerLaw(2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSection {
    pub output: PathBuf,
    pub seed: u64,
    pub noise_grid: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub max_steps: Option<usize>,
    pub patch: Option<usize>,
    pub flip: bool,
    pub frozen_norm_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        ExperimentSection {
            output: PathBuf::from("out"),
            seed: 0,
            noise_grid: vec![0.05, 0.1, 0.2, 0.4, 0.7, 1.0],
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            max_steps: t.max_steps,
            patch: t.patch,
            flip: t.flip,
            frozen_norm_steps: t.frozen_norm_steps,
            sigma_min: t.sigma_min,
            sigma_max: t.sigma_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DatasetSpec,
    pub sampler: SamplerConfig,
    pub experiment: ExperimentSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSection::default(),
            data: DatasetSpec::toy_faces(64, 1000, 100, 0),
            sampler: SamplerConfig::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

fn perr(location: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        location: location.to_string(),
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(location: &str, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| perr(location, format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn optional<T: std::str::FromStr>(location: &str, key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        num(location, key, v).map(Some)
    }
}

fn list<T: std::str::FromStr>(location: &str, key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(location, key, s))
        .collect()
}

fn with_location(location: &str, e: Error) -> Error {
    match e {
        Error::Parse { message, .. } | Error::Config(message) => perr(location, message),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let location = format!("{origin}:{}", n + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "model" | "data" | "sampler" | "experiment") {
                    return Err(perr(&location, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| perr(&location, format!("expected `key = value`, got `{line}`")))?;
            let section = section
                .as_deref()
                .ok_or_else(|| perr(&location, "key outside of any section"))?;
            cfg.set(section, key.trim(), value.trim(), &location)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Sets one key. Also used for command-line overrides.
    pub fn set(&mut self, section: &str, key: &str, v: &str, location: &str) -> Result<()> {
        let unknown = || perr(location, format!("unknown key `{key}` in [{section}]"));
        match section {
            "model" => {
                let m = &mut self.model;
                match key {
                    "lowpass" => m.lowpass = Some(PathBuf::from(v)),
                    "conditional" => {
                        m.conditional = v
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(PathBuf::from)
                            .collect()
                    }
                    "pixel" => m.pixel = Some(PathBuf::from(v)),
                    "depth" => m.depth = num(location, key, v)?,
                    "kind" => {
                        m.kind = match v {
                            "lowpass" => ModelKind::Lowpass,
                            "conditional" => ModelKind::Conditional,
                            "pixel" => ModelKind::Pixel,
                            _ => return Err(perr(location, format!("unknown model kind `{v}`"))),
                        }
                    }
                    "width" => m.width = num(location, key, v)?,
                    "layers" => m.layers = optional(location, key, v)?,
                    "rf" => m.rf = num(location, key, v)?,
                    "scale" => m.scale = num(location, key, v)?,
                    "checkpoint" => m.checkpoint = Some(PathBuf::from(v)),
                    "oracle_basis" => m.oracle_basis = Basis::parse(v).map_err(|e| with_location(location, e))?,
                    "oracle_spectrum" => {
                        m.oracle_spectrum = Spectrum::parse(v).map_err(|e| with_location(location, e))?
                    }
                    _ => return Err(unknown()),
                }
            }
            "data" => {
                let d = &mut self.data;
                match key {
                    "source" => d.source = DataSource::parse(v),
                    "side" => d.side = num(location, key, v)?,
                    "train" => d.train_count = num(location, key, v)?,
                    "test" => d.test_count = num(location, key, v)?,
                    "seed" => d.seed = num(location, key, v)?,
                    _ => return Err(unknown()),
                }
            }
            "sampler" => {
                let s = &mut self.sampler;
                match key {
                    "step" => s.step = num(location, key, v)?,
                    "beta" => s.beta = num(location, key, v)?,
                    "sigma_start" => s.sigma_start = num(location, key, v)?,
                    "sigma_end" => s.sigma_end = num(location, key, v)?,
                    "max_iters" => s.max_iters = num(location, key, v)?,
                    "seed" => s.seed = num(location, key, v)?,
                    _ => return Err(unknown()),
                }
            }
            "experiment" => {
                let e = &mut self.experiment;
                match key {
                    "output" => e.output = PathBuf::from(v),
                    "seed" => e.seed = num(location, key, v)?,
                    "noise_grid" => e.noise_grid = list(location, key, v)?,
                    "batch_size" => e.batch_size = num(location, key, v)?,
                    "epochs" => e.epochs = num(location, key, v)?,
                    "learning_rate" => e.learning_rate = num(location, key, v)?,
                    "max_steps" => e.max_steps = optional(location, key, v)?,
                    "patch" => e.patch = optional(location, key, v)?,
                    "flip" => e.flip = num(location, key, v)?,
                    "frozen_norm_steps" => e.frozen_norm_steps = num(location, key, v)?,
                    "sigma_min" => e.sigma_min = num(location, key, v)?,
                    "sigma_max" => e.sigma_max = num(location, key, v)?,
                    _ => return Err(unknown()),
                }
            }
            _ => return Err(perr(location, format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// Overrides every seed at once: the experiment, data and sampler seeds
    /// are derived from `seed` so one flag reproduces a whole run.
    pub fn override_seed(&mut self, seed: u64) {
        self.experiment.seed = seed;
        self.data.seed = seed;
        self.sampler.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.experiment.noise_grid.iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::config(format!("noise grid values must be ≥ 0, got {s}")));
        }
        if self.model.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        self.train_config().validate()?;
        self.sampler.validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let e = &self.experiment;
        TrainConfig {
            batch_size: e.batch_size,
            sigma_min: e.sigma_min,
            sigma_max: e.sigma_max,
            learning_rate: e.learning_rate,
            epochs: e.epochs,
            max_steps: e.max_steps,
            patch: e.patch,
            flip: e.flip,
            frozen_norm_steps: e.frozen_norm_steps,
            seed: e.seed,
            ..TrainConfig::default()
        }
    }

    pub fn train_mode(&self) -> TrainMode {
        match self.model.kind {
            ModelKind::Lowpass => TrainMode::Lowpass {
                depth: self.model.depth,
            },
            ModelKind::Conditional => TrainMode::Conditional {
                scale: self.model.scale,
            },
            ModelKind::Pixel => TrainMode::Lowpass { depth: 0 },
        }
    }

    pub fn oracle(&self) -> Result<GaussianModel> {
        GaussianModel::new(self.model.oracle_basis, self.data.side, &self.model.oracle_spectrum)
    }
}

/// Sizes the global worker pool from `WAVESCORE_THREADS`, if set. Returns
/// the thread count in effect.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV}={v} is not a positive integer")))?;
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections() {
        let text = "# demo\n[model]\nlowpass = a.ckpt\nconditional = b.ckpt, c.ckpt\ndepth = 2\n\
                    oracle_basis = fourier\n[data]\nsource = gaussian-field:1.5\nside = 32\n\
                    [sampler]\nbeta = 0.5  # inline\n[experiment]\nnoise_grid = 0.1, 0.2\nmax_steps = 40\n";
        let c = ExperimentConfig::parse(text, "t.cfg").unwrap();
        assert_eq!(c.model.conditional.len(), 2);
        assert_eq!(c.model.oracle_basis, Basis::Fourier);
        assert_eq!(c.data.source, DataSource::GaussianField { alpha: 1.5 });
        assert_eq!(c.sampler.beta, 0.5);
        assert_eq!(c.experiment.noise_grid, vec![0.1, 0.2]);
        assert_eq!(c.experiment.max_steps, Some(40));
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_located() {
        let err = ExperimentConfig::parse("[data]\nsize = 3\n", "x.cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x.cfg:2") && msg.contains("size"), "{msg}");
        assert!(ExperimentConfig::parse("[nope]\n", "x").is_err());
        assert!(ExperimentConfig::parse("seed = 1\n", "x").is_err());
        assert!(ExperimentConfig::parse("[data]\nside = big\n", "x").is_err());
    }

    #[test]
    fn seed_override() {
        let mut c = ExperimentConfig::default();
        c.override_seed(42);
        assert_eq!((c.experiment.seed, c.data.seed, c.sampler.seed), (42, 42, 42));
    }

    #[test]
    fn negative_grid_rejected() {
        let c = ExperimentConfig::parse("[experiment]\nnoise_grid = -0.1\n", "x").unwrap();
        assert!(c.validate().is_err());
    }
}
