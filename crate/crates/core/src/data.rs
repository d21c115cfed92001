//! Training and test images: directories of grayscale files or synthetic
//! generators.
//!
//! The toy-face generator gives a non-stationary ensemble with global
//! geometry (a head, two eyes and a mouth at jittered positions on a smooth
//! background). The Gaussian-field generator gives a stationary ensemble.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::read_gray;
use crate::oracle::{Basis, GaussianModel, Spectrum};
use crate::sampler::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Directory(PathBuf),
    ToyFaces,
    /// Stationary field with a power-law spectrum of the given exponent.
    GaussianField { alpha: f64 },
}

impl DataSource {
    /// Parses `toy-faces`, `gaussian-field:alpha` or a directory path.
    pub fn parse(s: &str) -> Self {
        match s {
            "toy-faces" => DataSource::ToyFaces,
            _ => match s
                .strip_prefix("gaussian-field:")
                .and_then(|a| a.parse::<f64>().ok())
            {
                Some(alpha) => DataSource::GaussianField { alpha },
                None => DataSource::Directory(PathBuf::from(s)),
            },
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Directory(p) => write!(f, "{}", p.display()),
            DataSource::ToyFaces => write!(f, "toy-faces"),
            DataSource::GaussianField { alpha } => write!(f, "gaussian-field:{alpha}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub side: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn toy_faces(side: usize, train_count: usize, test_count: usize, seed: u64) -> Self {
        DatasetSpec {
            source: DataSource::ToyFaces,
            side,
            train_count,
            test_count,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Tensor<f64>>,
    pub test: Vec<Tensor<f64>>,
}

impl Dataset {
    /// Materializes the images. Synthetic images are generated from
    /// per-image seeds, so the test split never overlaps the train split.
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        if spec.side == 0 {
            return Err(Error::config("image side must be positive"));
        }
        let total = spec.train_count + spec.test_count;
        let images: Vec<Tensor<f64>> = match &spec.source {
            DataSource::Directory(dir) => load_directory(dir, spec.side, total)?,
            DataSource::ToyFaces => (0..total)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
                    toy_face(spec.side, &mut rng)
                })
                .collect(),
            DataSource::GaussianField { alpha } => {
                let model =
                    GaussianModel::new(Basis::Fourier, spec.side, &Spectrum::PowerLaw(*alpha))?;
                (0..total)
                    .map(|i| gaussian_field(&model, derive_seed(spec.seed, i as u64)))
                    .collect::<Result<_>>()?
            }
        };
        let mut train = images;
        let test = train.split_off(spec.train_count);
        Ok(Dataset { train, test })
    }
}

fn load_directory(dir: &Path, side: usize, count: usize) -> Result<Vec<Tensor<f64>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
        })
        .collect();
    paths.sort();
    if paths.len() < count {
        return Err(Error::config(format!(
            "{} holds {} images, {count} requested",
            dir.display(),
            paths.len()
        )));
    }
    paths
        .iter()
        .take(count)
        .map(|p| {
            let img = read_gray(p)?;
            if img.shape() != [1, side, side] {
                return Err(Error::dim(format!(
                    "{} is {:?}, expected [1, {side}, {side}]",
                    p.display(),
                    img.shape()
                )));
            }
            Ok(img)
        })
        .collect()
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    // 1 inside (x < -edge), 0 outside (x > edge)
    let t = ((edge - x) / (2.0 * edge)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// One synthetic face in `[0, 1]`.
pub fn toy_face<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Tensor<f64> {
    let n = side as f64;
    let edge = 1.0 / n;
    let bg = rng.gen_range(0.15..0.45);
    let (gx, gy) = (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    let (cx, cy) = (0.5 + rng.gen_range(-0.06..0.06), 0.5 + rng.gen_range(-0.06..0.06));
    let (ra, rb) = (rng.gen_range(0.26..0.34), rng.gen_range(0.33..0.42));
    let skin = rng.gen_range(0.55..0.85);
    let shade = rng.gen_range(-0.1..0.1);
    let eye_dx = rng.gen_range(0.09..0.14);
    let eye_dy = rng.gen_range(0.06..0.11);
    let eye_r = rng.gen_range(0.035..0.055);
    let eye_dark = rng.gen_range(0.3..0.5);
    let mouth_dy = rng.gen_range(0.12..0.19);
    let mouth_w = rng.gen_range(0.07..0.14);
    let mouth_h = rng.gen_range(0.015..0.03);
    let mouth_dark = rng.gen_range(0.2..0.4);

    let mut data = Vec::with_capacity(side * side);
    for r in 0..side {
        let v = (r as f64 + 0.5) / n;
        for c in 0..side {
            let u = (c as f64 + 0.5) / n;
            let mut val = bg + gx * (u - 0.5) + gy * (v - 0.5);
            let head_d = (((u - cx) / ra).powi(2) + ((v - cy) / rb).powi(2)).sqrt() - 1.0;
            let head = smoothstep(edge / ra.min(rb), head_d);
            let face = skin + shade * (v - cy) / rb;
            val = val * (1.0 - head) + face * head;
            for s in [-1.0, 1.0] {
                let d = ((u - cx - s * eye_dx).powi(2) + (v - cy + eye_dy).powi(2)).sqrt() - eye_r;
                val -= eye_dark * smoothstep(edge, d) * head;
            }
            let md = ((u - cx).abs() - mouth_w).max((v - cy - mouth_dy).abs() - mouth_h);
            val -= mouth_dark * smoothstep(edge, md) * head;
            data.push(val.clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(&[1, side, side], data).expect("side×side buffer")
}

/// Stationary field sample mapped into `[0, 1]` around mid-gray.
pub fn gaussian_field(model: &GaussianModel, seed: u64) -> Result<Tensor<f64>> {
    let x = model.sample_exact(seed)?;
    let std = (model.variances().iter().sum::<f64>() / model.dim() as f64).sqrt();
    let gain = if std > 0.0 { 0.15 / std } else { 0.0 };
    Ok(x.map(|v| (0.5 + gain * v).clamp(0.0, 1.0)))
}
