//! Stochastic ascent of the log-density using denoiser residuals, and the
//! coarse-to-fine wavelet conditional cascade built on it.
//!
//! Each iteration takes `d = f(x) - x` as a step along `σ²∇log p`, reads the
//! effective noise level `σ² = ‖d‖²/N` off the residual, moves a fraction
//! `h` of the way and re-injects `γ² = ((1-βh)² - (1-h)²)σ²` of fresh noise,
//! so the noise level shrinks by roughly `1 - βh` per step. No schedule is
//! needed: the step sizes come from the residual magnitude.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{ConditionalDenoiser, Conditioned, Denoiser};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::{build_pyramid, collapse_pyramid, haar_synthesis_step, DETAIL_CHANNELS};

/// Sampler hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Fraction of the residual applied per step, in `(0, 1]`.
    pub step: f64,
    /// Stochasticity in `(0, 1]`; 1 injects no noise.
    pub beta: f64,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            step: 0.01,
            beta: 0.1,
            sigma_start: 1.0,
            sigma_end: 0.01,
            max_iters: 10_000,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::config(format!("step size h = {} not in (0, 1]", self.step)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!("beta = {} not in (0, 1]", self.beta)));
        }
        if !(self.sigma_end > 0.0 && self.sigma_end < self.sigma_start) {
            return Err(Error::config(format!(
                "need 0 < sigma_end < sigma_start, got {} and {}",
                self.sigma_end, self.sigma_start
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be positive"));
        }
        Ok(())
    }

    /// `γ²/σ²`, non-negative for every valid `h` and `β`.
    pub fn injection_ratio(&self) -> f64 {
        (1.0 - self.beta * self.step).powi(2) - (1.0 - self.step).powi(2)
    }

    pub fn with_seed(self, seed: u64) -> Self {
        SamplerConfig { seed, ..self }
    }
}

/// Derives independent per-chain seeds from one base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One iteration of the sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub norm_d: f64,
}

/// Per-iteration record of a sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub steps: Vec<TraceStep>,
    pub iterations: usize,
    pub converged: bool,
    pub image: Tensor<f64>,
}

impl SampleTrace {
    /// CSV with header `t,sigma_t,gamma_t,norm_d_t`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,sigma_t,gamma_t,norm_d_t")?;
        for s in &self.steps {
            writeln!(out, "{},{:e},{:e},{:e}", s.t, s.sigma, s.gamma, s.norm_d)?;
        }
        Ok(())
    }
}

/// Runs the ascent from `x₀ ~ N(0, σ₀² I)` on images of `shape`.
pub fn sample_score_ascent<D: Denoiser + ?Sized>(
    denoiser: &D,
    shape: &[usize],
    cfg: &SamplerConfig,
) -> Result<(Tensor<f64>, SampleTrace)> {
    sample_projected(denoiser, shape, cfg, |_| Ok(()))
}

/// Same iteration with `project` applied to the initial draw and after every
/// update, which keeps the iterate on an affine constraint set.
pub fn sample_projected<D, P>(
    denoiser: &D,
    shape: &[usize],
    cfg: &SamplerConfig,
    mut project: P,
) -> Result<(Tensor<f64>, SampleTrace)>
where
    D: Denoiser + ?Sized,
    P: FnMut(&mut Tensor<f64>) -> Result<()>,
{
    cfg.validate()?;
    let ratio = cfg.injection_ratio();
    if ratio < 0.0 {
        return Err(Error::Invariant(format!("γ²/σ² = {ratio} < 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::<f64>::randn(shape, cfg.sigma_start, &mut rng);
    project(&mut x)?;
    let n = x.len() as f64;
    let mut steps = Vec::new();
    let mut sigma = cfg.sigma_start;
    let mut t = 0;
    while sigma >= cfg.sigma_end {
        if t == cfg.max_iters {
            return Err(Error::NonConvergence(Box::new(SampleTrace {
                steps,
                iterations: t,
                converged: false,
                image: x,
            })));
        }
        t += 1;
        let fx = denoiser.denoise(&x)?;
        let d = fx.sub(&x)?;
        let norm_d = d.norm();
        sigma = norm_d / n.sqrt();
        let gamma2 = ratio * sigma * sigma;
        if gamma2 < 0.0 || !gamma2.is_finite() {
            return Err(Error::Invariant(format!("γ² = {gamma2} at iteration {t}")));
        }
        let gamma = gamma2.sqrt();
        let z = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        x.axpy(cfg.step, &d)?;
        x.axpy(gamma, &z)?;
        project(&mut x)?;
        x.check_finite("sampler iterate")?;
        steps.push(TraceStep {
            t,
            sigma,
            gamma,
            norm_d,
        });
    }
    let trace = SampleTrace {
        steps,
        iterations: t,
        converged: true,
        image: x.clone(),
    };
    Ok((x, trace))
}

/// Samples detail coefficients from `p(x̄_j | x_j)` with the conditioning
/// band held fixed.
pub fn sample_conditional<D: ConditionalDenoiser + ?Sized>(
    denoiser: &D,
    lowpass: &Tensor<f64>,
    cfg: &SamplerConfig,
) -> Result<(Tensor<f64>, SampleTrace)> {
    let (c, m, n) = lowpass.dims3()?;
    if c != 1 {
        return Err(Error::dim(format!(
            "conditioning band must have one channel, got {c}"
        )));
    }
    let f = Conditioned {
        inner: denoiser,
        lowpass,
    };
    sample_score_ascent(&f, &[DETAIL_CHANNELS, m, n], cfg)
}

/// Result of [`synthesize_cascade`].
#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub image: Tensor<f64>,
    /// Traces ordered from the coarsest scale to the finest.
    pub traces: Vec<SampleTrace>,
}

/// Coarse-to-fine synthesis: for `j = J..1`, draw the scale-`j` details
/// conditioned on `x_j` and invert one Haar step. `models[j-1]` is the
/// scale-`j` conditional denoiser.
pub fn synthesize_cascade<D: ConditionalDenoiser>(
    models: &[D],
    lowpass: &Tensor<f64>,
    cfg: &SamplerConfig,
) -> Result<CascadeOutput> {
    if models.is_empty() {
        return Err(Error::config("cascade needs at least one conditional model"));
    }
    let (c, _, _) = lowpass.dims3()?;
    if c != 1 {
        return Err(Error::config(format!(
            "terminal low-pass must have one channel, got {c}"
        )));
    }
    let mut x = lowpass.clone();
    let mut traces = Vec::with_capacity(models.len());
    for j in (1..=models.len()).rev() {
        let scale_cfg = cfg.with_seed(derive_seed(cfg.seed, j as u64));
        let (details, trace) = sample_conditional(&models[j - 1], &x, &scale_cfg)?;
        x = haar_synthesis_step(&details, &x)?;
        traces.push(trace);
    }
    Ok(CascadeOutput { image: x, traces })
}

/// Samples full-resolution images constrained to have Haar low-pass band
/// `lowpass` at depth `depth`, using a pixel-domain denoiser. The iterate
/// is projected onto the constraint after every step.
pub fn superres_pixel_constrained<D: Denoiser + ?Sized>(
    denoiser: &D,
    lowpass: &Tensor<f64>,
    depth: usize,
    cfg: &SamplerConfig,
) -> Result<(Tensor<f64>, SampleTrace)> {
    let (c, m, n) = lowpass.dims3()?;
    if c != 1 || m != n {
        return Err(Error::dim(format!(
            "measurement must be a square single-channel band, got {:?}",
            lowpass.shape()
        )));
    }
    if depth == 0 {
        return sample_score_ascent(denoiser, &[1, m, m], cfg);
    }
    let side = m << depth;
    let project = |x: &mut Tensor<f64>| -> Result<()> {
        let mut p = build_pyramid(x, depth)?;
        p.lowpass = lowpass.clone();
        *x = collapse_pyramid(&p)?;
        Ok(())
    };
    sample_projected(denoiser, &[1, side, side], cfg, project)
}
