//! Closed-form Gaussian image models.
//!
//! Every model is diagonal in an orthonormal basis (pixels, a real Fourier
//! basis, or a Haar pyramid), so the MMSE denoiser, the score of the noisy
//! density and exact samples are all per-coefficient formulas.

use std::f64::consts::PI;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::{build_pyramid, collapse_pyramid, WaveletPyramid, DETAIL_CHANNELS};

/// Orthonormal basis a [`GaussianModel`] is diagonal in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    Pixel,
    /// Separable discrete Hartley basis: real, orthonormal and self-inverse.
    /// A spectrum symmetric under frequency negation gives a stationary
    /// (circulant) covariance.
    Fourier,
    /// Haar pyramid of the given depth. Coefficients are ordered finest
    /// detail band first, then coarser bands, then the low-pass band.
    Haar { depth: usize },
}

impl Basis {
    /// Parses `pixel`, `fourier` or `haar:J`.
    pub fn parse(s: &str) -> Result<Self> {
        let perr = || Error::Parse {
            location: "basis".into(),
            message: format!("expected pixel, fourier or haar:J, got `{s}`"),
        };
        match s.trim() {
            "pixel" => Ok(Basis::Pixel),
            "fourier" => Ok(Basis::Fourier),
            other => {
                let depth = other
                    .strip_prefix("haar:")
                    .and_then(|d| d.trim().parse().ok())
                    .ok_or_else(perr)?;
                Ok(Basis::Haar { depth })
            }
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Basis::Pixel => write!(f, "pixel"),
            Basis::Fourier => write!(f, "fourier"),
            Basis::Haar { depth } => write!(f, "haar:{depth}"),
        }
    }
}

/// How the variance spectrum is generated.
#[derive(Debug, Clone, PartialEq)]
pub enum Spectrum {
    /// Every coefficient has variance `c`.
    White(f64),
    /// Decay with frequency (Fourier) or with scale (Haar) at exponent `alpha`.
    PowerLaw(f64),
    /// Explicit variances in basis order.
    Explicit(Vec<f64>),
}

impl Spectrum {
    /// Parses `white:c`, `powerlaw:alpha` or `csv:v1,v2,...`.
    pub fn parse(s: &str) -> Result<Self> {
        let perr = |m: String| Error::Parse {
            location: "spectrum".into(),
            message: m,
        };
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| perr(format!("expected `kind:value`, got `{s}`")))?;
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| perr(format!("`{v}`: {e}")))
        };
        match kind.trim() {
            "white" => Ok(Spectrum::White(num(arg)?)),
            "powerlaw" => Ok(Spectrum::PowerLaw(num(arg)?)),
            "csv" => Ok(Spectrum::Explicit(
                arg.split(',').map(num).collect::<Result<_>>()?,
            )),
            other => Err(perr(format!("unknown spectrum `{other}`"))),
        }
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Spectrum::White(c) => write!(f, "white:{c}"),
            Spectrum::PowerLaw(a) => write!(f, "powerlaw:{a}"),
            Spectrum::Explicit(v) => {
                write!(f, "csv:")?;
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
        }
    }
}

/// Zero-mean Gaussian over `side×side` images, diagonal in `basis`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    basis: Basis,
    side: usize,
    variances: Vec<f64>,
}

fn hartley_matrix(n: usize) -> Vec<f64> {
    let norm = (n as f64).sqrt().recip();
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        for i in 0..n {
            let a = 2.0 * PI * ((k * i) % n) as f64 / n as f64;
            m[k * n + i] = (a.cos() + a.sin()) * norm;
        }
    }
    m
}

/// `H X H` for the symmetric Hartley matrix `H`.
fn hartley_2d(x: &[f64], n: usize) -> Vec<f64> {
    let h = hartley_matrix(n);
    let mut tmp = vec![0.0; n * n];
    for r in 0..n {
        for k in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += x[r * n + c] * h[k * n + c];
            }
            tmp[r * n + k] = acc;
        }
    }
    let mut out = vec![0.0; n * n];
    for k in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for r in 0..n {
                acc += h[k * n + r] * tmp[r * n + c];
            }
            out[k * n + c] = acc;
        }
    }
    out
}

fn wrapped(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

impl GaussianModel {
    pub fn new(basis: Basis, side: usize, spectrum: &Spectrum) -> Result<Self> {
        if side == 0 {
            return Err(Error::config("image side must be positive"));
        }
        if let Basis::Haar { depth } = basis {
            if depth == 0 || side % (1 << depth) != 0 {
                return Err(Error::dim(format!(
                    "side {side} is not divisible by 2^{depth}"
                )));
            }
        }
        let n = side * side;
        let variances = match spectrum {
            Spectrum::White(c) => vec![*c; n],
            Spectrum::Explicit(v) => {
                if v.len() != n {
                    return Err(Error::dim(format!(
                        "{} variances for {n} coefficients",
                        v.len()
                    )));
                }
                v.clone()
            }
            Spectrum::PowerLaw(alpha) => match basis {
                Basis::Pixel => {
                    return Err(Error::UnsupportedModel(
                        "power-law spectra need the fourier or haar basis".into(),
                    ))
                }
                Basis::Fourier => {
                    let mut v = vec![0.0; n];
                    for u in 0..side {
                        for w in 0..side {
                            let f2 = wrapped(u, side).powi(2) + wrapped(w, side).powi(2);
                            v[u * side + w] = (1.0 + f2).powf(-alpha / 2.0);
                        }
                    }
                    v
                }
                Basis::Haar { depth } => {
                    let mut v = Vec::with_capacity(n);
                    for j in 1..=depth {
                        let m = side >> j;
                        let c = 2f64.powf(-alpha * (depth + 1 - j) as f64);
                        v.extend(std::iter::repeat(c).take(DETAIL_CHANNELS * m * m));
                    }
                    let m = side >> depth;
                    v.extend(std::iter::repeat(1.0).take(m * m));
                    v
                }
            },
        };
        if variances.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::config("variances must be finite and non-negative"));
        }
        Ok(GaussianModel {
            basis,
            side,
            variances,
        })
    }

    /// Haar-diagonal model with one variance per band: `details[j-1]` for
    /// scale `j`, plus the low-pass variance.
    pub fn haar_bands(side: usize, details: &[f64], lowpass: f64) -> Result<Self> {
        let depth = details.len();
        if depth == 0 || side % (1 << depth) != 0 {
            return Err(Error::dim(format!(
                "side {side} is not divisible by 2^{depth}"
            )));
        }
        let mut v = Vec::with_capacity(side * side);
        for (j, &c) in details.iter().enumerate() {
            let m = side >> (j + 1);
            v.extend(std::iter::repeat(c).take(DETAIL_CHANNELS * m * m));
        }
        let m = side >> depth;
        v.extend(std::iter::repeat(lowpass).take(m * m));
        GaussianModel::new(Basis::Haar { depth }, side, &Spectrum::Explicit(v))
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn dim(&self) -> usize {
        self.variances.len()
    }

    fn check_image(&self, y: &Tensor<f64>) -> Result<()> {
        if y.shape() != [1, self.side, self.side] {
            return Err(Error::dim(format!(
                "model over [1, {0}, {0}] given {1:?}",
                self.side,
                y.shape()
            )));
        }
        Ok(())
    }

    /// Image to basis coefficients.
    pub fn analyze(&self, y: &Tensor<f64>) -> Result<Vec<f64>> {
        self.check_image(y)?;
        Ok(match self.basis {
            Basis::Pixel => y.data().to_vec(),
            Basis::Fourier => hartley_2d(y.data(), self.side),
            Basis::Haar { depth } => {
                let p = build_pyramid(y, depth)?;
                let mut v = Vec::with_capacity(self.dim());
                for d in &p.details {
                    v.extend_from_slice(d.data());
                }
                v.extend_from_slice(p.lowpass.data());
                v
            }
        })
    }

    /// Basis coefficients to image.
    pub fn synthesize(&self, coeffs: &[f64]) -> Result<Tensor<f64>> {
        if coeffs.len() != self.dim() {
            return Err(Error::dim(format!(
                "{} coefficients for a model of dimension {}",
                coeffs.len(),
                self.dim()
            )));
        }
        let n = self.side;
        match self.basis {
            Basis::Pixel => Tensor::from_vec(&[1, n, n], coeffs.to_vec()),
            Basis::Fourier => Tensor::from_vec(&[1, n, n], hartley_2d(coeffs, n)),
            Basis::Haar { depth } => {
                let mut off = 0;
                let mut details = Vec::with_capacity(depth);
                for j in 1..=depth {
                    let m = n >> j;
                    let len = DETAIL_CHANNELS * m * m;
                    details.push(Tensor::from_vec(
                        &[DETAIL_CHANNELS, m, m],
                        coeffs[off..off + len].to_vec(),
                    )?);
                    off += len;
                }
                let m = n >> depth;
                let lowpass = Tensor::from_vec(&[1, m, m], coeffs[off..].to_vec())?;
                collapse_pyramid(&WaveletPyramid {
                    lowpass,
                    details,
                    base_size: n,
                })
            }
        }
    }

    /// Exact MMSE estimate `E[x | y]` for `y = x + sigma·z`.
    pub fn wiener_denoise(&self, y: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>> {
        if !(sigma >= 0.0) {
            return Err(Error::config(format!("noise level must be >= 0, got {sigma}")));
        }
        self.check_image(y)?;
        if sigma == 0.0 {
            return Ok(y.clone());
        }
        let s2 = sigma * sigma;
        let coeffs: Vec<f64> = self
            .analyze(y)?
            .iter()
            .zip(&self.variances)
            .map(|(&v, &c)| c / (c + s2) * v)
            .collect();
        self.synthesize(&coeffs)
    }

    /// `∇_y log p(y)` of the noisy density `N(0, C + sigma² I)`.
    pub fn analytic_score(&self, y: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>> {
        if !(sigma >= 0.0) {
            return Err(Error::config(format!("noise level must be >= 0, got {sigma}")));
        }
        let s2 = sigma * sigma;
        if s2 == 0.0 && self.variances.iter().any(|&c| c == 0.0) {
            return Err(Error::SingularModel(
                "zero-variance coefficient with zero noise has no density".into(),
            ));
        }
        let coeffs: Vec<f64> = self
            .analyze(y)?
            .iter()
            .zip(&self.variances)
            .map(|(&v, &c)| -v / (c + s2))
            .collect();
        self.synthesize(&coeffs)
    }

    /// `Σ coeff²/c` over coefficients, i.e. `-2 log p(x)` up to a constant.
    /// Zero-variance coefficients must be zero and contribute nothing.
    pub fn quadratic_form(&self, x: &Tensor<f64>) -> Result<f64> {
        let mut q = 0.0;
        for (&v, &c) in self.analyze(x)?.iter().zip(&self.variances) {
            if c == 0.0 {
                if v != 0.0 {
                    return Err(Error::SingularModel(
                        "point outside the support of a degenerate model".into(),
                    ));
                }
            } else {
                q += v * v / c;
            }
        }
        Ok(q)
    }

    /// Exact draw: coefficients i.i.d. `N(0, c_i)` mapped back to pixels.
    pub fn sample_exact(&self, seed: u64) -> Result<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs: Vec<f64> = self
            .variances
            .iter()
            .map(|&c| c.sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        self.synthesize(&coeffs)
    }

    fn haar_depth(&self) -> Result<usize> {
        match self.basis {
            Basis::Haar { depth } => Ok(depth),
            other => Err(Error::UnsupportedModel(format!(
                "needs a haar-diagonal model, got the {other} basis"
            ))),
        }
    }

    /// Offset and length of the scale-`j` detail band in coefficient order.
    fn band_range(&self, j: usize) -> (usize, usize) {
        let mut off = 0;
        for s in 1..j {
            let m = self.side >> s;
            off += DETAIL_CHANNELS * m * m;
        }
        let m = self.side >> j;
        (off, DETAIL_CHANNELS * m * m)
    }

    /// Variances of the scale-`j` detail band as a `3×M×M` tensor.
    pub fn band_variances(&self, j: usize) -> Result<Tensor<f64>> {
        let depth = self.haar_depth()?;
        if j == 0 || j > depth {
            return Err(Error::Index(format!("scale {j} outside 1..={depth}")));
        }
        let (off, len) = self.band_range(j);
        let m = self.side >> j;
        Tensor::from_vec(&[DETAIL_CHANNELS, m, m], self.variances[off..off + len].to_vec())
    }

    /// Law of the low-pass image `x_j`: haar-diagonal on the coarser pyramid,
    /// or pixel-diagonal when `j` is the terminal scale.
    pub fn lowpass_marginal(&self, j: usize) -> Result<GaussianModel> {
        let depth = self.haar_depth()?;
        if j == 0 || j > depth {
            return Err(Error::Index(format!("scale {j} outside 1..={depth}")));
        }
        let (off, len) = self.band_range(j);
        let rest = self.variances[off + len..].to_vec();
        let side = self.side >> j;
        let basis = if j == depth {
            Basis::Pixel
        } else {
            Basis::Haar { depth: depth - j }
        };
        GaussianModel::new(basis, side, &Spectrum::Explicit(rest))
    }

    /// Exact conditional denoiser for the scale-`j` detail band.
    pub fn conditional_detail_denoiser(
        &self,
        j: usize,
        noise: NoiseLevel,
    ) -> Result<ConditionalOracle> {
        Ok(ConditionalOracle {
            variances: self.band_variances(j)?,
            noise,
        })
    }

    /// Denoiser over whole images using this model.
    pub fn denoiser(&self, noise: NoiseLevel) -> OracleDenoiser<'_> {
        OracleDenoiser { model: self, noise }
    }

    /// Method-of-moments noise variance: `max(0, (‖y‖² − Σc)/n)`.
    pub fn estimate_noise_variance(&self, y: &Tensor<f64>) -> f64 {
        moment_noise_variance(y.sum_sq(), self.variances.iter().sum(), y.len())
    }
}

fn moment_noise_variance(energy: f64, prior: f64, n: usize) -> f64 {
    ((energy - prior) / n.max(1) as f64).max(0.0)
}

/// Noise level handed to an oracle denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    Known(f64),
    /// Estimated from the input by matching its energy to the prior's
    /// expected energy plus white noise. Makes the oracle blind, like a
    /// trained network.
    Estimated,
}

/// Whole-image oracle denoiser.
#[derive(Debug, Clone, Copy)]
pub struct OracleDenoiser<'a> {
    pub model: &'a GaussianModel,
    pub noise: NoiseLevel,
}

impl OracleDenoiser<'_> {
    pub fn denoise(&self, y: &Tensor<f64>) -> Result<Tensor<f64>> {
        let sigma = match self.noise {
            NoiseLevel::Known(s) => s,
            NoiseLevel::Estimated => {
                self.model.check_image(y)?;
                self.model.estimate_noise_variance(y).sqrt()
            }
        };
        self.model.wiener_denoise(y, sigma)
    }
}

/// Exact MMSE map for one detail band of a haar-diagonal model. The band is
/// independent of the low-pass image under such a model, so the
/// conditioning input only has its shape checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalOracle {
    variances: Tensor<f64>,
    noise: NoiseLevel,
}

impl ConditionalOracle {
    pub fn variances(&self) -> &Tensor<f64> {
        &self.variances
    }

    pub fn denoise(&self, details: &Tensor<f64>, lowpass: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.variances.same_shape(details)?;
        let (_, m, n) = details.dims3()?;
        if lowpass.shape() != [1, m, n] {
            return Err(Error::dim(format!(
                "conditioning band {:?} does not match details {:?}",
                lowpass.shape(),
                details.shape()
            )));
        }
        let s2 = match self.noise {
            NoiseLevel::Known(s) => s * s,
            NoiseLevel::Estimated => {
                moment_noise_variance(details.sum_sq(), self.variances.sum(), details.len())
            }
        };
        if s2 == 0.0 {
            return Ok(details.clone());
        }
        details.zip_map(&self.variances, |y, c| c / (c + s2) * y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_image(side: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[1, side, side], 1.0, &mut rng)
    }

    #[test]
    fn bases_are_orthonormal() {
        for basis in [Basis::Pixel, Basis::Fourier, Basis::Haar { depth: 2 }] {
            let m = GaussianModel::new(basis, 8, &Spectrum::White(1.0)).unwrap();
            let x = rand_image(8, 1);
            let c = m.analyze(&x).unwrap();
            let e: f64 = c.iter().map(|v| v * v).sum();
            assert!((e - x.sum_sq()).abs() < 1e-10, "{basis}");
            let back = m.synthesize(&c).unwrap();
            assert!(back.sub(&x).unwrap().max_abs() < 1e-12, "{basis}");
        }
    }

    #[test]
    fn white_prior_shrinkage() {
        let m = GaussianModel::new(Basis::Pixel, 4, &Spectrum::White(1.0)).unwrap();
        let mut y = Tensor::zeros(&[1, 4, 4]);
        y.set(&[0, 1, 2], 2.0).unwrap();
        let x = m.wiener_denoise(&y, 1.0).unwrap();
        assert_eq!(x.get(&[0, 1, 2]), Some(1.0));
        assert_eq!(x.sum_sq(), 1.0);
        let s = m.analytic_score(&y, 1.0).unwrap();
        assert_eq!(s.get(&[0, 1, 2]), Some(-1.0));
    }

    #[test]
    fn zero_noise_is_identity_and_huge_noise_kills() {
        let m = GaussianModel::new(Basis::Fourier, 8, &Spectrum::PowerLaw(2.0)).unwrap();
        let y = rand_image(8, 2);
        assert_eq!(m.wiener_denoise(&y, 0.0).unwrap(), y);
        let x = m.wiener_denoise(&y, 1e6).unwrap();
        assert!(x.max_abs() < 1e-4 * y.max_abs());
    }

    #[test]
    fn score_of_zero_is_zero() {
        let m = GaussianModel::new(Basis::Haar { depth: 2 }, 8, &Spectrum::PowerLaw(1.0)).unwrap();
        let s = m.analytic_score(&Tensor::zeros(&[1, 8, 8]), 0.3).unwrap();
        assert_eq!(s.max_abs(), 0.0);
    }

    #[test]
    fn singular_score() {
        let m = GaussianModel::new(Basis::Pixel, 2, &Spectrum::White(0.0)).unwrap();
        assert!(matches!(
            m.analytic_score(&Tensor::zeros(&[1, 2, 2]), 0.0),
            Err(Error::SingularModel(_))
        ));
    }

    #[test]
    fn fourier_powerlaw_is_stationary() {
        // Covariance between pixels depends only on their (circular) offset.
        let m = GaussianModel::new(Basis::Fourier, 8, &Spectrum::PowerLaw(1.5)).unwrap();
        let cov = |a: usize, b: usize| {
            let mut ea = vec![0.0; 64];
            ea[a] = 1.0;
            let ca = m.analyze(&Tensor::from_vec(&[1, 8, 8], ea).unwrap()).unwrap();
            let mut eb = vec![0.0; 64];
            eb[b] = 1.0;
            let cb = m.analyze(&Tensor::from_vec(&[1, 8, 8], eb).unwrap()).unwrap();
            ca.iter()
                .zip(&cb)
                .zip(m.variances())
                .map(|((x, y), c)| x * y * c)
                .sum::<f64>()
        };
        let c1 = cov(0, 1);
        let c2 = cov(8 * 3 + 4, 8 * 3 + 5);
        assert!((c1 - c2).abs() < 1e-12);
    }

    #[test]
    fn band_variances_and_marginal() {
        let m = GaussianModel::haar_bands(16, &[0.1, 0.2, 0.3], 2.0).unwrap();
        assert_eq!(m.band_variances(2).unwrap().shape(), &[3, 4, 4]);
        assert!(m.band_variances(2).unwrap().data().iter().all(|&c| c == 0.2));
        let low = m.lowpass_marginal(1).unwrap();
        assert_eq!(low.basis(), Basis::Haar { depth: 2 });
        assert_eq!(low.side(), 8);
        let last = m.lowpass_marginal(3).unwrap();
        assert_eq!(last.basis(), Basis::Pixel);
        assert!(last.variances().iter().all(|&c| c == 2.0));
        let f = GaussianModel::new(Basis::Fourier, 8, &Spectrum::White(1.0)).unwrap();
        assert!(matches!(
            f.conditional_detail_denoiser(1, NoiseLevel::Known(0.1)),
            Err(Error::UnsupportedModel(_))
        ));
    }

    #[test]
    fn conditional_oracle_shrinkage() {
        let m = GaussianModel::haar_bands(8, &[4.0], 1.0).unwrap();
        let o = m.conditional_detail_denoiser(1, NoiseLevel::Known(1.0)).unwrap();
        let y = Tensor::full(&[3, 4, 4], 1.0);
        let a = o.denoise(&y, &Tensor::zeros(&[1, 4, 4])).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.8).abs() < 1e-15));
        let b = o.denoise(&y, &rand_image(4, 3)).unwrap();
        assert_eq!(a, b);
        let o0 = m.conditional_detail_denoiser(1, NoiseLevel::Known(0.0)).unwrap();
        assert_eq!(o0.denoise(&y, &Tensor::zeros(&[1, 4, 4])).unwrap(), y);
    }

    #[test]
    fn spectrum_text() {
        for s in ["white:0.5", "powerlaw:2", "csv:1,2,3"] {
            let sp = Spectrum::parse(s).unwrap();
            assert_eq!(Spectrum::parse(&sp.to_string()).unwrap(), sp);
        }
        assert!(Spectrum::parse("pink:1").is_err());
    }
}
