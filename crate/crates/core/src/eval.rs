//! Evaluation: the multi-scale denoising pipeline, PSNR curves, the
//! wavelet MSE decomposition and adaptive-filter heatmaps.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::denoiser::{ConditionalDenoiser, Denoiser};
use crate::error::{Error, Result};
use crate::imageio::write_rgb_png;
use crate::sampler::derive_seed;
use crate::tensor::Tensor;
use crate::train::corrupt;
use crate::wavelet::{build_pyramid, haar_synthesis_step};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 200.0;

/// `10·log10(peak²/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Tensor<f64>, estimate: &Tensor<f64>, peak: f64) -> Result<f64> {
    let mse = x.sub(estimate)?.sum_sq() / x.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Squared error measured in pixels (`lhs`) and summed over wavelet bands
/// (`rhs`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseDecomposition {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

pub fn mse_decomposition_check(x: &Tensor<f64>, estimate: &Tensor<f64>, depth: usize) -> Result<MseDecomposition> {
    x.same_shape(estimate)?;
    let lhs = x.sub(estimate)?.sum_sq();
    let a = build_pyramid(x, depth)?;
    let b = build_pyramid(estimate, depth)?;
    let mut rhs = a.lowpass.sub(&b.lowpass)?.sum_sq();
    for (da, db) in a.details.iter().zip(&b.details) {
        rhs += da.sub(db)?.sum_sq();
    }
    Ok(MseDecomposition {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

/// Output of [`multiscale_denoise`].
#[derive(Debug, Clone)]
pub struct MultiscaleOutput {
    pub image: Tensor<f64>,
    /// Decomposition of `‖y − x̂‖²` across the bands, recorded on every run.
    pub check: MseDecomposition,
}

/// Denoises the low-pass band with `lowpass`, then each detail band from
/// coarse to fine with `conditional[j-1]`, conditioning on the already
/// denoised low-pass estimate.
pub fn multiscale_denoise<L, C>(y: &Tensor<f64>, lowpass: &L, conditional: &[C], depth: usize) -> Result<MultiscaleOutput>
where
    L: Denoiser + ?Sized,
    C: ConditionalDenoiser,
{
    if conditional.len() != depth {
        return Err(Error::config(format!(
            "{depth} scales need {depth} conditional denoisers, got {}",
            conditional.len()
        )));
    }
    let p = build_pyramid(y, depth)?;
    let mut x = lowpass.denoise(&p.lowpass)?;
    for j in (1..=depth).rev() {
        let details = conditional[j - 1].denoise_details(&p.details[j - 1], &x)?;
        x = haar_synthesis_step(&details, &x)?;
    }
    let check = mse_decomposition_check(y, &x, depth)?;
    Ok(MultiscaleOutput { image: x, check })
}

/// A low-pass denoiser plus one conditional denoiser per scale, usable
/// wherever a [`Denoiser`] is expected.
#[derive(Debug, Clone)]
pub struct MultiscalePipeline<L, C> {
    pub lowpass: L,
    pub conditional: Vec<C>,
}

impl<L, C> MultiscalePipeline<L, C> {
    pub fn depth(&self) -> usize {
        self.conditional.len()
    }
}

impl<L: Denoiser, C: ConditionalDenoiser> Denoiser for MultiscalePipeline<L, C> {
    fn denoise(&self, noisy: &Tensor<f64>) -> Result<Tensor<f64>> {
        let out = multiscale_denoise(noisy, &self.lowpass, &self.conditional, self.depth())?;
        if out.check.gap > 1e-10 * out.check.lhs.max(1.0) {
            return Err(Error::Invariant(format!(
                "wavelet MSE decomposition gap {:e}",
                out.check.gap
            )));
        }
        Ok(out.image)
    }
}

/// One row of a PSNR curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsnrRow {
    pub sigma: f64,
    pub psnr_in_mean: f64,
    pub psnr_out_mean: f64,
    pub psnr_out_std: f64,
    pub n_images: usize,
}

/// Per-image PSNRs before and after denoising at one noise level. Image `i`
/// is corrupted with noise seed `derive_seed(seed, i)`, so different
/// pipelines evaluated with the same seed see identical noisy inputs.
pub fn paired_psnr<D: Denoiser + Sync + ?Sized>(
    denoiser: &D,
    images: &[Tensor<f64>],
    sigma: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let y = corrupt(x, sigma, derive_seed(seed, i as u64))?;
            let xh = denoiser.denoise(&y)?;
            Ok((psnr(x, &y, 1.0)?, psnr(x, &xh, 1.0)?))
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Denoising PSNR across a noise grid.
pub fn psnr_curve<D: Denoiser + Sync + ?Sized>(
    denoiser: &D,
    images: &[Tensor<f64>],
    grid: &[f64],
    seed: u64,
) -> Result<Vec<PsnrRow>> {
    if images.is_empty() {
        return Err(Error::config("PSNR curve needs at least one test image"));
    }
    if let Some(s) = grid.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::config(format!("noise levels must be ≥ 0, got {s}")));
    }
    grid.iter()
        .enumerate()
        .map(|(k, &sigma)| {
            let pairs = paired_psnr(denoiser, images, sigma, derive_seed(seed, k as u64))?;
            let ins: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let outs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let (out_mean, out_std) = mean_std(&outs);
            Ok(PsnrRow {
                sigma,
                psnr_in_mean: mean_std(&ins).0,
                psnr_out_mean: out_mean,
                psnr_out_std: out_std,
                n_images: images.len(),
            })
        })
        .collect()
}

pub fn write_psnr_csv<W: Write>(rows: &[PsnrRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "sigma,psnr_in_mean,psnr_out_mean,psnr_out_std,n_images")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{}",
            r.sigma, r.psnr_in_mean, r.psnr_out_mean, r.psnr_out_std, r.n_images
        )?;
    }
    Ok(())
}

/// Red-to-black ramp: `min` is pure red, `max` black, a constant filter the
/// midpoint. Channels of a `C×H×W` filter are tiled left to right.
pub fn heatmap_rgb(filter: &Tensor<f64>) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = filter.dims3()?;
    filter.check_finite("heatmap filter")?;
    let lo = filter.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = filter.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ramp = |v: f64| {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        ((1.0 - t) * 255.0).round() as u8
    };
    let width = c * w;
    let mut rgb = vec![0u8; 3 * width * h];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let v = filter.data()[(ch * h + r) * w + col];
                rgb[3 * (r * width + ch * w + col)] = ramp(v);
            }
        }
    }
    Ok((width, h, rgb))
}

/// Writes [`heatmap_rgb`] as a PNG.
pub fn export_heatmap(filter: &Tensor<f64>, path: &Path) -> Result<()> {
    let (w, h, rgb) = heatmap_rgb(filter)?;
    write_rgb_png(path, w, h, rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_values() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!((psnr(&x, &Tensor::full(&[1, 2, 2], 0.1), 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&x, &Tensor::full(&[1, 2, 2], 1.0), 1.0).unwrap().abs() < 1e-12);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP);
        assert!(psnr(&x, &Tensor::zeros(&[1, 2, 3]), 1.0).is_err());
    }

    #[test]
    fn decomposition_of_basis_perturbation() {
        let x = Tensor::zeros(&[1, 8, 8]);
        let mut xh = x.clone();
        xh.set(&[0, 3, 5], 0.25).unwrap();
        let d = mse_decomposition_check(&x, &xh, 3).unwrap();
        assert!((d.lhs - 0.0625).abs() < 1e-15 && (d.rhs - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn heatmap_ramp() {
        let f = Tensor::from_vec(&[1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let (w, h, rgb) = heatmap_rgb(&f).unwrap();
        assert_eq!((w, h), (3, 1));
        assert_eq!(rgb, vec![255, 0, 0, 128, 0, 0, 0, 0, 0]);
        let (_, _, flat) = heatmap_rgb(&Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(flat.chunks(3).all(|p| p == [128, 0, 0]));
    }

    #[test]
    fn curve_rejects_empty_and_negative() {
        let id = |y: &Tensor<f64>| -> Result<Tensor<f64>> { Ok(y.clone()) };
        assert!(psnr_curve(&id, &[], &[0.1], 0).is_err());
        assert!(psnr_curve(&id, &[Tensor::zeros(&[1, 2, 2])], &[-0.1], 0).is_err());
    }
}
