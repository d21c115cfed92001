//! Denoiser interfaces consumed by the sampler and the evaluation pipeline.
//!
//! Everything outside the networks runs in double precision; network
//! denoisers convert at the boundary.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::oracle::{ConditionalOracle, OracleDenoiser};
use crate::tensor::{Scalar, Tensor};
use crate::wavelet::DETAIL_CHANNELS;

/// Maps a noisy `C×H×W` image to an estimate of the clean one.
pub trait Denoiser {
    fn denoise(&self, noisy: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// Maps noisy `3×M×M` detail coefficients and a `1×M×M` conditioning
/// low-pass band to denoised detail coefficients.
pub trait ConditionalDenoiser {
    fn denoise_details(&self, details: &Tensor<f64>, lowpass: &Tensor<f64>) -> Result<Tensor<f64>>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    fn denoise(&self, noisy: &Tensor<f64>) -> Result<Tensor<f64>> {
        self(noisy)
    }
}

impl<D: ConditionalDenoiser + ?Sized> ConditionalDenoiser for &D {
    fn denoise_details(&self, details: &Tensor<f64>, lowpass: &Tensor<f64>) -> Result<Tensor<f64>> {
        (**self).denoise_details(details, lowpass)
    }
}

impl<D: ConditionalDenoiser + ?Sized> ConditionalDenoiser for Box<D> {
    fn denoise_details(&self, details: &Tensor<f64>, lowpass: &Tensor<f64>) -> Result<Tensor<f64>> {
        (**self).denoise_details(details, lowpass)
    }
}

impl Denoiser for OracleDenoiser<'_> {
    fn denoise(&self, noisy: &Tensor<f64>) -> Result<Tensor<f64>> {
        OracleDenoiser::denoise(self, noisy)
    }
}

impl ConditionalDenoiser for ConditionalOracle {
    fn denoise_details(&self, details: &Tensor<f64>, lowpass: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.denoise(details, lowpass)
    }
}

impl<T: Scalar> Denoiser for Model<T> {
    fn denoise(&self, noisy: &Tensor<f64>) -> Result<Tensor<f64>> {
        if self.spec.in_channels != self.spec.out_channels {
            return Err(Error::config(format!(
                "model `{}` maps {} to {} channels and cannot denoise images",
                self.spec.name, self.spec.in_channels, self.spec.out_channels
            )));
        }
        Ok(self.apply(&noisy.cast())?.cast())
    }
}

impl<T: Scalar> ConditionalDenoiser for Model<T> {
    fn denoise_details(&self, details: &Tensor<f64>, lowpass: &Tensor<f64>) -> Result<Tensor<f64>> {
        if self.spec.in_channels != DETAIL_CHANNELS + 1 || self.spec.out_channels != DETAIL_CHANNELS {
            return Err(Error::config(format!(
                "model `{}` ({} → {} channels) is not a conditional detail denoiser",
                self.spec.name, self.spec.in_channels, self.spec.out_channels
            )));
        }
        let input = Tensor::concat0(&[details, lowpass])?;
        Ok(self.apply(&input.cast())?.cast())
    }
}

/// A conditional denoiser with its conditioning band held fixed.
#[derive(Debug, Clone, Copy)]
pub struct Conditioned<'a, D: ?Sized> {
    pub inner: &'a D,
    pub lowpass: &'a Tensor<f64>,
}

impl<D: ConditionalDenoiser + ?Sized> Denoiser for Conditioned<'_, D> {
    fn denoise(&self, noisy: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.inner.denoise_details(noisy, self.lowpass)
    }
}
