//! Orthonormal 2-D Haar analysis/synthesis and multi-level pyramids.
//!
//! Each 2×2 block `[[a, b], [c, d]]` maps to
//!
//! ```text
//! low        = (a + b + c + d) / 2
//! horizontal = (a + b - c - d) / 2
//! vertical   = (a - b + c - d) / 2
//! diagonal   = (a - b - c + d) / 2
//! ```
//!
//! which is an orthogonal 4×4 matrix, so the whole transform preserves
//! energy and its transpose is its inverse.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Number of detail channels per scale, ordered horizontal, vertical, diagonal.
pub const DETAIL_CHANNELS: usize = 3;

fn single_channel<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    let (c, h, w) = t.dims3()?;
    if c != 1 {
        return Err(Error::dim(format!("{what} must have one channel, got {c}")));
    }
    Ok((h, w))
}

/// One level of analysis: `1×2M×2M` image to (`3×M×M` details, `1×M×M` low-pass).
pub fn haar_analysis_step<T: Scalar>(image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = single_channel(image, "image")?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "Haar analysis needs even, non-zero sides, got {h}×{w}"
        )));
    }
    image.check_finite("Haar analysis input")?;
    let (mh, mw) = (h / 2, w / 2);
    let plane = mh * mw;
    let half = T::lit(0.5);
    let x = image.data();
    let mut low = vec![T::zero(); plane];
    let mut det = vec![T::zero(); 3 * plane];
    for i in 0..mh {
        let r0 = 2 * i * w;
        let r1 = r0 + w;
        for j in 0..mw {
            let a = x[r0 + 2 * j];
            let b = x[r0 + 2 * j + 1];
            let c = x[r1 + 2 * j];
            let d = x[r1 + 2 * j + 1];
            let o = i * mw + j;
            low[o] = (a + b + c + d) * half;
            det[o] = (a + b - c - d) * half;
            det[plane + o] = (a - b + c - d) * half;
            det[2 * plane + o] = (a - b - c + d) * half;
        }
    }
    Ok((
        Tensor::from_vec(&[3, mh, mw], det)?,
        Tensor::from_vec(&[1, mh, mw], low)?,
    ))
}

/// Inverse (and adjoint) of [`haar_analysis_step`].
pub fn haar_synthesis_step<T: Scalar>(details: &Tensor<T>, low: &Tensor<T>) -> Result<Tensor<T>> {
    let (mh, mw) = single_channel(low, "low-pass band")?;
    let (dc, dh, dw) = details.dims3()?;
    if dc != DETAIL_CHANNELS || dh != mh || dw != mw {
        return Err(Error::dim(format!(
            "detail band {:?} does not match low-pass band {:?}",
            details.shape(),
            low.shape()
        )));
    }
    let (h, w) = (2 * mh, 2 * mw);
    let plane = mh * mw;
    let half = T::lit(0.5);
    let l = low.data();
    let d = details.data();
    let mut out = vec![T::zero(); h * w];
    for i in 0..mh {
        let r0 = 2 * i * w;
        let r1 = r0 + w;
        for j in 0..mw {
            let o = i * mw + j;
            let (s, dh_, dv, dd) = (l[o], d[o], d[plane + o], d[2 * plane + o]);
            out[r0 + 2 * j] = (s + dh_ + dv + dd) * half;
            out[r0 + 2 * j + 1] = (s + dh_ - dv - dd) * half;
            out[r1 + 2 * j] = (s - dh_ + dv - dd) * half;
            out[r1 + 2 * j + 1] = (s - dh_ - dv + dd) * half;
        }
    }
    Tensor::from_vec(&[1, h, w], out)
}

/// Terminal low-pass band plus one 3-channel detail band per scale.
///
/// `details[0]` is the finest scale (`j = 1`), `details[depth - 1]` the
/// coarsest.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid<T = f64> {
    pub lowpass: Tensor<T>,
    pub details: Vec<Tensor<T>>,
    pub base_size: usize,
}

impl<T: Scalar> WaveletPyramid<T> {
    pub fn depth(&self) -> usize {
        self.details.len()
    }

    /// Detail band at scale `j` (1-based, 1 = finest).
    pub fn detail(&self, j: usize) -> Option<&Tensor<T>> {
        j.checked_sub(1).and_then(|i| self.details.get(i))
    }

    /// Sum of squared coefficients over every band.
    pub fn energy(&self) -> T {
        self.details
            .iter()
            .fold(self.lowpass.sum_sq(), |acc, d| acc + d.sum_sq())
    }

    /// Checks the band sizes against `base_size` and the depth.
    pub fn validate(&self) -> Result<()> {
        let depth = self.depth();
        if depth == 0 {
            return Err(Error::dim("pyramid has no detail bands"));
        }
        let n = self.base_size;
        if n == 0 || n % (1 << depth) != 0 {
            return Err(Error::dim(format!(
                "base size {n} is not divisible by 2^{depth}"
            )));
        }
        for (i, d) in self.details.iter().enumerate() {
            let side = n >> (i + 1);
            if d.shape() != [DETAIL_CHANNELS, side, side] {
                return Err(Error::dim(format!(
                    "detail band at scale {} has shape {:?}, expected [3, {side}, {side}]",
                    i + 1,
                    d.shape()
                )));
            }
        }
        let side = n >> depth;
        if self.lowpass.shape() != [1, side, side] {
            return Err(Error::dim(format!(
                "low-pass band has shape {:?}, expected [1, {side}, {side}]",
                self.lowpass.shape()
            )));
        }
        Ok(())
    }
}

/// Applies [`haar_analysis_step`] `depth` times to successive low-pass bands.
pub fn build_pyramid<T: Scalar>(image: &Tensor<T>, depth: usize) -> Result<WaveletPyramid<T>> {
    let (h, w) = single_channel(image, "image")?;
    if h != w {
        return Err(Error::dim(format!("pyramids need square images, got {h}×{w}")));
    }
    if depth == 0 {
        return Err(Error::dim("pyramid depth must be at least 1"));
    }
    if depth >= usize::BITS as usize || h == 0 || h % (1usize << depth) != 0 {
        return Err(Error::dim(format!(
            "image side {h} is not divisible by 2^{depth}"
        )));
    }
    let mut details = Vec::with_capacity(depth);
    let mut low = image.clone();
    for _ in 0..depth {
        let (d, l) = haar_analysis_step(&low)?;
        details.push(d);
        low = l;
    }
    Ok(WaveletPyramid {
        lowpass: low,
        details,
        base_size: h,
    })
}

/// Inverse of [`build_pyramid`].
pub fn collapse_pyramid<T: Scalar>(pyramid: &WaveletPyramid<T>) -> Result<Tensor<T>> {
    pyramid.validate()?;
    let mut low = pyramid.lowpass.clone();
    for d in pyramid.details.iter().rev() {
        low = haar_synthesis_step(d, &low)?;
    }
    Ok(low)
}
