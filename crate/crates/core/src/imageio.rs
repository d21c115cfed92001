//! Grayscale image files: binary PGM (P5) and PNG, intensities in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an 8-bit grayscale PGM or PNG as a `1×H×W` tensor in `[0, 1]`.
/// Color PNGs are converted to luma.
pub fn read_gray(path: &Path) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| image_err(path, e))?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => other.to_luma8(),
    };
    let (w, h) = gray.dimensions();
    let data = gray.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::from_vec(&[1, h as usize, w as usize], data)
}

fn to_gray8(image: &Tensor<f64>) -> Result<GrayImage> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(Error::dim(format!("grayscale output needs one channel, got {c}")));
    }
    let raw = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::dim("image buffer size"))
}

/// Writes a `1×H×W` tensor, clamped to `[0, 1]` and quantized to 8 bits.
/// The format follows the extension: `.pgm` gives binary P5, anything else PNG.
pub fn write_gray(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let g = to_gray8(image)?;
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let (w, h) = g.dimensions();
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(g.as_raw());
        std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
    } else {
        g.save_with_format(path, ImageFormat::Png)
            .map_err(|e| image_err(path, e))
    }
}

/// Writes an RGB PNG from row-major `[r, g, b]` triples.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: Vec<u8>) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| Error::dim("rgb buffer does not match its dimensions"))?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Reads an RGB PNG back as `(width, height, rgb)`.
pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}
