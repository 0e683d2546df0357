//! Image file I/O on the luminance channel.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::sensing::luminance;

fn to_luma(img: &DynamicImage) -> Array2<f64> {
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        let p = rgb.get_pixel(j as u32, i as u32);
        luminance(p[0] as f64, p[1] as f64, p[2] as f64).clamp(0.0, 1.0)
    })
}

/// Loads any supported image file as a luminance array in `[0, 1]`.
pub fn load_luma(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(to_luma(&img))
}

/// Decodes an in-memory image (any supported format) to luminance.
pub fn decode_luma(bytes: &[u8]) -> Result<Array2<f64>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::format("<memory>", e.to_string()))?;
    Ok(to_luma(&img))
}

fn to_gray8(img: &Array2<f64>) -> GrayImage {
    let (h, w) = img.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(img[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// 8-bit grayscale PNG encoding of an image in `[0, 1]` (values are clamped).
pub fn encode_png(img: &Array2<f64>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_gray8(img)
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::format("<memory>", e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn save_png(img: &Array2<f64>, path: &Path) -> Result<()> {
    to_gray8(img)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Whether a path looks like an image file this crate can decode.
pub fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "pgm" | "pnm" | "ppm" | "bmp" | "tif" | "tiff" | "jpg" | "jpeg")
    )
}
