//! Image tensor type and lossless 8-bit PNG round-tripping.
//!
//! Pixels are channel-major `[3, side, side]` f64 grids in [0, 1]. Channel
//! roles are fixed across the crate: channel 0 carries cytoplasm texture,
//! channel 1 organelle puncta, channel 2 nuclei. On disk they map to PNG
//! R/G/B in that order.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

pub type Pixels = Array3<f64>;

pub const CHANNELS: usize = 3;
pub const CH_CYTOPLASM: usize = 0;
pub const CH_ORGANELLE: usize = 1;
pub const CH_NUCLEI: usize = 2;

/// Quantize to the 8-bit grid used on disk.
pub fn to_rgb8(px: &Pixels) -> Vec<u8> {
    let (c, h, w) = px.dim();
    assert_eq!(c, CHANNELS);
    let mut out = vec![0u8; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                out[(i * w + j) * 3 + ch] = (px[[ch, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

pub fn from_rgb8(bytes: &[u8], side: usize) -> Pixels {
    let mut px = Array3::<f64>::zeros((CHANNELS, side, side));
    for i in 0..side {
        for j in 0..side {
            for ch in 0..3 {
                px[[ch, i, j]] = bytes[(i * side + j) * 3 + ch] as f64 / 255.0;
            }
        }
    }
    px
}

pub fn write_png(path: &Path, px: &Pixels) -> Result<()> {
    let (_, h, w) = px.dim();
    let buf = to_rgb8(px);
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized for image");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))
}

pub fn read_png(path: &Path) -> Result<Pixels> {
    let img = image::open(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(Error::Input(format!(
            "expected square image, got {w}x{h} in {}",
            path.display()
        )));
    }
    Ok(from_rgb8(img.as_raw(), w as usize))
}

/// Clamp every value into [0, 1] in place.
pub fn clamp01(px: &mut Pixels) {
    for v in px.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}
