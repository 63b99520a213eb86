//! Binary portable-pixmap images of samples and kept-token overlays.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};

use crate::error::{Category, CliError, Result};

pub const OVERLAY_SCALE: u32 = 4;

fn image_err(e: image::ImageError) -> CliError {
    CliError::new(Category::Data, format!("pixmap: {e}"))
}

/// Channel-planar bytes to an RGB image; one channel is shown as grey.
pub fn from_planar(image: &[u8], channels: usize, size: usize) -> RgbImage {
    let plane = size * size;
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let at = y as usize * size + x as usize;
        let ch = |c: usize| image[c.min(channels - 1) * plane + at];
        image::Rgb([ch(0), ch(1), ch(2)])
    })
}

/// Kept patches are brightened to `128 + p/2`, pruned ones darkened to
/// `p/4`, then the image is upscaled by [`OVERLAY_SCALE`].
pub fn overlay(img: &RgbImage, patch: u32, kept: &[usize]) -> RgbImage {
    let grid = img.width() / patch;
    let mut keep = vec![false; (grid * grid) as usize];
    for &k in kept {
        keep[k] = true;
    }
    RgbImage::from_fn(img.width() * OVERLAY_SCALE, img.height() * OVERLAY_SCALE, |x, y| {
        let (sx, sy) = (x / OVERLAY_SCALE, y / OVERLAY_SCALE);
        let p = img.get_pixel(sx, sy).0;
        let on = keep[((sy / patch) * grid + sx / patch) as usize];
        image::Rgb(p.map(|v| if on { 128 + v / 2 } else { v / 4 }))
    })
}

/// Patch indices whose overlay pixels are all in the kept range.
pub fn kept_from_overlay(img: &RgbImage, patch: u32) -> Vec<usize> {
    let cell = patch * OVERLAY_SCALE;
    let grid = img.width() / cell;
    (0..grid * grid)
        .filter(|&j| {
            let (gx, gy) = (j % grid, j / grid);
            (0..cell).all(|dy| (0..cell).all(|dx| img.get_pixel(gx * cell + dx, gy * cell + dy).0.iter().all(|&v| v >= 128)))
        })
        .map(|j| j as usize)
        .collect()
}

pub fn encode(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(image_err)?;
    Ok(out)
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(img)?).map_err(|e| CliError::new(Category::Io, format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| CliError::new(Category::Io, format!("{}: {e}", path.display())))?;
    Ok(image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(image_err)?
        .to_rgb8())
}
