//! Image helpers shared by the pipeline, the filter and the counter.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Integer pixel window covering `bbox`, clamped to the image.
pub fn pixel_window(bbox: &BBox, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let x0 = (bbox.x_min().floor().max(0.0) as u32).min(width);
    let y0 = (bbox.y_min().floor().max(0.0) as u32).min(height);
    let x1 = (bbox.x_max().ceil().max(0.0) as u32).min(width);
    let y1 = (bbox.y_max().ceil().max(0.0) as u32).min(height);
    (x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
}

/// Crop at the box bounds without resizing. `None` for crops under 2x2 pixels.
pub fn crop(img: &RgbImage, bbox: &BBox) -> Option<RgbImage> {
    let (x, y, w, h) = pixel_window(bbox, img.width(), img.height());
    if w < 2 || h < 2 {
        return None;
    }
    Some(imageops::crop_imm(img, x, y, w, h).to_image())
}

/// Crop at the box bounds, then bilinear-resize to `side x side`.
pub fn crop_resized(img: &RgbImage, bbox: &BBox, side: u32) -> Option<RgbImage> {
    crop(img, bbox).map(|c| resize(&c, side, side))
}

pub fn resize(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    imageops::resize(img, width, height, FilterType::Triangle)
}

/// Channel-major `[3, H, W]` values in `[0, 1]`.
pub fn to_chw(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * w * h + i] = p.0[c] as f64 / 255.0;
        }
    }
    out
}

/// Per-pixel luminance in `[0, 1]`, row-major.
pub fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| (0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64) / 255.0)
        .collect()
}
