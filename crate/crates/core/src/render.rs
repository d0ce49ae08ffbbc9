//! Density overlays: the input image blended with a heat-colored density
//! map, with optional box outlines.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging;

/// Peak opacity of the heatmap, reached at the density maximum.
pub const MAX_ALPHA: f64 = 0.65;
pub const BOX_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

/// Black -> red -> yellow -> white ramp over `t` in `[0, 1]`.
fn heat(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    [t.min(1.0), (t - 1.0).clamp(0.0, 1.0), (t - 2.0).clamp(0.0, 1.0)].map(|v| v * 255.0)
}

/// Pixel columns and rows of the box outline: the pixels containing each
/// edge, clamped to the image.
pub fn outline_pixels(bbox: &BBox, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
    if width == 0 || height == 0 || bbox.x_max() <= 0.0 || bbox.y_max() <= 0.0 {
        return None;
    }
    if bbox.x_min() >= width as f64 || bbox.y_min() >= height as f64 {
        return None;
    }
    let lo = |v: f64, n: u32| (v.floor().max(0.0) as u32).min(n - 1);
    let hi = |v: f64, n: u32| ((v.ceil() - 1.0).max(0.0) as u32).min(n - 1);
    Some((lo(bbox.x_min(), width), lo(bbox.y_min(), height), hi(bbox.x_max(), width), hi(bbox.y_max(), height)))
}

pub fn draw_box(img: &mut RgbImage, bbox: &BBox, color: Rgb<u8>) {
    let Some((x0, y0, x1, y1)) = outline_pixels(bbox, img.width(), img.height()) else {
        return;
    };
    for x in x0..=x1 {
        img.put_pixel(x, y0, color);
        img.put_pixel(x, y1, color);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, color);
        img.put_pixel(x1, y, color);
    }
}

/// Blend `density` over `image`; opacity grows linearly with density up to
/// [`MAX_ALPHA`] at the map's maximum, so an all-zero map leaves the image
/// untouched.
pub fn render_overlay(image: &RgbImage, density: &DensityMap, boxes: &[BBox]) -> Result<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if density.shape() != (h, w) {
        return Err(Error::shape(density.shape(), (h, w)));
    }
    let peak = density.max();
    let mut out = image.clone();
    if peak > 0.0 {
        for (x, y, px) in out.enumerate_pixels_mut() {
            let t = density.at(y as usize, x as usize) / peak;
            let alpha = MAX_ALPHA * t;
            let color = heat(t);
            for c in 0..3 {
                let v = (1.0 - alpha) * px.0[c] as f64 + alpha * color[c];
                px.0[c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    for b in boxes {
        draw_box(&mut out, b, BOX_COLOR);
    }
    Ok(out)
}

pub fn write_overlay(path: &Path, image: &RgbImage, density: &DensityMap, boxes: &[BBox]) -> Result<()> {
    imaging::save_png(&render_overlay(image, density, boxes)?, path)
}
