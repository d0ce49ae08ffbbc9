//! Density maps: ground-truth synthesis from dot annotations, count
//! extraction and the `DMAP` binary file format.
//!
//! `DMAP` layout (all little-endian):
//!
//! | offset | size    | field                          |
//! |--------|---------|--------------------------------|
//! | 0      | 4       | magic `b"DMAP"`                |
//! | 4      | 1       | format version (`1`)           |
//! | 5      | 4       | height `u32`                   |
//! | 9      | 4       | width `u32`                    |
//! | 13     | 4       | scale `f32`                    |
//! | 17     | 4·H·W   | grid, row-major `f32`          |

use crate::error::{Error, Result};

pub const DMAP_MAGIC: &[u8; 4] = b"DMAP";
pub const DMAP_VERSION: u8 = 1;
const DMAP_HEADER: usize = 17;

/// Kernels are truncated at this many standard deviations.
pub const KERNEL_TRUNCATION: f64 = 4.0;

/// Nonnegative `height x width` grid whose sum divided by `scale` is a count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    scale: f64,
    grid: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, scale: f64) -> Self {
        Self {
            height,
            width,
            scale,
            grid: vec![0.0; height * width],
        }
    }

    pub fn from_grid(height: usize, width: usize, scale: f64, grid: Vec<f64>) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::shape((height, width), grid.len()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("density scale must be positive, got {scale}")));
        }
        Ok(Self {
            height,
            width,
            scale,
            grid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut [f64] {
        &mut self.grid
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.grid.iter().sum()
    }

    /// Count estimate: `sum / scale`.
    pub fn count(&self) -> f64 {
        self.sum() / self.scale
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().copied().fold(0.0, f64::max)
    }

    pub(crate) fn check_same_shape(&self, other: &DensityMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Serialize to the `DMAP` format. Values are stored as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(DMAP_HEADER + 4 * self.grid.len());
        out.extend_from_slice(DMAP_MAGIC);
        out.push(DMAP_VERSION);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.scale as f32).to_le_bytes());
        for v in &self.grid {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format { offset, message };
        if bytes.len() < 4 {
            return Err(fmt(bytes.len(), "truncated magic".into()));
        }
        if &bytes[..4] != DMAP_MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes.len() < DMAP_HEADER {
            return Err(fmt(bytes.len(), "truncated header".into()));
        }
        if bytes[4] != DMAP_VERSION {
            return Err(fmt(4, format!("unsupported version {}", bytes[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let height = u32_at(5);
        let width = u32_at(9);
        let scale = f32::from_le_bytes(bytes[13..17].try_into().unwrap()) as f64;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(fmt(13, format!("non-positive scale {scale}")));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(DMAP_HEADER))
            .ok_or_else(|| fmt(5, "dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(fmt(
                bytes.len().min(expected),
                format!("payload length {} != expected {expected}", bytes.len()),
            ));
        }
        let grid = bytes[DMAP_HEADER..]
            .chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
                if v.is_finite() && v >= 0.0 {
                    Ok(v)
                } else {
                    Err(fmt(DMAP_HEADER + 4 * i, format!("density value {v} at cell {i}")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            height,
            width,
            scale,
            grid,
        })
    }
}

/// Ground-truth density from dot annotations.
///
/// Each dot contributes a Gaussian of standard deviation `sigma`, evaluated at
/// pixel centers, truncated at [`KERNEL_TRUNCATION`]·σ and renormalized so
/// that its pixels sum to exactly `scale`, also near the borders. A dot at
/// `(x, y)` must satisfy `0 <= x <= width`, `0 <= y <= height`.
pub fn generate_density_map(
    points: &[(f64, f64)],
    height: usize,
    width: usize,
    sigma: f64,
    scale: f64,
) -> Result<DensityMap> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let mut map = DensityMap::from_grid(height, width, scale, vec![0.0; height * width])?;
    let radius = KERNEL_TRUNCATION * sigma;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut weights = Vec::new();
    for &(x, y) in points {
        let inside = x.is_finite()
            && y.is_finite()
            && (0.0..=width as f64).contains(&x)
            && (0.0..=height as f64).contains(&y);
        if !inside {
            return Err(Error::PointOutOfBounds {
                x,
                y,
                width,
                height,
            });
        }
        let c0 = ((x - radius - 0.5).floor().max(0.0)) as usize;
        let c1 = ((x + radius - 0.5).ceil().max(0.0) as usize).min(width - 1);
        let r0 = ((y - radius - 0.5).floor().max(0.0)) as usize;
        let r1 = ((y + radius - 0.5).ceil().max(0.0) as usize).min(height - 1);
        weights.clear();
        let mut total = 0.0;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dx = c as f64 + 0.5 - x;
                let dy = r as f64 + 0.5 - y;
                let d2 = dx * dx + dy * dy;
                let w = if d2 <= radius * radius {
                    (-d2 * inv_two_var).exp()
                } else {
                    0.0
                };
                total += w;
                weights.push((r, c, w));
            }
        }
        let grid = map.grid_mut();
        if total > 0.0 {
            for &(r, c, w) in &weights {
                grid[r * width + c] += scale * w / total;
            }
        } else {
            let r = (y.floor() as usize).min(height - 1);
            let c = (x.floor() as usize).min(width - 1);
            grid[r * width + c] += scale;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_points_give_zero_map() {
        let m = generate_density_map(&[], 16, 20, 4.0, 1.0).unwrap();
        assert_eq!(m.shape(), (16, 20));
        assert!(m.grid().iter().all(|&v| v == 0.0));
        assert_eq!(m.count(), 0.0);
    }

    #[test]
    fn centered_point_sums_to_scale() {
        for sigma in [0.3, 1.0, 4.0, 25.0] {
            let m = generate_density_map(&[(32.0, 32.0)], 64, 64, sigma, 60.0).unwrap();
            assert!((m.sum() - 60.0).abs() < 1e-6, "sigma {sigma}");
            assert!((m.count() - 1.0).abs() < 1e-6);
        }
    }

    /// Independent oracle: evaluate the same truncated kernel over the whole
    /// image, normalize, and sum.
    fn kernel_sum_oracle(points: &[(f64, f64)], h: usize, w: usize, sigma: f64) -> f64 {
        let mut total = 0.0;
        for &(x, y) in points {
            let mut raw = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    let d2 = (c as f64 + 0.5 - x).powi(2) + (r as f64 + 0.5 - y).powi(2);
                    if d2.sqrt() <= 4.0 * sigma {
                        raw[r * w + c] = (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            let s: f64 = raw.iter().sum();
            total += raw.iter().map(|v| v / s).sum::<f64>();
        }
        total
    }

    #[test]
    fn corner_points_renormalized() {
        let pts = [
            (0.0, 0.0),
            (63.9, 0.2),
            (0.5, 63.5),
            (64.0, 64.0),
            (1.0, 2.0),
            (62.0, 1.0),
            (60.0, 61.0),
        ];
        let m = generate_density_map(&pts, 64, 64, 4.0, 1.0).unwrap();
        assert!((kernel_sum_oracle(&pts, 64, 64, 4.0) - 7.0).abs() < 1e-9);
        assert!((m.count() - 7.0).abs() < 1e-3);
        assert!((m.count() - 7.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_point_named() {
        let err = generate_density_map(&[(3.0, 3.0), (65.0, 2.0)], 64, 64, 4.0, 1.0).unwrap_err();
        match err {
            Error::PointOutOfBounds { x, y, .. } => assert_eq!((x, y), (65.0, 2.0)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn dmap_rejects_corruption() {
        let m = generate_density_map(&[(5.0, 5.0)], 8, 12, 2.0, 1.0).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 4 + 13 + 4 * 8 * 12);

        let err = DensityMap::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DensityMap::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(DensityMap::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));

        let back = DensityMap::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }
}
