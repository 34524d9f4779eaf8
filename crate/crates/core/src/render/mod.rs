//! Pinhole projection, z-buffered rasterization to silhouette / part masks,
//! exact Euclidean distance transforms and virtual-camera sampling.

mod edt;
mod io;
mod raster;
mod viewpoints;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub use edt::{distance_transform, DtImage};
pub use io::{read_mask_png, read_palette, write_mask_png, write_palette, write_rgb_png, Palette, PaletteEntry};
pub use raster::{rasterize, rasterize_region, Raster, RasterMode, Viewport, NO_FACE};
pub use viewpoints::{sample_viewpoints, sample_viewpoints_in_band, Viewpoint, ViewpointSet, DEFAULT_ELEVATION_BAND};

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("point {index} has nonpositive depth {z}")]
    NonpositiveDepth { index: usize, z: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("mask dimension mismatch: {0}")]
    Dimension(String),
    #[error("image io: {0}")]
    Image(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("palette line {line}: {msg}")]
    Palette { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Focal length in pixels.
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(focal: f64, principal_point: [f64; 2], width: u32, height: u32) -> Result<Self, RenderError> {
        let cam = Camera { focal, principal_point, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Self {
        Camera { focal, principal_point: [width as f64 / 2.0, height as f64 / 2.0], width, height }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(RenderError::InvalidCamera(format!("focal must be positive, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::InvalidCamera("image size must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.focal * p.x / p.z + self.principal_point[0],
            self.focal * p.y / p.z + self.principal_point[1],
        )
    }

    /// Same camera at a different resolution; `scale = 0.5` halves the image.
    pub fn scaled(&self, scale: f64) -> Camera {
        Camera {
            focal: self.focal * scale,
            principal_point: [self.principal_point[0] * scale, self.principal_point[1] * scale],
            width: ((self.width as f64 * scale).round() as u32).max(1),
            height: ((self.height as f64 * scale).round() as u32).max(1),
        }
    }
}

/// Pinhole projection `u = f x / z + cx`, `v = f y / z + cy`.
pub fn project(points: &[Vector3<f64>], cam: &Camera) -> Result<Vec<Vector2<f64>>, RenderError> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if p.z > 0.0 {
                Ok(cam.project_point(p))
            } else {
                Err(RenderError::NonpositiveDepth { index, z: p.z })
            }
        })
        .collect()
}

/// Row-major 8-bit label image: 0 is background, otherwise occupancy (1) or
/// a part id.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RenderError> {
        if data.len() != width * height {
            return Err(RenderError::Dimension(format!(
                "{} values for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(Mask { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Occupancy view: every nonzero value becomes 1.
    pub fn binarized(&self) -> Mask {
        Mask { width: self.width, height: self.height, data: self.data.iter().map(|&v| (v != 0) as u8).collect() }
    }

    /// Tight bounding box of nonzero pixels as `(x0, y0, x1, y1)` inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != 0 {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Binary 2x downsample: a coarse pixel is set when at least half of its
    /// fine pixels are occupied.
    pub fn downsample2(&self) -> Mask {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        Mask::from_fn(w, h, |x, y| {
            let mut on = 0;
            let mut total = 0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let (fx, fy) = (2 * x + dx, 2 * y + dy);
                    if fx < self.width && fy < self.height {
                        total += 1;
                        on += (self.get(fx, fy) != 0) as usize;
                    }
                }
            }
            (2 * on >= total) as u8
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = Camera::new(500.0, [250.0, 250.0], 500, 500).unwrap();
        let uv = project(&[Vector3::new(0.0, 0.0, 2.0)], &cam).unwrap();
        assert_eq!(uv[0], Vector2::new(250.0, 250.0));
    }

    #[test]
    fn off_axis_point() {
        let cam = Camera::new(500.0, [250.0, 250.0], 500, 500).unwrap();
        let uv = project(&[Vector3::new(1.0, 0.0, 2.0)], &cam).unwrap();
        assert_eq!(uv[0], Vector2::new(500.0, 250.0));
    }

    #[test]
    fn zero_depth_is_an_error() {
        let cam = Camera::centered(500.0, 500, 500);
        let err = project(&[Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 0.0)], &cam).unwrap_err();
        assert!(matches!(err, RenderError::NonpositiveDepth { index: 1, .. }));
    }

    #[test]
    fn invalid_cameras() {
        assert!(Camera::new(0.0, [0.0, 0.0], 10, 10).is_err());
        assert!(Camera::new(10.0, [0.0, 0.0], 0, 10).is_err());
    }

    #[test]
    fn downsample_majority() {
        let m = Mask::from_fn(4, 2, |x, _| (x < 2) as u8);
        let d = m.downsample2();
        assert_eq!(d.data(), &[1, 0]);
    }
}
