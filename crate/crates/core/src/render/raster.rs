use nalgebra::{Vector2, Vector3};

use super::{Camera, Mask};
use crate::body_model::{BodyModel, PosedMesh};

pub const NO_FACE: u32 = u32::MAX;
/// Triangles with a vertex closer than this are dropped.
const NEAR_PLANE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterMode {
    Silhouette,
    /// Front-most face's part label + 1 per pixel, 0 for background.
    Parts,
}

/// A rectangular window `[x0, x0 + width) x [y0, y0 + height)` of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Viewport {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Viewport {
    pub fn full(cam: &Camera) -> Self {
        Viewport { x0: 0, y0: 0, width: cam.width as usize, height: cam.height as usize }
    }

    /// Inclusive pixel bounds, clamped to the image.
    pub fn from_bounds(cam: &Camera, x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        let cx0 = x0.clamp(0, cam.width as i64 - 1) as usize;
        let cy0 = y0.clamp(0, cam.height as i64 - 1) as usize;
        let cx1 = x1.clamp(0, cam.width as i64 - 1) as usize;
        let cy1 = y1.clamp(0, cam.height as i64 - 1) as usize;
        Viewport { x0: cx0, y0: cy0, width: cx1.saturating_sub(cx0) + 1, height: cy1.saturating_sub(cy0) + 1 }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.width && y < self.y0 + self.height
    }
}

/// Face-index and depth buffers over a viewport.
#[derive(Debug, Clone)]
pub struct Raster {
    pub viewport: Viewport,
    pub face: Vec<u32>,
    pub depth: Vec<f64>,
    /// Number of covered pixels.
    pub covered: usize,
}

impl Raster {
    /// No pixel of the viewport was covered (mesh behind the camera or
    /// outside the frame).
    pub fn is_empty(&self) -> bool {
        self.covered == 0
    }

    /// Depth at an image pixel, if covered.
    pub fn depth_at(&self, x: usize, y: usize) -> Option<f64> {
        if !self.viewport.contains(x, y) {
            return None;
        }
        let i = (y - self.viewport.y0) * self.viewport.width + (x - self.viewport.x0);
        (self.face[i] != NO_FACE).then_some(self.depth[i])
    }

    pub fn face_at(&self, x: usize, y: usize) -> Option<u32> {
        if !self.viewport.contains(x, y) {
            return None;
        }
        let i = (y - self.viewport.y0) * self.viewport.width + (x - self.viewport.x0);
        (self.face[i] != NO_FACE).then_some(self.face[i])
    }

    /// Mask over the viewport.
    pub fn to_mask(&self, mode: RasterMode, part_label: &[u8]) -> Mask {
        let data = self
            .face
            .iter()
            .map(|&f| match (f, mode) {
                (NO_FACE, _) => 0,
                (_, RasterMode::Silhouette) => 1,
                (f, RasterMode::Parts) => part_label[f as usize] + 1,
            })
            .collect();
        Mask::from_vec(self.viewport.width, self.viewport.height, data).expect("viewport-sized buffer")
    }
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

/// Z-buffered rasterization of `faces` over `viewport`.
///
/// Pixel `(x, y)` is covered by a triangle iff its center `(x + 0.5, y + 0.5)`
/// lies inside or on the boundary of the projected triangle. Depth is
/// interpolated perspective-correctly; on exact depth ties the earlier face
/// wins.
pub fn rasterize_region(vertices: &[Vector3<f64>], faces: &[[u32; 3]], cam: &Camera, viewport: Viewport) -> Raster {
    let (vw, vh) = (viewport.width, viewport.height);
    let mut face_buf = vec![NO_FACE; vw * vh];
    let mut depth = vec![f64::INFINITY; vw * vh];
    let mut covered = 0;
    let projected: Vec<Option<Vector2<f64>>> =
        vertices.iter().map(|p| (p.z > NEAR_PLANE).then(|| cam.project_point(p))).collect();

    for (fi, face) in faces.iter().enumerate() {
        let [ia, ib, ic] = face.map(|i| i as usize);
        let (Some(a), Some(b), Some(c)) = (projected[ia], projected[ib], projected[ic]) else {
            continue;
        };
        let area = edge(&a, &b, c.x, c.y);
        if area.abs() < 1e-12 || !area.is_finite() {
            continue;
        }
        let inv_z = [1.0 / vertices[ia].z, 1.0 / vertices[ib].z, 1.0 / vertices[ic].z];
        let min_x = a.x.min(b.x).min(c.x);
        let max_x = a.x.max(b.x).max(c.x);
        let min_y = a.y.min(b.y).min(c.y);
        let max_y = a.y.max(b.y).max(c.y);
        // pixel centers x + 0.5 within [min_x, max_x]
        let x_lo = ((min_x - 0.5).ceil() as i64).max(viewport.x0 as i64);
        let x_hi = ((max_x - 0.5).floor() as i64).min((viewport.x0 + vw) as i64 - 1);
        let y_lo = ((min_y - 0.5).ceil() as i64).max(viewport.y0 as i64);
        let y_hi = ((max_y - 0.5).floor() as i64).min((viewport.y0 + vh) as i64 - 1);
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        let sign = area.signum();
        for y in y_lo..=y_hi {
            let py = y as f64 + 0.5;
            let row = (y as usize - viewport.y0) * vw;
            for x in x_lo..=x_hi {
                let px = x as f64 + 0.5;
                let w0 = edge(&b, &c, px, py) * sign;
                let w1 = edge(&c, &a, px, py) * sign;
                let w2 = edge(&a, &b, px, py) * sign;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let s = w0 + w1 + w2;
                let iz = (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]) / s;
                let z = 1.0 / iz;
                let idx = row + (x as usize - viewport.x0);
                if z < depth[idx] {
                    if face_buf[idx] == NO_FACE {
                        covered += 1;
                    }
                    depth[idx] = z;
                    face_buf[idx] = fi as u32;
                }
            }
        }
    }
    Raster { viewport, face: face_buf, depth, covered }
}

/// Rasterizes a posed mesh over the full image.
pub fn rasterize(mesh: &PosedMesh, model: &BodyModel, cam: &Camera, mode: RasterMode) -> (Mask, Raster) {
    let raster = rasterize_region(&mesh.vertices, &model.faces, cam, Viewport::full(cam));
    (raster.to_mask(mode, &model.part_label), raster)
}
