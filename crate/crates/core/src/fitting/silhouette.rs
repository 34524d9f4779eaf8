use nalgebra::Vector3;

use super::FitError;
use crate::body_model::{BodyModel, Kinematics, PoseParams, ShapeParams, Translation};
use crate::render::{distance_transform, rasterize_region, Camera, DtImage, Mask, Viewport};

/// A target silhouette with its distance transform, computed once.
#[derive(Debug, Clone)]
pub struct SilhouetteData {
    mask: Mask,
    dt: DtImage,
    bbox: (usize, usize, usize, usize),
}

impl SilhouetteData {
    pub fn new(mask: &Mask) -> Result<Self, FitError> {
        let mask = mask.binarized();
        let bbox = mask.bounding_box().ok_or(FitError::EmptyTarget)?;
        let dt = distance_transform(&mask);
        Ok(SilhouetteData { mask, dt, bbox })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn dt(&self) -> &DtImage {
        &self.dt
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the occupied pixels.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        self.bbox
    }

    /// Half-resolution copy for coarse evaluation.
    pub fn downsampled(&self) -> Result<Self, FitError> {
        SilhouetteData::new(&self.mask.downsample2())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SilhouetteTerms {
    /// `sum_{x in model} dist(x, target)^2`
    pub model_to_target: f64,
    /// `sum_{x in target} dist(x, model)`
    pub target_to_model: f64,
}

impl SilhouetteTerms {
    pub fn total(&self) -> f64 {
        self.model_to_target + self.target_to_model
    }
}

/// Bi-directional silhouette distance between a model mask and the target.
/// Both masks must cover the full image.
pub fn mask_silhouette_energy(model_mask: &Mask, target: &SilhouetteData) -> Result<SilhouetteTerms, FitError> {
    if !model_mask.same_size(&target.mask) {
        return Err(FitError::InvalidInput(format!(
            "model mask {}x{} vs target {}x{}",
            model_mask.width(),
            model_mask.height(),
            target.mask.width(),
            target.mask.height()
        )));
    }
    if model_mask.is_empty() {
        return Err(FitError::EmptyProjection);
    }
    let model_dt = distance_transform(model_mask);
    let mut terms = SilhouetteTerms { model_to_target: 0.0, target_to_model: 0.0 };
    for (i, (&m, &t)) in model_mask.data().iter().zip(target.mask.data()).enumerate() {
        if m != 0 {
            let d = target.dt.data()[i];
            terms.model_to_target += d * d;
        }
        if t != 0 {
            terms.target_to_model += model_dt.data()[i];
        }
    }
    Ok(terms)
}

/// Silhouette energy of the posed model against `target`.
///
/// Only the window spanning both silhouettes is rasterized: every pixel that
/// contributes to either sum lies inside it and the nearest model pixel of a
/// target pixel does too, so the windowed distances are exact.
pub fn silhouette_energy(
    model: &BodyModel,
    pose: &PoseParams,
    beta: &ShapeParams,
    translation: &Translation,
    cam: &Camera,
    target: &SilhouetteData,
) -> Result<f64, FitError> {
    let kin = Kinematics::new(model, pose, beta, translation)?;
    let vertices: Vec<Vector3<f64>> = (0..model.n_vertices()).map(|v| kin.vertex(v)).collect();
    Ok(silhouette_terms_for_vertices(&vertices, &model.faces, cam, target)?.total())
}

pub(crate) fn silhouette_terms_for_vertices(
    vertices: &[Vector3<f64>],
    faces: &[[u32; 3]],
    cam: &Camera,
    target: &SilhouetteData,
) -> Result<SilhouetteTerms, FitError> {
    if target.mask.width() != cam.width as usize || target.mask.height() != cam.height as usize {
        return Err(FitError::InvalidInput("target mask does not match the camera image size".into()));
    }
    let (mut x0, mut y0, mut x1, mut y1) = {
        let b = target.bbox;
        (b.0 as f64, b.1 as f64, b.2 as f64, b.3 as f64)
    };
    let mut any_in_front = false;
    for v in vertices {
        if v.z > 0.0 {
            any_in_front = true;
            let p = cam.project_point(v);
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
    }
    if !any_in_front {
        return Err(FitError::EmptyProjection);
    }
    let clamp = |v: f64| v.clamp(-1e9, 1e9).floor() as i64;
    let vp = Viewport::from_bounds(cam, clamp(x0) - 1, clamp(y0) - 1, clamp(x1) + 1, clamp(y1) + 1);
    let raster = rasterize_region(vertices, faces, cam, vp);
    if raster.is_empty() {
        return Err(FitError::EmptyProjection);
    }
    let window: Vec<u8> = raster.face.iter().map(|&f| (f != crate::render::NO_FACE) as u8).collect();
    let window = Mask::from_vec(vp.width, vp.height, window).expect("viewport-sized buffer");
    let model_dt = distance_transform(&window);
    let mut terms = SilhouetteTerms { model_to_target: 0.0, target_to_model: 0.0 };
    let tw = target.mask.width();
    for wy in 0..vp.height {
        let row = (vp.y0 + wy) * tw + vp.x0;
        for wx in 0..vp.width {
            let i = row + wx;
            if window.get(wx, wy) != 0 {
                let d = target.dt.data()[i];
                terms.model_to_target += d * d;
            }
            if target.mask.data()[i] != 0 {
                terms.target_to_model += model_dt.get(wx, wy);
            }
        }
    }
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{mini, pose_mesh};
    use crate::render::{rasterize, RasterMode};

    /// Direct double sum over pixel pairs.
    pub(crate) fn brute_force(model: &Mask, target: &Mask) -> (f64, f64) {
        let pts = |m: &Mask| -> Vec<(f64, f64)> {
            (0..m.height())
                .flat_map(|y| (0..m.width()).map(move |x| (x, y)))
                .filter(|&(x, y)| m.get(x, y) != 0)
                .map(|(x, y)| (x as f64, y as f64))
                .collect()
        };
        let (a, b) = (pts(model), pts(target));
        let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
            set.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min)
        };
        let first: f64 = a.iter().map(|p| nearest(p, &b).powi(2)).sum();
        let second: f64 = b.iter().map(|p| nearest(p, &a)).sum();
        (first, second)
    }

    #[test]
    fn identical_masks_give_zero() {
        let m = Mask::from_fn(30, 20, |x, y| (x > 5 && x < 20 && y > 3 && y < 15) as u8);
        let t = SilhouetteData::new(&m).unwrap();
        assert_eq!(mask_silhouette_energy(&m, &t).unwrap().total(), 0.0);
    }

    #[test]
    fn shifted_square_matches_double_sum() {
        let target = Mask::from_fn(64, 64, |x, y| ((20..40).contains(&x) && (20..40).contains(&y)) as u8);
        let model = Mask::from_fn(64, 64, |x, y| ((23..43).contains(&x) && (20..40).contains(&y)) as u8);
        let t = SilhouetteData::new(&target).unwrap();
        let terms = mask_silhouette_energy(&model, &t).unwrap();
        let (a, b) = brute_force(&model, &target);
        // 20 rows each expose columns at distance 1, 2, 3
        assert_eq!(a, 20.0 * (1.0 + 4.0 + 9.0));
        assert!((terms.model_to_target - a).abs() < 1e-9);
        assert!((terms.target_to_model - b).abs() < 1e-9);
    }

    #[test]
    fn empty_model_projection_is_flagged() {
        let target = Mask::from_fn(10, 10, |x, _| (x == 3) as u8);
        let t = SilhouetteData::new(&target).unwrap();
        assert!(matches!(mask_silhouette_energy(&Mask::new(10, 10), &t), Err(FitError::EmptyProjection)));
        assert!(matches!(SilhouetteData::new(&Mask::new(4, 4)), Err(FitError::EmptyTarget)));
    }

    #[test]
    fn windowed_energy_matches_full_image() {
        let m = mini();
        let cam = Camera::centered(300.0, 160, 200);
        let mut pose = PoseParams::zeros(6);
        pose.0[3] = Vector3::new(0.0, 0.6, 0.5);
        let beta = ShapeParams(vec![0.2, 0.8]);
        let t_true = Vector3::new(0.0, 0.85, 3.2);
        let (target, _) = rasterize(&pose_mesh(m, &pose, &beta, &t_true).unwrap(), m, &cam, RasterMode::Silhouette);
        let target = SilhouetteData::new(&target).unwrap();
        for t in [Vector3::new(0.05, 0.8, 3.3), Vector3::new(-0.2, 0.9, 3.0), t_true] {
            let mesh = pose_mesh(m, &pose, &ShapeParams::zeros(2), &t).unwrap();
            let (full, _) = rasterize(&mesh, m, &cam, RasterMode::Silhouette);
            let expected = mask_silhouette_energy(&full, &target).unwrap().total();
            let got = silhouette_energy(m, &pose, &ShapeParams::zeros(2), &t, &cam, &target).unwrap();
            assert!((got - expected).abs() <= 1e-9 * expected.max(1.0), "{got} vs {expected}");
        }
    }

    #[test]
    fn model_behind_camera_is_flagged() {
        let m = mini();
        let cam = Camera::centered(300.0, 64, 64);
        let target = SilhouetteData::new(&Mask::from_fn(64, 64, |x, y| (x == y) as u8)).unwrap();
        let r = silhouette_energy(m, &PoseParams::zeros(6), &ShapeParams::zeros(2), &Vector3::new(0.0, 0.0, -3.0), &cam, &target);
        assert!(matches!(r, Err(FitError::EmptyProjection)));
    }
}
