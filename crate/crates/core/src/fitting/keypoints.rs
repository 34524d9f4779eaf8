use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::FitError;
use crate::body_model::{BodyModel, BodyPoint, Kinematics, KeypointSetDef, PoseParams, ShapeParams, Translation};
use crate::render::Camera;

/// 2D keypoints for one person, in the order of a named keypoint set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet2D {
    pub set_name: String,
    pub points: Vec<Vector2<f64>>,
    pub confidence: Vec<f64>,
}

impl KeypointSet2D {
    pub fn new(set_name: impl Into<String>, points: Vec<Vector2<f64>>, confidence: Vec<f64>) -> Self {
        KeypointSet2D { set_name: set_name.into(), points, confidence }
    }

    /// All points with confidence 1.
    pub fn certain(set_name: impl Into<String>, points: Vec<Vector2<f64>>) -> Self {
        let n = points.len();
        KeypointSet2D::new(set_name, points, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_visible(&self) -> usize {
        self.confidence.iter().filter(|&&c| c > 0.0).count()
    }

    /// Checks the record against the model and returns the matching set.
    pub fn resolve<'m>(&self, model: &'m BodyModel) -> Result<&'m KeypointSetDef, FitError> {
        let set = model.keypoint_set(&self.set_name).ok_or_else(|| FitError::UnknownKeypointSet(self.set_name.clone()))?;
        if set.sources.len() != self.points.len() || self.confidence.len() != self.points.len() {
            return Err(FitError::InvalidKeypoints(format!(
                "set {:?} has {} keypoints, record has {} points and {} confidences",
                self.set_name,
                set.sources.len(),
                self.points.len(),
                self.confidence.len()
            )));
        }
        for (i, (p, &c)) in self.points.iter().zip(&self.confidence).enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(FitError::InvalidKeypoints(format!("keypoint {i}: confidence {c} outside [0, 1]")));
            }
            if c > 0.0 && !(p.x.is_finite() && p.y.is_finite()) {
                return Err(FitError::InvalidKeypoints(format!("keypoint {i}: non-finite position")));
            }
        }
        Ok(set)
    }

    /// Projects the model's keypoints for the given parameters.
    pub fn from_model(
        model: &BodyModel,
        set_name: &str,
        cam: &Camera,
        pose: &PoseParams,
        beta: &ShapeParams,
        translation: &Translation,
    ) -> Result<Self, FitError> {
        let set = model.keypoint_set(set_name).ok_or_else(|| FitError::UnknownKeypointSet(set_name.to_string()))?;
        let kin = Kinematics::new(model, pose, beta, translation)?;
        let pts = crate::body_model::keypoint_positions(&kin, set);
        let uv = crate::render::project(&pts, cam)?;
        Ok(KeypointSet2D::certain(set_name, uv))
    }

    /// Same keypoints under `p -> scale * p + offset`.
    pub fn transformed(&self, scale: f64, offset: Vector2<f64>) -> Self {
        KeypointSet2D {
            set_name: self.set_name.clone(),
            points: self.points.iter().map(|p| p * scale + offset).collect(),
            confidence: self.confidence.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("set {}\n", self.set_name);
        for (p, c) in self.points.iter().zip(&self.confidence) {
            let _ = writeln!(s, "{} {} {}", p.x, p.y, c);
        }
        s
    }
}

/// Parses keypoint text: each record starts with `set <name>` followed by one
/// `x y confidence` line per keypoint. Blank lines and `#` comments are
/// skipped.
pub fn parse_keypoints(text: &str) -> Result<Vec<KeypointSet2D>, FitError> {
    let mut out: Vec<KeypointSet2D> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| FitError::InvalidKeypoints(format!("line {}: {msg}", i + 1));
        if let Some(name) = line.strip_prefix("set ") {
            let name = name.trim();
            if name.is_empty() {
                return Err(bad("empty set name".into()));
            }
            out.push(KeypointSet2D::new(name, Vec::new(), Vec::new()));
            continue;
        }
        let rec = out.last_mut().ok_or_else(|| bad("keypoint before any `set` line".into()))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("not a number: {t:?}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 3 {
            return Err(bad(format!("expected `x y confidence`, got {} values", vals.len())));
        }
        rec.points.push(Vector2::new(vals[0], vals[1]));
        rec.confidence.push(vals[2]);
    }
    Ok(out)
}

pub fn read_keypoints(path: &Path) -> Result<Vec<KeypointSet2D>, FitError> {
    let text = std::fs::read_to_string(path).map_err(|e| FitError::Io(format!("{}: {e}", path.display())))?;
    parse_keypoints(&text)
}

/// Reads a file that must hold exactly one person.
pub fn read_keypoint_file(path: &Path) -> Result<KeypointSet2D, FitError> {
    let mut recs = read_keypoints(path)?;
    match recs.len() {
        1 => Ok(recs.remove(0)),
        n => Err(FitError::InvalidKeypoints(format!("{}: expected 1 record, found {n}", path.display()))),
    }
}

pub fn write_keypoint_file(kp: &KeypointSet2D, path: &Path) -> Result<(), FitError> {
    std::fs::write(path, kp.to_text()).map_err(|e| FitError::Io(format!("{}: {e}", path.display())))
}

/// Geman-McClure robustifier on a residual norm `r`: `sigma^2 r^2 / (sigma^2 + r^2)`.
#[inline]
pub fn geman_mcclure(r: f64, sigma: f64) -> f64 {
    let (s2, r2) = (sigma * sigma, r * r);
    s2 * r2 / (s2 + r2)
}

/// Derivative of the robustifier with respect to the squared residual.
#[inline]
fn geman_mcclure_dsq(r2: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    s2 * s2 / ((s2 + r2) * (s2 + r2))
}

/// `sum_p conf_p * rho(|project(point_p) - kp_p|)`.
pub fn keypoint_energy(
    model: &BodyModel,
    pose: &PoseParams,
    beta: &ShapeParams,
    translation: &Translation,
    cam: &Camera,
    kp: &KeypointSet2D,
    sigma: f64,
) -> Result<f64, FitError> {
    let set = kp.resolve(model)?;
    let kin = Kinematics::new(model, pose, beta, translation)?;
    let mut e = 0.0;
    for (p, &src) in set.sources.iter().enumerate() {
        let c = kp.confidence[p];
        if c == 0.0 {
            continue;
        }
        let x = kin.point(BodyPoint::from_keypoint(model, src));
        if x.z <= 0.0 {
            return Err(FitError::BehindCamera);
        }
        e += c * geman_mcclure((cam.project_point(&x) - kp.points[p]).norm(), sigma);
    }
    Ok(e)
}

/// Keypoint energy and its exact gradient with respect to the flat parameter
/// vector `[pose | shape | translation]`.
pub fn keypoint_energy_gradient(
    model: &BodyModel,
    params: &[f64],
    cam: &Camera,
    kp: &KeypointSet2D,
    sigma: f64,
) -> Result<(f64, Vec<f64>), FitError> {
    let set = kp.resolve(model)?;
    let (pose, beta, trans) = super::unpack_params(model, params)?;
    let kin = Kinematics::new(model, &pose, &beta, &trans)?;
    let mut e = 0.0;
    let mut grad = vec![0.0; model.n_params()];
    for (p, &src) in set.sources.iter().enumerate() {
        let c = kp.confidence[p];
        if c == 0.0 {
            continue;
        }
        let lin = linearize_point(&kin, BodyPoint::from_keypoint(model, src), cam, &kp.points[p])?;
        let r2 = lin.residual.norm_squared();
        e += c * geman_mcclure(r2.sqrt(), sigma);
        let w = 2.0 * c * geman_mcclure_dsq(r2, sigma);
        for (g, col) in grad.iter_mut().zip(&lin.jacobian) {
            *g += w * col.dot(&lin.residual);
        }
    }
    Ok((e, grad))
}

/// Projected residual `project(x) - target` and its Jacobian columns.
pub(crate) struct PointLinearization {
    pub residual: Vector2<f64>,
    pub jacobian: Vec<Vector2<f64>>,
}

pub(crate) fn linearize_point(
    kin: &Kinematics<'_>,
    point: BodyPoint,
    cam: &Camera,
    target: &Vector2<f64>,
) -> Result<PointLinearization, FitError> {
    let (x, dx) = kin.point_jacobian(point);
    if x.z <= 0.0 {
        return Err(FitError::BehindCamera);
    }
    let residual = cam.project_point(&x) - target;
    let jacobian = dx.iter().map(|d| projection_derivative(cam, &x, d)).collect();
    Ok(PointLinearization { residual, jacobian })
}

#[inline]
pub(crate) fn projection_derivative(cam: &Camera, x: &Vector3<f64>, dx: &Vector3<f64>) -> Vector2<f64> {
    let iz = 1.0 / x.z;
    Vector2::new(cam.focal * iz * (dx.x - x.x * iz * dx.z), cam.focal * iz * (dx.y - x.y * iz * dx.z))
}

/// Internal cost pieces shared with the optimizer: robust residuals are
/// reweighted so the Gauss-Newton model has the exact gradient.
pub(crate) struct RobustTerm {
    pub cost: f64,
    pub weight: f64,
}

pub(crate) fn robust_term(residual: &Vector2<f64>, conf: f64, sigma: f64) -> RobustTerm {
    let r2 = residual.norm_squared();
    let weight = conf * geman_mcclure_dsq(r2, sigma);
    RobustTerm { cost: conf * geman_mcclure(r2.sqrt(), sigma), weight }
}
