use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FitError, KeypointSet2D};
use crate::body_model::{keypoint_positions, stature, BodyModel, Kinematics, PoseParams, ShapeParams, Translation};
use crate::render::{Camera, Viewpoint, DEFAULT_ELEVATION_BAND};
use crate::so3;

/// Quantile levels stored per connection.
pub const RATIO_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Distribution summary of `person size / projected connection length`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionRatio {
    pub connection: (usize, usize),
    pub mode: f64,
    pub quantiles: [f64; 5],
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub n_samples: usize,
    pub seed: u64,
    /// Per keypoint set, one entry per connection in the set's order.
    pub sets: BTreeMap<String, Vec<ConnectionRatio>>,
}

impl RatioTable {
    pub fn for_set(&self, name: &str) -> Option<&[ConnectionRatio]> {
        self.sets.get(name).map(Vec::as_slice)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), FitError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| FitError::Io(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| FitError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FitError> {
        let text = std::fs::read_to_string(path).map_err(|e| FitError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| FitError::Io(format!("{}: {e}", path.display())))
    }
}

/// Ranges the table's synthetic people are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RatioSampling {
    /// Shape coefficients uniform in `[-beta_range, beta_range]`.
    pub beta_range: f64,
    /// Non-root axis-angle components uniform in `[-pose_range, pose_range]` (radians).
    pub pose_range: f64,
    /// Viewing elevation band in degrees; azimuth covers the full circle.
    pub elevation_band: (f64, f64),
    pub distance: f64,
    pub focal: f64,
}

impl Default for RatioSampling {
    fn default() -> Self {
        RatioSampling { beta_range: 1.0, pose_range: 0.6, elevation_band: DEFAULT_ELEVATION_BAND, distance: 5.0, focal: 1000.0 }
    }
}

/// Projected person size of a body: its stature seen at the root joint's depth.
pub fn projected_person_size(model: &BodyModel, beta: &ShapeParams, root_depth: f64, focal: f64) -> f64 {
    focal * stature(model, beta) / root_depth
}

pub fn build_ratio_table(model: &BodyModel, n_samples: usize, seed: u64) -> Result<RatioTable, FitError> {
    build_ratio_table_with(model, n_samples, seed, &RatioSampling::default())
}

pub fn build_ratio_table_with(
    model: &BodyModel,
    n_samples: usize,
    seed: u64,
    sampling: &RatioSampling,
) -> Result<RatioTable, FitError> {
    if n_samples < 100 {
        return Err(FitError::InvalidInput(format!("ratio table needs at least 100 samples, got {n_samples}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::centered(sampling.focal, 1000, 1000);
    let sets: Vec<(&String, &crate::body_model::KeypointSetDef)> =
        model.keypoint_sets.iter().filter(|(_, s)| !s.connections.is_empty()).collect();
    let mut ratios: Vec<Vec<Vec<f64>>> = sets.iter().map(|(_, s)| vec![Vec::with_capacity(n_samples); s.connections.len()]).collect();

    for _ in 0..n_samples {
        let beta = ShapeParams((0..model.n_shape()).map(|_| rng.gen_range(-sampling.beta_range..=sampling.beta_range)).collect());
        let mut pose = PoseParams::zeros(model.n_joints());
        for j in 1..model.n_joints() {
            pose.0[j] = Vector3::from_fn(|_, _| rng.gen_range(-sampling.pose_range..=sampling.pose_range));
        }
        let view = Viewpoint {
            elevation_deg: rng.gen_range(sampling.elevation_band.0..=sampling.elevation_band.1),
            azimuth_deg: rng.gen_range(0.0..360.0),
            distance: sampling.distance,
        };
        let root = model.rest_joints(&beta.0)[0];
        pose.0[0] = so3::log(&view.rotation());
        let translation: Translation = Vector3::new(0.0, 0.0, sampling.distance) - root;
        let kin = Kinematics::new(model, &pose, &beta, &translation)?;
        let size = projected_person_size(model, &beta, sampling.distance, cam.focal);
        for (s, (_, set)) in sets.iter().enumerate() {
            let uv: Vec<Vector2<f64>> = keypoint_positions(&kin, set).iter().map(|p| cam.project_point(p)).collect();
            for (c, &(a, b)) in set.connections.iter().enumerate() {
                let len = (uv[a] - uv[b]).norm();
                if len > 1e-9 {
                    ratios[s][c].push(size / len);
                }
            }
        }
    }

    let mut out = BTreeMap::new();
    for ((name, set), per_conn) in sets.iter().zip(ratios) {
        let mut entries = Vec::with_capacity(per_conn.len());
        for (&connection, mut samples) in set.connections.iter().zip(per_conn) {
            if samples.is_empty() {
                return Err(FitError::InvalidInput(format!("set {name}: connection {connection:?} is always degenerate")));
            }
            samples.sort_by(f64::total_cmp);
            let mode = half_sample_mode_sorted(&samples);
            let quantiles = RATIO_QUANTILES.map(|q| quantile_sorted(&samples, q));
            entries.push(ConnectionRatio { connection, mode, quantiles, samples: samples.len() });
        }
        out.insert((*name).clone(), entries);
    }
    Ok(RatioTable { n_samples, seed, sets: out })
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(x: &[f64], q: f64) -> f64 {
    let pos = q * (x.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    x[lo] + (x[hi] - x[lo]) * (pos - lo as f64)
}

/// Half-sample mode: repeatedly keep the densest half of the sorted sample.
pub fn half_sample_mode(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() || samples.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    Some(half_sample_mode_sorted(&x))
}

fn half_sample_mode_sorted(x: &[f64]) -> f64 {
    let mut x = x;
    while x.len() > 3 {
        let h = x.len().div_ceil(2);
        let mut best = 0;
        let mut width = f64::INFINITY;
        for i in 0..=x.len() - h {
            let w = x[i + h - 1] - x[i];
            if w < width {
                width = w;
                best = i;
            }
        }
        x = &x[best..best + h];
    }
    match x.len() {
        1 => x[0],
        2 => 0.5 * (x[0] + x[1]),
        _ => {
            let (d0, d1) = (x[1] - x[0], x[2] - x[1]);
            if d0 < d1 {
                0.5 * (x[0] + x[1])
            } else if d0 > d1 {
                0.5 * (x[1] + x[2])
            } else {
                x[1]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonSizeEstimate {
    /// Estimated projected person size in pixels.
    pub size: f64,
    /// Connection index whose 2D length drove the estimate.
    pub connection: usize,
    pub length: f64,
}

/// Person size from the longest visible skeleton connection: projection can
/// only shorten a connection, so the longest one is the least foreshortened.
pub fn estimate_person_size(kp: &KeypointSet2D, table: &RatioTable) -> Result<PersonSizeEstimate, FitError> {
    let entries = table.for_set(&kp.set_name).ok_or_else(|| FitError::UnknownKeypointSet(kp.set_name.clone()))?;
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in entries.iter().enumerate() {
        let (a, b) = e.connection;
        if a >= kp.len() || b >= kp.len() {
            return Err(FitError::InvalidKeypoints(format!("connection {i} refers past keypoint {}", kp.len())));
        }
        if kp.confidence[a] <= 0.0 || kp.confidence[b] <= 0.0 {
            continue;
        }
        let len = (kp.points[a] - kp.points[b]).norm();
        if best.is_none_or(|(_, l)| len > l) {
            best = Some((i, len));
        }
    }
    match best {
        Some((i, len)) if len > 0.0 => Ok(PersonSizeEstimate { size: len * entries[i].mode, connection: i, length: len }),
        _ => Err(FitError::NoValidConnection),
    }
}

/// Translation that puts the root at the depth implied by `size` and centres
/// the model's visible keypoints on the observed ones.
pub fn init_depth(size: f64, cam: &Camera, model: &BodyModel, kp: &KeypointSet2D) -> Result<Translation, FitError> {
    init_depth_with_pose(size, cam, model, kp, &PoseParams::zeros(model.n_joints()))
}

pub(crate) fn init_depth_with_pose(
    size: f64,
    cam: &Camera,
    model: &BodyModel,
    kp: &KeypointSet2D,
    pose: &PoseParams,
) -> Result<Translation, FitError> {
    if !(size > 0.0 && size.is_finite()) {
        return Err(FitError::InvalidInput(format!("person size must be positive, got {size}")));
    }
    let set = kp.resolve(model)?;
    let beta = ShapeParams::zeros(model.n_shape());
    let root = model.rest_joints(&beta.0)[0];
    let z = cam.focal * model.canonical_height / size;
    let kin = Kinematics::new(model, pose, &beta, &Vector3::zeros())?;
    let pts = keypoint_positions(&kin, set);
    let (mut model_c, mut image_c, mut n) = (Vector3::zeros(), Vector2::zeros(), 0.0);
    for (i, p) in pts.iter().enumerate() {
        if kp.confidence[i] > 0.0 {
            model_c += p;
            image_c += kp.points[i];
            n += 1.0;
        }
    }
    let mut t = Vector3::new(0.0, 0.0, z - root.z);
    if n > 0.0 {
        model_c /= n;
        image_c /= n;
        t.x = (image_c.x - cam.principal_point[0]) * z / cam.focal - model_c.x;
        t.y = (image_c.y - cam.principal_point[1]) * z / cam.focal - model_c.y;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::mini;
    use proptest::prelude::*;

    #[test]
    fn hsm_small_cases() {
        assert_eq!(half_sample_mode(&[2.0]), Some(2.0));
        assert_eq!(half_sample_mode(&[1.0, 3.0]), Some(2.0));
        assert_eq!(half_sample_mode(&[1.0, 1.1, 5.0]), Some(1.05));
        assert_eq!(half_sample_mode(&[]), None);
        // dense cluster wins over a long tail
        let mut v = vec![10.0, 10.1, 10.2, 10.15, 10.05];
        v.extend([13.0, 17.0, 25.0, 40.0]);
        let m = half_sample_mode(&v).unwrap();
        assert!((10.0..=10.2).contains(&m));
    }

    proptest! {
        #[test]
        fn hsm_within_range(v in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
            let m = half_sample_mode(&v).unwrap();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo && m <= hi);
        }
    }

    #[test]
    fn table_is_deterministic_and_sane() {
        let m = mini();
        let a = build_ratio_table(m, 300, 7).unwrap();
        let b = build_ratio_table(m, 300, 7).unwrap();
        assert_eq!(a, b);
        for entries in a.sets.values() {
            for e in entries {
                assert!(e.mode >= 1.0);
                assert!(e.quantiles.windows(2).all(|w| w[0] <= w[1]));
            }
        }
        assert!(build_ratio_table(m, 50, 7).is_err());
    }

    #[test]
    fn init_depth_similar_triangles() {
        let m = mini();
        let cam = Camera::centered(500.0, 500, 500);
        let kp = KeypointSet2D::certain("skeleton", vec![Vector2::new(250.0, 250.0); 9]);
        assert!((init_depth(500.0, &cam, m, &kp).unwrap().z - 1.7).abs() < 1e-12);
        assert!((init_depth(250.0, &cam, m, &kp).unwrap().z - 3.4).abs() < 1e-12);
    }

    #[test]
    fn no_visible_connection() {
        let m = mini();
        let table = build_ratio_table(m, 100, 1).unwrap();
        let kp = KeypointSet2D::new("skeleton", vec![Vector2::new(1.0, 2.0); 9], vec![0.0; 9]);
        assert!(matches!(estimate_person_size(&kp, &table), Err(FitError::NoValidConnection)));
    }
}
