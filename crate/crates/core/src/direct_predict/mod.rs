//! Direct prediction of body model parameters from 2D surface landmarks.
//!
//! One forest per joint regresses the full 3x3 rotation (camera frame for
//! the root, parent-local otherwise), one forest the shape and one the root
//! depth. Inputs are landmarks normalised for position and scale; the depth
//! forest additionally sees the log of the removed scale over the focal
//! length, without which depth would be unobservable.

mod format;
mod forest;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body_model::{surface_landmarks, BodyModel, Kinematics, ModelError, PoseParams, ShapeParams, Translation};
use crate::fitting::{refine_root, FitError, FitResult, KeypointSet2D};
use crate::render::{project, Camera, ViewpointSet};
use crate::so3;

pub use format::{load_dp_model, read_dp_model, save_dp_model, write_dp_model, DP_MAGIC, DP_VERSION};
pub use forest::{ForestParams, RegressionForest, Tree, LEAF};

#[derive(Debug, thiserror::Error)]
pub enum DpError {
    #[error("degenerate landmarks: all points coincide")]
    Degenerate,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Landmarks with centroid removed and scaled to unit RMS radius.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLandmarks {
    /// `x0 y0 x1 y1 ...`
    pub coords: Vec<f64>,
    pub centroid: Vector2<f64>,
    /// RMS distance of the input points from their centroid.
    pub scale: f64,
}

impl NormalizedLandmarks {
    pub fn points(&self) -> Vec<Vector2<f64>> {
        self.coords.chunks(2).map(|c| Vector2::new(c[0], c[1])).collect()
    }

    pub fn denormalize(&self) -> Vec<Vector2<f64>> {
        self.points().iter().map(|p| p * self.scale + self.centroid).collect()
    }
}

pub fn normalize_landmarks(points: &[Vector2<f64>]) -> Result<NormalizedLandmarks, DpError> {
    if points.is_empty() {
        return Err(DpError::Degenerate);
    }
    let centroid = points.iter().sum::<Vector2<f64>>() / points.len() as f64;
    let scale = (points.iter().map(|p| (p - centroid).norm_squared()).sum::<f64>() / points.len() as f64).sqrt();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(DpError::Degenerate);
    }
    let coords = points.iter().flat_map(|p| {
        let q = (p - centroid) / scale;
        [q.x, q.y]
    });
    Ok(NormalizedLandmarks { coords: coords.collect(), centroid, scale })
}

/// Extra input of the depth forest.
fn scale_feature(scale: f64, cam: &Camera) -> f64 {
    (scale / cam.focal).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSource {
    pub pose: usize,
    pub view: usize,
}

/// Rows of (normalised landmarks, targets). Row-major flat storage.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub n_landmarks: usize,
    pub n_joints: usize,
    pub n_shape: usize,
    /// `rows x 2L`
    pub inputs: Vec<f64>,
    /// `rows x 2`, image centroid of the projected landmarks.
    pub centroids: Vec<f64>,
    /// RMS radius of the projected landmarks, pixels.
    pub scales: Vec<f64>,
    /// Depth-forest scale feature per row.
    pub log_scales: Vec<f64>,
    /// `rows x 9K`, row-major 3x3 per joint.
    pub rotations: Vec<f64>,
    /// `rows x B`
    pub shapes: Vec<f64>,
    /// Camera-frame z of the root joint, meters.
    pub depths: Vec<f64>,
    pub sources: Vec<RowSource>,
    /// Configurations skipped because a landmark fell behind the camera.
    pub dropped: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn input(&self, row: usize) -> &[f64] {
        let d = 2 * self.n_landmarks;
        &self.inputs[row * d..(row + 1) * d]
    }

    /// The row's input with its de-normalisation metadata.
    pub fn normalized(&self, row: usize) -> NormalizedLandmarks {
        NormalizedLandmarks {
            coords: self.input(row).to_vec(),
            centroid: Vector2::new(self.centroids[2 * row], self.centroids[2 * row + 1]),
            scale: self.scales[row],
        }
    }

    pub fn rotation(&self, row: usize, joint: usize) -> Matrix3<f64> {
        let o = row * 9 * self.n_joints + 9 * joint;
        Matrix3::from_row_slice(&self.rotations[o..o + 9])
    }

    pub fn shape(&self, row: usize) -> &[f64] {
        &self.shapes[row * self.n_shape..(row + 1) * self.n_shape]
    }

    /// The pose, shape and root depth stored for `row`.
    pub fn targets(&self, row: usize) -> (PoseParams, ShapeParams, f64) {
        let pose = PoseParams((0..self.n_joints).map(|j| so3::log(&self.rotation(row, j))).collect());
        (pose, ShapeParams(self.shape(row).to_vec()), self.depths[row])
    }

    /// Rows whose source pose satisfies `keep`.
    pub fn subset(&self, keep: impl Fn(&RowSource) -> bool) -> TrainingSet {
        let rows: Vec<usize> = (0..self.len()).filter(|&r| keep(&self.sources[r])).collect();
        let pick = |v: &[f64], w: usize| rows.iter().flat_map(|&r| v[r * w..(r + 1) * w].iter().copied()).collect();
        TrainingSet {
            n_landmarks: self.n_landmarks,
            n_joints: self.n_joints,
            n_shape: self.n_shape,
            inputs: pick(&self.inputs, 2 * self.n_landmarks),
            centroids: pick(&self.centroids, 2),
            scales: pick(&self.scales, 1),
            log_scales: pick(&self.log_scales, 1),
            rotations: pick(&self.rotations, 9 * self.n_joints),
            shapes: pick(&self.shapes, self.n_shape),
            depths: pick(&self.depths, 1),
            sources: rows.iter().map(|&r| self.sources[r]).collect(),
            dropped: 0,
        }
    }

    /// Hash over every stored value, recorded in trained models.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [&self.inputs, &self.log_scales, &self.rotations, &self.shapes, &self.depths] {
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Pose and shape of the body shown from `view`: the root rotation composed
/// with the view rotation and the translation that centres the body at the
/// view distance.
pub fn view_configuration(
    model: &BodyModel,
    pose: &PoseParams,
    beta: &ShapeParams,
    view: &crate::render::Viewpoint,
) -> Result<(PoseParams, Translation), DpError> {
    let zero = Translation::zeros();
    let kin = Kinematics::new(model, pose, beta, &zero)?;
    let centroid = kin.mesh().centroid();
    let root = model.rest_joints(&beta.0)[0];
    let (root_rot, t) = view.place(&so3::exp(&pose.0[0]), &root, &centroid);
    let mut viewed = pose.clone();
    viewed.0[0] = so3::log(&root_rot);
    Ok((viewed, t))
}

/// Projects every pose from every viewpoint. Rows are ordered pose-major.
pub fn synthesize_training_set(
    poses: &[(PoseParams, ShapeParams)],
    model: &BodyModel,
    views: &ViewpointSet,
    cam: &Camera,
) -> Result<TrainingSet, DpError> {
    if poses.is_empty() {
        return Err(DpError::InsufficientData("no poses".into()));
    }
    let (k, b, l) = (model.n_joints(), model.n_shape(), model.n_landmarks());
    struct Row {
        norm: NormalizedLandmarks,
        log_scale: f64,
        rotations: Vec<f64>,
        shape: Vec<f64>,
        depth: f64,
        source: RowSource,
    }
    let per_pose: Vec<Result<(Vec<Row>, usize), DpError>> = poses
        .par_iter()
        .enumerate()
        .map(|(pi, (pose, beta))| {
            let mut rows = Vec::with_capacity(views.len());
            let mut dropped = 0;
            for (vi, view) in views.views.iter().enumerate() {
                let (viewed, t) = view_configuration(model, pose, beta, view)?;
                let kin = Kinematics::new(model, &viewed, beta, &t)?;
                let mesh = kin.mesh();
                let Ok(uv) = project(&surface_landmarks(&mesh, model), cam) else {
                    dropped += 1;
                    continue;
                };
                let Ok(norm) = normalize_landmarks(&uv) else {
                    dropped += 1;
                    continue;
                };
                let rot: Vec<f64> = viewed
                    .matrices()
                    .iter()
                    .flat_map(|m| (0..3).flat_map(move |r| (0..3).map(move |c| m[(r, c)])))
                    .collect();
                rows.push(Row {
                    log_scale: scale_feature(norm.scale, cam),
                    norm,
                    rotations: rot,
                    shape: beta.0.clone(),
                    depth: mesh.joints3d[0].z,
                    source: RowSource { pose: pi, view: vi },
                });
            }
            Ok((rows, dropped))
        })
        .collect();
    let mut ts = TrainingSet { n_landmarks: l, n_joints: k, n_shape: b, ..TrainingSet::default() };
    for r in per_pose {
        let (rows, dropped) = r?;
        ts.dropped += dropped;
        for row in rows {
            ts.inputs.extend(row.norm.coords);
            ts.centroids.extend([row.norm.centroid.x, row.norm.centroid.y]);
            ts.scales.push(row.norm.scale);
            ts.log_scales.push(row.log_scale);
            ts.rotations.extend(row.rotations);
            ts.shapes.extend(row.shape);
            ts.depths.push(row.depth);
            ts.sources.push(row.source);
        }
    }
    if ts.dropped > 0 {
        log::info!("dropped {} configurations with landmarks behind the camera", ts.dropped);
    }
    Ok(ts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpMeta {
    pub n_landmarks: usize,
    pub n_joints: usize,
    pub n_shape: usize,
    pub params: ForestParams,
    pub seed: u64,
    pub n_rows: usize,
    pub training_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpModel {
    pub meta: DpMeta,
    /// One per joint, 9 outputs each.
    pub joint_forests: Vec<RegressionForest>,
    pub shape_forest: RegressionForest,
    /// Inputs are the normalised landmarks followed by the scale feature.
    pub depth_forest: RegressionForest,
}

impl DpModel {
    pub fn n_forests(&self) -> usize {
        self.joint_forests.len() + 2
    }
}

/// Trains every forest; forests are independent and trained in parallel.
pub fn train(ts: &TrainingSet, params: &ForestParams, seed: u64) -> Result<DpModel, DpError> {
    params.validate().map_err(DpError::InvalidParams)?;
    if ts.len() < 2 * params.min_leaf {
        return Err(DpError::InsufficientData(format!("{} rows, need {}", ts.len(), 2 * params.min_leaf)));
    }
    let (k, b, d) = (ts.n_joints, ts.n_shape, 2 * ts.n_landmarks);
    let depth_inputs: Vec<f64> =
        (0..ts.len()).flat_map(|r| ts.input(r).iter().copied().chain(std::iter::once(ts.log_scales[r]))).collect();
    let jobs: Vec<usize> = (0..k + 2).collect();
    let forests: Vec<Result<RegressionForest, String>> = jobs
        .par_iter()
        .map(|&f| {
            let fseed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(f as u64);
            if f < k {
                let targets: Vec<f64> = (0..ts.len())
                    .flat_map(|r| ts.rotations[r * 9 * k + 9 * f..r * 9 * k + 9 * f + 9].iter().copied())
                    .collect();
                RegressionForest::train(&ts.inputs, d, &targets, 9, params, fseed)
            } else if f == k {
                if b == 0 {
                    return Ok(RegressionForest { input_dim: d, output_dim: 0, trees: Vec::new() });
                }
                RegressionForest::train(&ts.inputs, d, &ts.shapes, b, params, fseed)
            } else {
                RegressionForest::train(&depth_inputs, d + 1, &ts.depths, 1, params, fseed)
            }
        })
        .collect();
    let mut forests: Vec<RegressionForest> =
        forests.into_iter().collect::<Result<_, _>>().map_err(DpError::InsufficientData)?;
    let depth_forest = forests.pop().expect("depth forest");
    let shape_forest = forests.pop().expect("shape forest");
    Ok(DpModel {
        meta: DpMeta {
            n_landmarks: ts.n_landmarks,
            n_joints: k,
            n_shape: b,
            params: *params,
            seed,
            n_rows: ts.len(),
            training_hash: ts.content_hash(),
        },
        joint_forests: forests,
        shape_forest,
        depth_forest,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pose: PoseParams,
    pub shape: ShapeParams,
    pub translation: Translation,
}

impl Prediction {
    pub fn to_fit_result(&self, keypoint_set: &str) -> FitResult {
        FitResult::from_params(keypoint_set, &self.pose, &self.shape, &self.translation)
    }
}

/// Pose and shape from normalised landmarks; independent of where the
/// landmarks sit in the image and of their scale.
pub fn predict_pose_shape(dp: &DpModel, norm: &NormalizedLandmarks) -> (PoseParams, ShapeParams) {
    let pose = dp
        .joint_forests
        .iter()
        .map(|f| {
            let m = Matrix3::from_row_slice(&f.predict(&norm.coords));
            so3::log(&so3::project_to_rotation(&m))
        })
        .collect();
    let shape = if dp.meta.n_shape == 0 { Vec::new() } else { dp.shape_forest.predict(&norm.coords) };
    (PoseParams(pose), ShapeParams(shape))
}

pub fn predict(dp: &DpModel, model: &BodyModel, points: &[Vector2<f64>], cam: &Camera) -> Result<Prediction, DpError> {
    if points.len() != dp.meta.n_landmarks {
        return Err(DpError::Dimension(format!("{} landmarks, model expects {}", points.len(), dp.meta.n_landmarks)));
    }
    if model.n_joints() != dp.meta.n_joints || model.n_shape() != dp.meta.n_shape {
        return Err(DpError::Dimension("body model does not match the forests".into()));
    }
    let norm = normalize_landmarks(points)?;
    let (pose, shape) = predict_pose_shape(dp, &norm);
    let mut x = norm.coords.clone();
    x.push(scale_feature(norm.scale, cam));
    let depth = dp.depth_forest.predict(&x)[0].max(1e-3);

    // place the root so the landmark centroid lands on the observed one
    let zero = Translation::zeros();
    let kin = Kinematics::new(model, &pose, &shape, &zero)?;
    let mesh = kin.mesh();
    let root = mesh.joints3d[0];
    let lm = surface_landmarks(&mesh, model);
    let c = lm.iter().sum::<Vector3<f64>>() / lm.len() as f64 - root;
    let z = depth + c.z;
    let x_root = (norm.centroid.x - cam.principal_point[0]) * z / cam.focal - c.x;
    let y_root = (norm.centroid.y - cam.principal_point[1]) * z / cam.focal - c.y;
    let translation = Vector3::new(x_root, y_root, depth) - root;
    Ok(Prediction { pose, shape, translation })
}

/// A few keypoint-energy steps on the root rotation and translation only.
pub fn refine_global_rotation(
    prediction: &Prediction,
    model: &BodyModel,
    cam: &Camera,
    points: &KeypointSet2D,
    steps: usize,
) -> Result<FitResult, DpError> {
    let params = crate::fitting::pack_params(&prediction.pose, &prediction.shape, &prediction.translation);
    Ok(refine_root(model, cam, points, &params, steps, REFINE_SIGMA)?)
}

/// Robustifier scale (pixels) of the global-rotation refinement.
pub const REFINE_SIGMA: f64 = 100.0;
