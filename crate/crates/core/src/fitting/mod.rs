//! Fitting the body model to 2D keypoints and an optional silhouette.
//!
//! The objective is a robust keypoint reprojection term, simple pose and shape
//! priors and, when a silhouette is given, the bi-directional silhouette
//! distance. Depth is initialised from a person-size estimate that picks the
//! longest visible skeleton connection.

mod fit;
mod keypoints;
mod lm;
mod person_size;
mod silhouette;

use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, ModelError, PoseParams, ShapeParams, Translation};
use crate::render::RenderError;

pub use fit::{fit, fit_energies, refine_root, torso_keypoints};
pub use keypoints::{
    geman_mcclure, keypoint_energy, keypoint_energy_gradient, parse_keypoints, read_keypoint_file, read_keypoints,
    write_keypoint_file, KeypointSet2D,
};
pub use person_size::{
    build_ratio_table, build_ratio_table_with, estimate_person_size, half_sample_mode, init_depth,
    projected_person_size, ConnectionRatio, PersonSizeEstimate, RatioSampling, RatioTable, RATIO_QUANTILES,
};
pub use silhouette::{mask_silhouette_energy, silhouette_energy, SilhouetteData, SilhouetteTerms};

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("unknown keypoint set {0:?}")]
    UnknownKeypointSet(String),
    #[error("invalid keypoints: {0}")]
    InvalidKeypoints(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("a keypoint lies behind the camera")]
    BehindCamera,
    #[error("model projects to an empty silhouette")]
    EmptyProjection,
    #[error("target silhouette is empty")]
    EmptyTarget,
    #[error("no skeleton connection has both endpoints annotated")]
    NoValidConnection,
    #[error("optimization diverged in stage {stage:?}")]
    Diverged { stage: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamBlock {
    RootRotation,
    /// Rotations of every non-root joint.
    BodyPose,
    Shape,
    Translation,
}

pub const ALL_BLOCKS: [ParamBlock; 4] =
    [ParamBlock::RootRotation, ParamBlock::BodyPose, ParamBlock::Shape, ParamBlock::Translation];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageObjective {
    /// Keypoint term on the torso keypoints only.
    TorsoKeypoints,
    /// Keypoint term plus priors.
    Keypoints,
    /// Keypoints, priors and the silhouette term; skipped without a silhouette.
    Silhouette,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub objective: StageObjective,
    pub blocks: Vec<ParamBlock>,
    pub max_iterations: usize,
    /// Relative cost decrease below which the stage stops.
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TermWeights {
    pub keypoint: f64,
    pub pose: f64,
    pub hinge: f64,
    pub shape: f64,
    pub silhouette: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights { keypoint: 1.0, pose: 1.0, hinge: 100.0, shape: 1.0, silhouette: 0.1 }
    }
}

/// Penalises the component of a joint's axis-angle along `axis` outside
/// `[min, max]` radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HingeLimit {
    pub joint: usize,
    pub axis: [f64; 3],
    pub min: f64,
    pub max: f64,
}

impl HingeLimit {
    /// Elbow limits for the bundled mini model: the forearm may fold forward
    /// but not bend backwards past straight.
    pub fn mini_elbows() -> Vec<HingeLimit> {
        use crate::body_model::mini_joint as joint;
        vec![
            HingeLimit { joint: joint::LEFT_ELBOW, axis: [0.0, 1.0, 0.0], min: -0.1, max: 2.6 },
            HingeLimit { joint: joint::RIGHT_ELBOW, axis: [0.0, -1.0, 0.0], min: -0.1, max: 2.6 },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub weights: TermWeights,
    /// Robustifier scale in pixels for a person of `reference_size` pixels;
    /// scaled with the estimated person size.
    pub sigma: f64,
    pub reference_size: f64,
    pub stages: Vec<StageConfig>,
    pub use_silhouette: bool,
    /// Resolution factors (powers of 1/2, ending at 1) the silhouette stage
    /// runs through, coarse first.
    pub silhouette_pyramid: Vec<f64>,
    /// Initial body yaw angles (degrees) tried before the silhouette stage;
    /// the lowest-energy result continues.
    pub yaw_starts_deg: Vec<f64>,
    pub hinges: Vec<HingeLimit>,
    /// After the keypoint stages, try mirroring each limb in depth and keep
    /// the flip when it lowers the energy.
    pub flip_search: bool,
    /// Keypoint indices used by the torso stage; derived from the model when
    /// absent.
    pub torso_keypoints: Option<Vec<usize>>,
    /// Target image-plane motion (pixels) of the finite-difference steps used
    /// for the silhouette gradient.
    pub fd_pixel_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            weights: TermWeights::default(),
            sigma: 100.0,
            reference_size: 500.0,
            stages: vec![
                StageConfig {
                    name: "torso".into(),
                    objective: StageObjective::TorsoKeypoints,
                    blocks: vec![ParamBlock::RootRotation, ParamBlock::Translation],
                    max_iterations: 50,
                    tolerance: 1e-10,
                },
                StageConfig {
                    name: "keypoints".into(),
                    objective: StageObjective::Keypoints,
                    blocks: ALL_BLOCKS.to_vec(),
                    max_iterations: 200,
                    tolerance: 1e-12,
                },
                StageConfig {
                    name: "silhouette".into(),
                    objective: StageObjective::Silhouette,
                    blocks: ALL_BLOCKS.to_vec(),
                    max_iterations: 25,
                    tolerance: 1e-6,
                },
            ],
            use_silhouette: true,
            silhouette_pyramid: vec![0.5, 1.0],
            yaw_starts_deg: vec![-40.0, 0.0, 40.0],
            hinges: Vec::new(),
            flip_search: true,
            torso_keypoints: None,
            fd_pixel_step: 1.5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let w = &self.weights;
        for (name, v) in [
            ("keypoint", w.keypoint),
            ("pose", w.pose),
            ("hinge", w.hinge),
            ("shape", w.shape),
            ("silhouette", w.silhouette),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FitError::InvalidConfig(format!("weight {name} must be finite and >= 0, got {v}")));
            }
        }
        if self.stages.is_empty() {
            return Err(FitError::InvalidConfig("at least one stage is required".into()));
        }
        if !(self.sigma > 0.0 && self.reference_size > 0.0 && self.fd_pixel_step > 0.0) {
            return Err(FitError::InvalidConfig("sigma, reference_size and fd_pixel_step must be positive".into()));
        }
        for &level in &self.silhouette_pyramid {
            let halvings = -level.log2();
            if !(level > 0.0 && level <= 1.0 && (halvings - halvings.round()).abs() < 1e-9) {
                return Err(FitError::InvalidConfig(format!("pyramid level {level} is not a power of 1/2")));
            }
        }
        if self.yaw_starts_deg.is_empty() {
            return Err(FitError::InvalidConfig("at least one yaw start is required".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FitError> {
        let text = std::fs::read_to_string(path).map_err(|e| FitError::Io(format!("{}: {e}", path.display())))?;
        let cfg: FitConfig = serde_json::from_str(&text).map_err(|e| FitError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Final objective broken down by term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Energies {
    /// `sum conf * rho(residual)` in image pixels.
    pub keypoint: f64,
    pub pose_prior: f64,
    pub hinge_prior: f64,
    pub shape_prior: f64,
    /// Silhouette distance at full resolution; 0 when unused.
    pub silhouette: f64,
    /// Weighted objective as minimized.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    /// Objective after each accepted step.
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub keypoint_set: String,
    /// Axis-angle per joint, flattened.
    pub pose: Vec<f64>,
    pub shape: Vec<f64>,
    pub translation: [f64; 3],
    pub energies: Energies,
    pub iterations: usize,
    pub converged: bool,
    pub person_size: f64,
    pub stages: Vec<StageReport>,
}

impl FitResult {
    /// A result carrying only parameters, for configurations that did not
    /// come out of [`fit`] (ground truth, direct predictions).
    pub fn from_params(keypoint_set: &str, pose: &PoseParams, beta: &ShapeParams, translation: &Translation) -> Self {
        FitResult {
            keypoint_set: keypoint_set.to_string(),
            pose: pose.to_flat(),
            shape: beta.0.clone(),
            translation: [translation.x, translation.y, translation.z],
            energies: Energies::default(),
            iterations: 0,
            converged: true,
            person_size: 0.0,
            stages: Vec::new(),
        }
    }

    pub fn pose_params(&self) -> PoseParams {
        PoseParams::from_flat(&self.pose)
    }

    pub fn shape_params(&self) -> ShapeParams {
        ShapeParams(self.shape.clone())
    }

    pub fn translation_vec(&self) -> Translation {
        Translation::new(self.translation[0], self.translation[1], self.translation[2])
    }

    /// Flat `[pose | shape | translation]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.pose.clone();
        p.extend(&self.shape);
        p.extend(self.translation);
        p
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

pub fn pack_params(pose: &PoseParams, beta: &ShapeParams, translation: &Translation) -> Vec<f64> {
    let mut p = pose.to_flat();
    p.extend(&beta.0);
    p.extend(translation.iter());
    p
}

pub fn unpack_params(model: &BodyModel, params: &[f64]) -> Result<(PoseParams, ShapeParams, Translation), FitError> {
    let (k, b) = (model.n_joints(), model.n_shape());
    if params.len() != model.n_params() {
        return Err(FitError::Model(ModelError::Dimension {
            what: "parameter vector",
            got: params.len(),
            expected: model.n_params(),
        }));
    }
    let t = &params[3 * k + b..];
    Ok((
        PoseParams::from_flat(&params[..3 * k]),
        ShapeParams(params[3 * k..3 * k + b].to_vec()),
        Translation::new(t[0], t[1], t[2]),
    ))
}
