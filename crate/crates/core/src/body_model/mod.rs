//! Parametric articulated body mesh.
//!
//! A [`BodyModel`] follows the SMPL layout: a template mesh deformed by
//! linear shape blendshapes, joints regressed from the shaped mesh, and
//! linear blend skinning along a kinematic tree. Model coordinates use the
//! camera convention (x right, y down, z away from the viewer), so an
//! unrotated model placed at positive depth is seen upright from the front.

mod format;
mod mini;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::so3;

pub use format::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use mini::{joint as mini_joint, make_mini_model, mini, part as mini_part, MINI_CANONICAL_HEIGHT};

pub const ROOT_SENTINEL: i64 = -1;
const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("dimension mismatch: {what} has {got}, model expects {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
}

/// Where a named keypoint lives on the body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeypointSource {
    Joint(usize),
    Landmark(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSetDef {
    pub sources: Vec<KeypointSource>,
    /// Skeleton connections as pairs of indices into `sources`; used by the
    /// person-size estimator.
    pub connections: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct BodyModel {
    pub template_vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    /// `shape_blendshapes[b][v]`.
    pub shape_blendshapes: Vec<Vec<Vector3<f64>>>,
    /// Optional pose-dependent correctives, `pose_blendshapes[v]` is 3 x 9(K-1)
    /// applied to the flattened `(R_j - I)` of all non-root joints.
    pub pose_blendshapes: Option<Vec<DMatrix<f64>>>,
    /// Dense K x N.
    pub joint_regressor: DMatrix<f64>,
    /// Sparse rows: `(joint, weight)` per vertex.
    pub skinning_weights: Vec<Vec<(usize, f64)>>,
    pub parents: Vec<Option<usize>>,
    pub part_label: Vec<u8>,
    pub landmark_vertices: Vec<usize>,
    pub keypoint_sets: BTreeMap<String, KeypointSetDef>,
    pub canonical_height: f64,
    // Derived at validation time.
    joint_template: Vec<Vector3<f64>>,
    joint_shapedirs: Vec<Vec<Vector3<f64>>>,
    ancestors: Vec<Vec<bool>>,
}

impl BodyModel {
    /// Assembles and validates a model. All loading paths go through here.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        template_vertices: Vec<Vector3<f64>>,
        faces: Vec<[u32; 3]>,
        shape_blendshapes: Vec<Vec<Vector3<f64>>>,
        pose_blendshapes: Option<Vec<DMatrix<f64>>>,
        joint_regressor: DMatrix<f64>,
        skinning_weights: Vec<Vec<(usize, f64)>>,
        parents: Vec<Option<usize>>,
        part_label: Vec<u8>,
        landmark_vertices: Vec<usize>,
        keypoint_sets: BTreeMap<String, KeypointSetDef>,
        canonical_height: f64,
    ) -> Result<Self, ModelError> {
        let mut model = BodyModel {
            template_vertices,
            faces,
            shape_blendshapes,
            pose_blendshapes,
            joint_regressor,
            skinning_weights,
            parents,
            part_label,
            landmark_vertices,
            keypoint_sets,
            canonical_height,
            joint_template: Vec::new(),
            joint_shapedirs: Vec::new(),
            ancestors: Vec::new(),
        };
        model.validate()?;
        model.derive();
        Ok(model)
    }

    pub fn n_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn n_shape(&self) -> usize {
        self.shape_blendshapes.len()
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmark_vertices.len()
    }

    pub fn n_parts(&self) -> usize {
        self.part_label.iter().map(|&p| p as usize + 1).max().unwrap_or(0)
    }

    /// Number of scalar parameters in the `[pose | shape | translation]` layout.
    pub fn n_params(&self) -> usize {
        3 * self.n_joints() + self.n_shape() + 3
    }

    /// `true` if `ancestor` lies on the chain from the root to `joint`
    /// (inclusive of `joint` itself).
    pub fn is_ancestor_or_self(&self, ancestor: usize, joint: usize) -> bool {
        self.ancestors[joint][ancestor]
    }

    pub fn keypoint_set(&self, name: &str) -> Option<&KeypointSetDef> {
        self.keypoint_sets.get(name)
    }

    /// The dense surface-landmark keypoint set name (`surface91` for SMPL-style
    /// models, `surface12` for the mini model).
    pub fn surface_set_name(&self) -> String {
        format!("surface{}", self.n_landmarks())
    }

    fn validate(&self) -> Result<(), ModelError> {
        let n = self.template_vertices.len();
        let k = self.parents.len();
        if n == 0 || k == 0 {
            return Err(ModelError::Invariant("model needs vertices and joints".into()));
        }
        if !self.canonical_height.is_finite() || self.canonical_height <= 0.0 {
            return Err(ModelError::Invariant(format!(
                "canonical_height must be positive, got {}",
                self.canonical_height
            )));
        }
        for (i, v) in self.template_vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(ModelError::Invariant(format!("template vertex {i} is not finite")));
            }
        }
        for (f, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&i| i as usize >= n) {
                return Err(ModelError::Invariant(format!("face {f} references a vertex out of range")));
            }
        }
        for (b, dirs) in self.shape_blendshapes.iter().enumerate() {
            if dirs.len() != n {
                return Err(ModelError::Invariant(format!(
                    "shape blendshape {b} has {} rows, expected {n}",
                    dirs.len()
                )));
            }
        }
        if let Some(pose) = &self.pose_blendshapes {
            if pose.len() != n || pose.iter().any(|m| m.nrows() != 3 || m.ncols() != 9 * (k - 1)) {
                return Err(ModelError::Invariant(format!(
                    "pose blendshapes must be {n} blocks of 3 x {}",
                    9 * (k - 1)
                )));
            }
        }
        if self.joint_regressor.nrows() != k || self.joint_regressor.ncols() != n {
            return Err(ModelError::Invariant(format!(
                "joint regressor is {}x{}, expected {k}x{n}",
                self.joint_regressor.nrows(),
                self.joint_regressor.ncols()
            )));
        }
        for j in 0..k {
            let s: f64 = self.joint_regressor.row(j).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(ModelError::Invariant(format!(
                    "joint regressor row {j} sums to {s}, expected 1"
                )));
            }
        }
        if self.skinning_weights.len() != n {
            return Err(ModelError::Invariant(format!(
                "skinning weights have {} rows, expected {n}",
                self.skinning_weights.len()
            )));
        }
        for (i, row) in self.skinning_weights.iter().enumerate() {
            let mut s = 0.0;
            for &(j, w) in row {
                if j >= k {
                    return Err(ModelError::Invariant(format!(
                        "skinning row {i} references joint {j} out of range"
                    )));
                }
                if !(w >= 0.0) {
                    return Err(ModelError::Invariant(format!(
                        "skinning row {i} has negative weight {w}"
                    )));
                }
                s += w;
            }
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(ModelError::Invariant(format!(
                    "skinning row {i} sums to {s}, expected 1"
                )));
            }
        }
        if self.parents[0].is_some() {
            return Err(ModelError::Invariant("joint 0 must be the root".into()));
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                Some(p) => {
                    return Err(ModelError::Invariant(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )))
                }
                None => return Err(ModelError::Invariant(format!("joint {j} has no parent"))),
            }
        }
        if self.part_label.len() != self.faces.len() {
            return Err(ModelError::Invariant(format!(
                "{} part labels for {} faces",
                self.part_label.len(),
                self.faces.len()
            )));
        }
        if let Some((f, &p)) = self.part_label.iter().enumerate().find(|(_, &p)| p >= 31) {
            return Err(ModelError::Invariant(format!("face {f} has part label {p} outside [0, 31)")));
        }
        if let Some((l, &v)) = self.landmark_vertices.iter().enumerate().find(|(_, &v)| v >= n) {
            return Err(ModelError::Invariant(format!("landmark {l} references vertex {v} out of range")));
        }
        for (name, set) in &self.keypoint_sets {
            for (p, src) in set.sources.iter().enumerate() {
                let ok = match *src {
                    KeypointSource::Joint(j) => j < k,
                    KeypointSource::Landmark(l) => l < self.landmark_vertices.len(),
                };
                if !ok {
                    return Err(ModelError::Invariant(format!(
                        "keypoint set {name:?} entry {p} is out of range"
                    )));
                }
            }
            for &(a, b) in &set.connections {
                if a >= set.sources.len() || b >= set.sources.len() || a == b {
                    return Err(ModelError::Invariant(format!(
                        "keypoint set {name:?} has invalid connection ({a}, {b})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn derive(&mut self) {
        let k = self.n_joints();
        self.joint_template = regress(&self.joint_regressor, &self.template_vertices);
        self.joint_shapedirs = self
            .shape_blendshapes
            .iter()
            .map(|dirs| regress(&self.joint_regressor, dirs))
            .collect();
        self.ancestors = vec![vec![false; k]; k];
        for j in 0..k {
            let mut cur = Some(j);
            while let Some(c) = cur {
                self.ancestors[j][c] = true;
                cur = self.parents[c];
            }
        }
    }

    /// Rest-pose joint locations for shape `beta`.
    pub fn rest_joints(&self, beta: &[f64]) -> Vec<Vector3<f64>> {
        let mut joints = self.joint_template.clone();
        for (b, &coef) in beta.iter().enumerate() {
            if coef != 0.0 {
                for (j, d) in joints.iter_mut().zip(&self.joint_shapedirs[b]) {
                    *j += coef * d;
                }
            }
        }
        joints
    }

    /// Joint displacement per unit of shape coefficient `b`.
    pub fn joint_shape_direction(&self, b: usize) -> &[Vector3<f64>] {
        &self.joint_shapedirs[b]
    }

    /// Shaped rest position of a single vertex (without pose correctives).
    pub fn shaped_vertex(&self, v: usize, beta: &[f64]) -> Vector3<f64> {
        let mut p = self.template_vertices[v];
        for (b, &coef) in beta.iter().enumerate() {
            p += coef * self.shape_blendshapes[b][v];
        }
        p
    }
}

fn regress(regressor: &DMatrix<f64>, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    (0..regressor.nrows())
        .map(|j| {
            regressor
                .row(j)
                .iter()
                .zip(points)
                .filter(|(w, _)| **w != 0.0)
                .fold(Vector3::zeros(), |acc, (w, p)| acc + *w * p)
        })
        .collect()
}

/// Per-joint axis-angle rotations, root first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams(pub Vec<Vector3<f64>>);

impl PoseParams {
    pub fn zeros(n_joints: usize) -> Self {
        PoseParams(vec![Vector3::zeros(); n_joints])
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        PoseParams(flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|r| [r.x, r.y, r.z]).collect()
    }

    pub fn matrices(&self) -> Vec<Matrix3<f64>> {
        self.0.iter().map(so3::exp).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams(pub Vec<f64>);

impl ShapeParams {
    pub fn zeros(n: usize) -> Self {
        ShapeParams(vec![0.0; n])
    }
}

/// Global translation in the camera frame, meters.
pub type Translation = Vector3<f64>;

#[derive(Debug, Clone)]
pub struct PosedMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub joints3d: Vec<Vector3<f64>>,
}

impl PosedMesh {
    pub fn centroid(&self) -> Vector3<f64> {
        self.vertices.iter().sum::<Vector3<f64>>() / self.vertices.len() as f64
    }
}

/// Which body point a Jacobian is requested for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyPoint {
    Joint(usize),
    Vertex(usize),
}

impl BodyPoint {
    pub fn from_keypoint(model: &BodyModel, src: KeypointSource) -> Self {
        match src {
            KeypointSource::Joint(j) => BodyPoint::Joint(j),
            KeypointSource::Landmark(l) => BodyPoint::Vertex(model.landmark_vertices[l]),
        }
    }
}

/// Forward kinematics for one parameter setting. Vertices are skinned on
/// demand, so fitting only pays for the points it uses.
#[derive(Debug, Clone)]
pub struct Kinematics<'m> {
    model: &'m BodyModel,
    pose: Vec<Vector3<f64>>,
    beta: Vec<f64>,
    translation: Vector3<f64>,
    local_rot: Vec<Matrix3<f64>>,
    global_rot: Vec<Matrix3<f64>>,
    rest_joints: Vec<Vector3<f64>>,
    /// Posed joint positions before the global translation.
    joint_pos: Vec<Vector3<f64>>,
    pose_feature: Option<Vec<f64>>,
}

impl<'m> Kinematics<'m> {
    pub fn new(
        model: &'m BodyModel,
        pose: &PoseParams,
        beta: &ShapeParams,
        translation: &Translation,
    ) -> Result<Self, ModelError> {
        let k = model.n_joints();
        if pose.len() != k {
            return Err(ModelError::Dimension { what: "pose", got: pose.len(), expected: k });
        }
        if beta.0.len() != model.n_shape() {
            return Err(ModelError::Dimension {
                what: "shape",
                got: beta.0.len(),
                expected: model.n_shape(),
            });
        }
        let local_rot = pose.matrices();
        let rest_joints = model.rest_joints(&beta.0);
        let mut global_rot = Vec::with_capacity(k);
        let mut joint_pos = Vec::with_capacity(k);
        for j in 0..k {
            match model.parents[j] {
                None => {
                    global_rot.push(local_rot[j]);
                    joint_pos.push(rest_joints[j]);
                }
                Some(p) => {
                    let g: Matrix3<f64> = global_rot[p] * local_rot[j];
                    let t = joint_pos[p] + global_rot[p] * (rest_joints[j] - rest_joints[p]);
                    global_rot.push(g);
                    joint_pos.push(t);
                }
            }
        }
        let pose_feature = model.pose_blendshapes.as_ref().map(|_| {
            local_rot
                .iter()
                .skip(1)
                .flat_map(|r| {
                    let d = r - Matrix3::identity();
                    // row-major flattening, matching SMPL's pose feature
                    (0..3).flat_map(move |a| (0..3).map(move |b| d[(a, b)]))
                })
                .collect()
        });
        Ok(Kinematics {
            model,
            pose: pose.0.clone(),
            beta: beta.0.clone(),
            translation: *translation,
            local_rot,
            global_rot,
            rest_joints,
            joint_pos,
            pose_feature,
        })
    }

    pub fn model(&self) -> &BodyModel {
        self.model
    }

    pub fn global_rotation(&self, j: usize) -> &Matrix3<f64> {
        &self.global_rot[j]
    }

    /// Camera-frame joint positions.
    pub fn joints(&self) -> Vec<Vector3<f64>> {
        self.joint_pos.iter().map(|p| p + self.translation).collect()
    }

    fn rest_vertex(&self, v: usize) -> Vector3<f64> {
        let mut p = self.model.shaped_vertex(v, &self.beta);
        if let (Some(blend), Some(feat)) = (&self.model.pose_blendshapes, &self.pose_feature) {
            let m = &blend[v];
            for (c, f) in feat.iter().enumerate() {
                if *f != 0.0 {
                    p += Vector3::new(m[(0, c)], m[(1, c)], m[(2, c)]) * *f;
                }
            }
        }
        p
    }

    /// Position of `v` as carried rigidly by joint `j`, before translation.
    fn carried(&self, rest: &Vector3<f64>, j: usize) -> Vector3<f64> {
        self.global_rot[j] * (rest - self.rest_joints[j]) + self.joint_pos[j]
    }

    pub fn vertex(&self, v: usize) -> Vector3<f64> {
        let rest = self.rest_vertex(v);
        self.model.skinning_weights[v]
            .iter()
            .fold(Vector3::zeros(), |acc, &(j, w)| acc + w * self.carried(&rest, j))
            + self.translation
    }

    pub fn point(&self, p: BodyPoint) -> Vector3<f64> {
        match p {
            BodyPoint::Joint(j) => self.joint_pos[j] + self.translation,
            BodyPoint::Vertex(v) => self.vertex(v),
        }
    }

    pub fn mesh(&self) -> PosedMesh {
        PosedMesh {
            vertices: (0..self.model.n_vertices()).map(|v| self.vertex(v)).collect(),
            joints3d: self.joints(),
        }
    }

    /// Position of a body point and its 3 x n_params Jacobian with respect to
    /// `[pose (3K) | shape (B) | translation (3)]`.
    pub fn point_jacobian(&self, p: BodyPoint) -> (Vector3<f64>, Vec<Vector3<f64>>) {
        let model = self.model;
        let k = model.n_joints();
        let nb = model.n_shape();
        let mut jac = vec![Vector3::zeros(); model.n_params()];

        // (weight, joint, carried position before translation)
        let carriers: Vec<(f64, usize, Vector3<f64>)> = match p {
            BodyPoint::Joint(j) => vec![(1.0, j, self.joint_pos[j])],
            BodyPoint::Vertex(v) => {
                let rest = self.rest_vertex(v);
                model.skinning_weights[v]
                    .iter()
                    .map(|&(j, w)| (w, j, self.carried(&rest, j)))
                    .collect()
            }
        };
        let position = carriers.iter().fold(Vector3::zeros(), |acc, (w, _, x)| acc + *w * x) + self.translation;

        // Rotation of joint q spins every carrier below it about the posed joint q.
        for q in 0..k {
            let jl = so3::left_jacobian(&self.pose[q]);
            let parent_rot = model.parents[q].map(|pq| self.global_rot[pq]).unwrap_or_else(Matrix3::identity);
            for c in 0..3 {
                let omega = parent_rot * jl.column(c);
                let mut d = Vector3::zeros();
                for (w, j, x) in &carriers {
                    if model.is_ancestor_or_self(q, *j) {
                        d += *w * omega.cross(&(x - self.joint_pos[q]));
                    }
                }
                jac[3 * q + c] = d;
            }
        }

        // Pose correctives move the rest vertex itself.
        if let (Some(blend), BodyPoint::Vertex(v)) = (&model.pose_blendshapes, p) {
            let m = &blend[v];
            for q in 1..k {
                let jl = so3::left_jacobian(&self.pose[q]);
                for c in 0..3 {
                    let dr = so3::hat(&jl.column(c).into_owned()) * self.local_rot[q];
                    let mut drest = Vector3::zeros();
                    for a in 0..3 {
                        for b in 0..3 {
                            let col = 9 * (q - 1) + 3 * a + b;
                            drest += Vector3::new(m[(0, col)], m[(1, col)], m[(2, col)]) * dr[(a, b)];
                        }
                    }
                    let mut d = Vector3::zeros();
                    for &(j, w) in &model.skinning_weights[v] {
                        d += w * (self.global_rot[j] * drest);
                    }
                    jac[3 * q + c] += d;
                }
            }
        }

        // Shape: rest vertex and rest joints move linearly, then propagate.
        for b in 0..nb {
            let djoint = model.joint_shape_direction(b);
            let mut dt = vec![Vector3::zeros(); k];
            for j in 0..k {
                dt[j] = match model.parents[j] {
                    None => djoint[j],
                    Some(pj) => dt[pj] + self.global_rot[pj] * (djoint[j] - djoint[pj]),
                };
            }
            let d = match p {
                BodyPoint::Joint(j) => dt[j],
                BodyPoint::Vertex(v) => {
                    let dv = model.shape_blendshapes[b][v];
                    carriers.iter().fold(Vector3::zeros(), |acc, (w, j, _)| {
                        acc + *w * (self.global_rot[*j] * (dv - djoint[*j]) + dt[*j])
                    })
                }
            };
            jac[3 * k + b] = d;
        }

        for c in 0..3 {
            let mut e = Vector3::zeros();
            e[c] = 1.0;
            jac[3 * k + nb + c] = e;
        }
        (position, jac)
    }
}

/// Linear blend skinning of the shaped template, translated by `translation`.
pub fn pose_mesh(
    model: &BodyModel,
    pose: &PoseParams,
    beta: &ShapeParams,
    translation: &Translation,
) -> Result<PosedMesh, ModelError> {
    Ok(Kinematics::new(model, pose, beta, translation)?.mesh())
}

/// Landmark positions: the posed vertices at `model.landmark_vertices`.
pub fn surface_landmarks(mesh: &PosedMesh, model: &BodyModel) -> Vec<Vector3<f64>> {
    model.landmark_vertices.iter().map(|&v| mesh.vertices[v]).collect()
}

/// Resolves a keypoint set to camera-frame 3D points.
pub fn keypoint_positions(kin: &Kinematics<'_>, set: &KeypointSetDef) -> Vec<Vector3<f64>> {
    set.sources
        .iter()
        .map(|&s| kin.point(BodyPoint::from_keypoint(kin.model(), s)))
        .collect()
}

/// Rest-pose height of the shaped body along the vertical (y) axis.
pub fn stature(model: &BodyModel, beta: &ShapeParams) -> f64 {
    let (lo, hi) = (0..model.n_vertices())
        .map(|v| model.shaped_vertex(v, &beta.0).y)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    hi - lo
}

#[cfg(test)]
mod tests;
