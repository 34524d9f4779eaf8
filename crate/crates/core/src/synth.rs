//! Random body configurations for synthetic data and test harnesses.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, PoseParams, ShapeParams};
use crate::fitting::HingeLimit;
use crate::so3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSampler {
    /// Non-root axis-angle components uniform in `[-body_range, body_range]`.
    pub body_range: f64,
    /// Components along a hinge axis are redrawn inside the hinge limits.
    pub hinges: Vec<HingeLimit>,
    /// Root yaw uniform in `[-yaw_deg, yaw_deg]`.
    pub yaw_deg: f64,
    /// Root pitch and roll uniform in `[-tilt_deg, tilt_deg]`.
    pub tilt_deg: f64,
    pub beta_range: f64,
}

impl Default for PoseSampler {
    fn default() -> Self {
        PoseSampler { body_range: 0.5, hinges: Vec::new(), yaw_deg: 45.0, tilt_deg: 10.0, beta_range: 1.0 }
    }
}

impl PoseSampler {
    /// Sampler matched to the bundled mini model's joint layout.
    pub fn mini() -> Self {
        PoseSampler { hinges: HingeLimit::mini_elbows(), ..PoseSampler::default() }
    }

    pub fn sample_body_pose<R: Rng>(&self, model: &BodyModel, rng: &mut R) -> PoseParams {
        let mut pose = PoseParams::zeros(model.n_joints());
        for j in 1..model.n_joints() {
            pose.0[j] = Vector3::from_fn(|_, _| rng.gen_range(-self.body_range..=self.body_range));
        }
        for h in &self.hinges {
            let axis = Vector3::from(h.axis).normalize();
            let current = axis.dot(&pose.0[h.joint]);
            let hi = h.max.min(self.body_range.max(h.min) * 3.0);
            let lo = h.min.max(0.0).min(hi);
            pose.0[h.joint] += axis * (rng.gen_range(lo..=hi) - current);
        }
        pose
    }

    pub fn sample_root<R: Rng>(&self, rng: &mut R) -> Vector3<f64> {
        let u = |rng: &mut R, r: f64| if r > 0.0 { rng.gen_range(-r..=r).to_radians() } else { 0.0 };
        let yaw = u(rng, self.yaw_deg);
        let pitch = u(rng, self.tilt_deg);
        let roll = u(rng, self.tilt_deg);
        so3::log(&(so3::rot_x(pitch) * so3::rot_z(roll) * so3::rot_y(yaw)))
    }

    pub fn sample_beta<R: Rng>(&self, model: &BodyModel, rng: &mut R) -> ShapeParams {
        ShapeParams((0..model.n_shape()).map(|_| rng.gen_range(-self.beta_range..=self.beta_range)).collect())
    }

    /// Full random configuration with zero translation.
    pub fn sample<R: Rng>(&self, model: &BodyModel, rng: &mut R) -> (PoseParams, ShapeParams) {
        let mut pose = self.sample_body_pose(model, rng);
        pose.0[0] = self.sample_root(rng);
        (pose, self.sample_beta(model, rng))
    }
}

/// Translation that puts the root joint at `(x, y, depth)` in the camera frame.
pub fn place_root(model: &BodyModel, beta: &ShapeParams, x: f64, y: f64, depth: f64) -> Vector3<f64> {
    Vector3::new(x, y, depth) - model.rest_joints(&beta.0)[0]
}
