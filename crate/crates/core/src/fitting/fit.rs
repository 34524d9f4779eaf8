use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use super::keypoints::{linearize_point, projection_derivative, robust_term};
use super::lm::{self, LmOptions, Problem};
use super::person_size::{estimate_person_size, init_depth_with_pose};
use super::silhouette::silhouette_terms_for_vertices;
use super::{
    pack_params, unpack_params, Energies, FitConfig, FitError, FitResult, HingeLimit, KeypointSet2D, ParamBlock,
    RatioTable, SilhouetteData, StageConfig, StageObjective, StageReport, TermWeights,
};
use crate::body_model::{BodyModel, BodyPoint, KeypointSetDef, KeypointSource, Kinematics, PoseParams};
use crate::render::{Camera, Mask};

/// Keypoints of `set` that move rigidly with the root: root-attached joints
/// and landmarks skinned mostly to the root.
pub fn torso_keypoints(model: &BodyModel, set: &KeypointSetDef) -> Vec<usize> {
    set.sources
        .iter()
        .enumerate()
        .filter(|(_, src)| match **src {
            KeypointSource::Joint(j) => j == 0 || model.parents[j] == Some(0),
            KeypointSource::Landmark(l) => {
                let v = model.landmark_vertices[l];
                model.skinning_weights[v]
                    .iter()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .is_some_and(|&(j, _)| j == 0)
            }
        })
        .map(|(i, _)| i)
        .collect()
}

fn active_indices(model: &BodyModel, blocks: &[ParamBlock]) -> Vec<usize> {
    let (k, b) = (model.n_joints(), model.n_shape());
    let mut idx = Vec::new();
    for block in [ParamBlock::RootRotation, ParamBlock::BodyPose, ParamBlock::Shape, ParamBlock::Translation] {
        if !blocks.contains(&block) {
            continue;
        }
        match block {
            ParamBlock::RootRotation => idx.extend(0..3),
            ParamBlock::BodyPose => idx.extend(3..3 * k),
            ParamBlock::Shape => idx.extend(3 * k..3 * k + b),
            ParamBlock::Translation => idx.extend(3 * k + b..3 * k + b + 3),
        }
    }
    idx
}

/// For each non-root joint, the body point at the far end of its bone: the
/// child joint farthest from it, else the farthest keypoint skinned to it.
fn bone_ends(model: &BodyModel, points: &[(usize, BodyPoint)]) -> Vec<(usize, BodyPoint)> {
    let rest = model.rest_joints(&vec![0.0; model.n_shape()]);
    let mut out = Vec::new();
    for j in 1..model.n_joints() {
        let dist = |p: &Vector3<f64>| (p - rest[j]).norm();
        let child = (0..model.n_joints())
            .filter(|&c| model.parents[c] == Some(j))
            .max_by(|&a, &b| dist(&rest[a]).total_cmp(&dist(&rest[b])));
        if let Some(c) = child {
            out.push((j, BodyPoint::Joint(c)));
            continue;
        }
        let zero = vec![0.0; model.n_shape()];
        let landmark = points
            .iter()
            .filter_map(|&(_, bp)| match bp {
                BodyPoint::Vertex(v) => {
                    let dominant = model.skinning_weights[v].iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|w| w.0);
                    (dominant == Some(j)).then_some((v, dist(&model.shaped_vertex(v, &zero))))
                }
                BodyPoint::Joint(_) => None,
            })
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((v, d)) = landmark {
            if d > 1e-6 {
                out.push((j, BodyPoint::Vertex(v)));
            }
        }
    }
    out
}

/// Rotates joint `j` so the bone end `end` points at `target`; the rest of
/// the subtree follows rigidly.
fn aim_bone(model: &BodyModel, params: &[f64], j: usize, end: BodyPoint, target: &Vector3<f64>) -> Option<Vec<f64>> {
    let (pose, beta, t) = unpack_params(model, params).ok()?;
    let kin = Kinematics::new(model, &pose, &beta, &t).ok()?;
    let joint = kin.joints()[j];
    let d = (kin.point(end) - joint).normalize();
    let d2 = (target - joint).normalize();
    let axis = d.cross(&d2);
    if axis.norm() < 1e-9 {
        return None;
    }
    let delta = crate::so3::exp(&(axis.normalize() * d.dot(&d2).clamp(-1.0, 1.0).acos()));
    let parent = model.parents[j]?;
    let local = kin.global_rotation(parent).transpose() * delta * kin.global_rotation(j);
    let mut out = params.to_vec();
    out[3 * j..3 * j + 3].copy_from_slice(crate::so3::log(&local).as_slice());
    Some(out)
}

/// Rotates joint `j` so its bone end moves to the other point on the same
/// camera ray at the same distance from the joint: the depth-mirrored bone,
/// which reprojects identically.
fn mirror_bone(model: &BodyModel, params: &[f64], j: usize, end: BodyPoint) -> Option<Vec<f64>> {
    let (pose, beta, t) = unpack_params(model, params).ok()?;
    let kin = Kinematics::new(model, &pose, &beta, &t).ok()?;
    let joint = kin.joints()[j];
    let p = kin.point(end);
    let (s1, u) = (p.norm(), p.normalize());
    let s2 = 2.0 * u.dot(&joint) - s1;
    if s2 <= 0.0 || (s2 - s1).abs() < 1e-6 {
        return None;
    }
    aim_bone(model, params, j, end, &(u * s2))
}

/// Depth-flip candidates for bone `j` and, when it has one, its child bone:
/// the bone mirrored with its subtree, then with the child re-aimed at its
/// old end, then with that end mirrored as well.
fn flip_candidates(
    model: &BodyModel,
    params: &[f64],
    (j, end): (usize, BodyPoint),
    child: Option<(usize, BodyPoint)>,
) -> Vec<Vec<f64>> {
    let Some(flipped) = mirror_bone(model, params, j, end) else { return Vec::new() };
    let mut out = vec![flipped.clone()];
    let Some((c, child_end)) = child else { return out };
    if let Some(p) = mirror_bone(model, &flipped, c, child_end) {
        out.push(p);
    }
    let keep = unpack_params(model, params)
        .ok()
        .and_then(|(pose, beta, t)| Kinematics::new(model, &pose, &beta, &t).ok())
        .map(|kin| kin.point(child_end));
    if let Some(reaimed) = keep.and_then(|keep| aim_bone(model, &flipped, c, child_end, &keep)) {
        out.push(reaimed.clone());
        if let Some(p) = mirror_bone(model, &reaimed, c, child_end) {
            out.push(p);
        }
    }
    out
}

struct SilhouetteLevel<'a> {
    target: &'a SilhouetteData,
    cam: Camera,
    /// Converts the raw distance sum into the normalized objective.
    norm: f64,
}

struct Objective<'a> {
    model: &'a BodyModel,
    cam: Camera,
    kp: &'a KeypointSet2D,
    points: &'a [(usize, BodyPoint)],
    /// Image scale: residuals are divided by it so weights do not depend on
    /// how large the person appears.
    scale: f64,
    sigma: f64,
    weights: TermWeights,
    hinges: &'a [HingeLimit],
    silhouette: Option<SilhouetteLevel<'a>>,
    base: Vec<f64>,
    active: Vec<usize>,
    slot: Vec<Option<usize>>,
    fd_pixel_step: f64,
}

impl<'a> Objective<'a> {
    fn set_active(&mut self, active: Vec<usize>) {
        self.slot = vec![None; self.base.len()];
        for (a, &i) in active.iter().enumerate() {
            self.slot[i] = Some(a);
        }
        self.active = active;
    }

    fn full(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut p = self.base.clone();
        for (a, &i) in self.active.iter().enumerate() {
            p[i] = x[a];
        }
        p
    }

    fn packed(&self, full: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.active.len(), self.active.iter().map(|&i| full[i]))
    }

    fn kinematics(&self, full: &[f64]) -> Result<Kinematics<'a>, FitError> {
        let (pose, beta, t) = unpack_params(self.model, full)?;
        Ok(Kinematics::new(self.model, &pose, &beta, &t)?)
    }

    fn prior_terms(&self, full: &[f64]) -> (f64, f64, f64) {
        let (k, b) = (self.model.n_joints(), self.model.n_shape());
        let pose: f64 = full[3..3 * k].iter().map(|v| v * v).sum();
        let shape: f64 = full[3 * k..3 * k + b].iter().map(|v| v * v).sum();
        let hinge: f64 = self.hinges.iter().map(|h| hinge_violation(h, full).powi(2)).sum();
        (pose, hinge, shape)
    }

    fn silhouette_raw(&self, kin: &Kinematics<'_>, level: &SilhouetteLevel<'_>) -> Result<f64, FitError> {
        let vertices: Vec<Vector3<f64>> = (0..self.model.n_vertices()).map(|v| kin.vertex(v)).collect();
        Ok(silhouette_terms_for_vertices(&vertices, &self.model.faces, &level.cam, level.target)?.total())
    }

    fn energies(&self, full: &[f64]) -> Result<Energies, FitError> {
        let kin = self.kinematics(full)?;
        let mut kp_norm = 0.0;
        for &(i, bp) in self.points {
            let x = kin.point(bp);
            if x.z <= 0.0 {
                return Err(FitError::BehindCamera);
            }
            let r = (self.cam.project_point(&x) - self.kp.points[i]) / self.scale;
            kp_norm += robust_term(&r, self.kp.confidence[i], self.sigma).cost;
        }
        let (pose, hinge, shape) = self.prior_terms(full);
        let w = &self.weights;
        let mut e = Energies {
            keypoint: kp_norm * self.scale * self.scale,
            pose_prior: pose,
            hinge_prior: hinge,
            shape_prior: shape,
            silhouette: 0.0,
            total: w.keypoint * kp_norm + w.pose * pose + w.hinge * hinge + w.shape * shape,
        };
        if let Some(level) = &self.silhouette {
            e.silhouette = self.silhouette_raw(&kin, level)?;
            e.total += w.silhouette * level.norm * e.silhouette;
        }
        if e.total.is_nan() {
            return Err(FitError::Diverged { stage: String::new() });
        }
        Ok(e)
    }

    /// Finite-difference steps sized so the fastest-moving vertex travels
    /// about `fd_pixel_step` pixels at the silhouette resolution.
    fn fd_steps(&self, kin: &Kinematics<'_>, cam: &Camera) -> Vec<f64> {
        let (k, b) = (self.model.n_joints(), self.model.n_shape());
        let n = self.model.n_vertices();
        let stride = (n / 64).max(1);
        let mut speed = vec![0.0f64; self.active.len()];
        for v in (0..n).step_by(stride) {
            let (x, dx) = kin.point_jacobian(BodyPoint::Vertex(v));
            if x.z <= 0.0 {
                continue;
            }
            for (a, &i) in self.active.iter().enumerate() {
                speed[a] = speed[a].max(projection_derivative(cam, &x, &dx[i]).norm());
            }
        }
        self.active
            .iter()
            .zip(speed)
            .map(|(&i, s)| {
                let cap = if i < 3 * k {
                    0.25
                } else if i < 3 * k + b {
                    0.5
                } else {
                    0.1
                };
                if s > 0.0 {
                    (self.fd_pixel_step / s).min(cap)
                } else {
                    cap
                }
            })
            .collect()
    }
}

fn hinge_violation(h: &HingeLimit, full: &[f64]) -> f64 {
    let c = (0..3).map(|d| h.axis[d] * full[3 * h.joint + d]).sum::<f64>();
    if c > h.max {
        c - h.max
    } else if c < h.min {
        c - h.min
    } else {
        0.0
    }
}

impl Problem for Objective<'_> {
    fn cost(&self, x: &DVector<f64>) -> Option<f64> {
        self.energies(&self.full(x)).ok().map(|e| e.total)
    }

    fn linearize(&self, x: &DVector<f64>) -> Option<lm::Linearization> {
        let full = self.full(x);
        let kin = self.kinematics(&full).ok()?;
        let n = self.active.len();
        let w = self.weights;
        let mut cost = 0.0;
        let mut g = DVector::<f64>::zeros(n);
        let mut h = DMatrix::<f64>::zeros(n, n);

        for &(i, bp) in self.points {
            let lin = linearize_point(&kin, bp, &self.cam, &self.kp.points[i]).ok()?;
            let r = lin.residual / self.scale;
            let term = robust_term(&r, self.kp.confidence[i], self.sigma);
            cost += w.keypoint * term.cost;
            let cols: Vec<Vector2<f64>> = self.active.iter().map(|&p| lin.jacobian[p] / self.scale).collect();
            let wt = 2.0 * w.keypoint * term.weight;
            for a in 0..n {
                g[a] += wt * cols[a].dot(&r);
                for b in 0..=a {
                    h[(a, b)] += wt * cols[a].dot(&cols[b]);
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }

        let (k, nb) = (self.model.n_joints(), self.model.n_shape());
        let mut quadratic = |range: std::ops::Range<usize>, lambda: f64, cost: &mut f64| {
            for i in range {
                *cost += lambda * full[i] * full[i];
                if let Some(a) = self.slot[i] {
                    g[a] += 2.0 * lambda * full[i];
                    h[(a, a)] += 2.0 * lambda;
                }
            }
        };
        quadratic(3..3 * k, w.pose, &mut cost);
        quadratic(3 * k..3 * k + nb, w.shape, &mut cost);
        for hl in self.hinges {
            let v = hinge_violation(hl, &full);
            cost += w.hinge * v * v;
            if v != 0.0 {
                for d in 0..3 {
                    if let Some(a) = self.slot[3 * hl.joint + d] {
                        g[a] += 2.0 * w.hinge * v * hl.axis[d];
                        for e in 0..3 {
                            if let Some(b) = self.slot[3 * hl.joint + e] {
                                h[(a, b)] += 2.0 * w.hinge * hl.axis[d] * hl.axis[e];
                            }
                        }
                    }
                }
            }
        }

        if let Some(level) = &self.silhouette {
            let scale = w.silhouette * level.norm;
            let e0 = scale * self.silhouette_raw(&kin, level).ok()?;
            cost += e0;
            if scale > 0.0 {
                let steps = self.fd_steps(&kin, &level.cam);
                for (a, &i) in self.active.iter().enumerate() {
                    let eval = |step: f64| {
                        let mut p = full.clone();
                        p[i] += step;
                        let kin = self.kinematics(&p).ok()?;
                        self.silhouette_raw(&kin, level).ok().map(|e| scale * e)
                    };
                    let hstep = steps[a];
                    if let Some(e) = eval(hstep) {
                        g[a] += (e - e0) / hstep;
                    } else if let Some(e) = eval(-hstep) {
                        g[a] += (e0 - e) / hstep;
                    }
                }
            }
        }
        Some(lm::Linearization { cost, gradient: g, hessian: h })
    }
}

struct FitContext<'a> {
    model: &'a BodyModel,
    cam: Camera,
    kp: &'a KeypointSet2D,
    cfg: &'a FitConfig,
    points: Vec<(usize, BodyPoint)>,
    torso: Vec<(usize, BodyPoint)>,
    scale: f64,
}

impl<'a> FitContext<'a> {
    fn objective(&'a self, stage: &StageConfig, base: Vec<f64>, silhouette: Option<SilhouetteLevel<'a>>) -> Objective<'a> {
        let points = match stage.objective {
            StageObjective::TorsoKeypoints => &self.torso,
            _ => &self.points,
        };
        let mut obj = Objective {
            model: self.model,
            cam: self.cam,
            kp: self.kp,
            points,
            scale: self.scale,
            sigma: self.cfg.sigma,
            weights: self.cfg.weights,
            hinges: &self.cfg.hinges,
            silhouette,
            base,
            active: Vec::new(),
            slot: Vec::new(),
            fd_pixel_step: self.cfg.fd_pixel_step,
        };
        obj.set_active(active_indices(self.model, &stage.blocks));
        obj
    }

    fn run_stage(
        &'a self,
        stage: &StageConfig,
        name: String,
        params: Vec<f64>,
        silhouette: Option<SilhouetteLevel<'a>>,
    ) -> Result<(Vec<f64>, StageReport), FitError> {
        let obj = self.objective(stage, params, silhouette);
        let x0 = obj.packed(&obj.base);
        let opts = LmOptions { max_iterations: stage.max_iterations, rel_tol: stage.tolerance, grad_tol: 1e-12 };
        let rep = lm::minimize(&obj, x0, opts).map_err(|_| FitError::Diverged { stage: name.clone() })?;
        let full = obj.full(&rep.x);
        Ok((full, StageReport { name, energy_trace: rep.trace, iterations: rep.iterations, converged: rep.converged }))
    }
}

/// Staged fit of the model to keypoints and, optionally, a silhouette.
///
/// Every stage before the first silhouette stage runs once per configured
/// yaw start and the lowest-energy run continues: a body seen from the front
/// and its depth-mirrored twin project almost identically.
pub fn fit(
    model: &BodyModel,
    cam: &Camera,
    kp: &KeypointSet2D,
    silhouette: Option<&Mask>,
    cfg: &FitConfig,
    table: &RatioTable,
) -> Result<FitResult, FitError> {
    cfg.validate()?;
    cam.validate()?;
    let set = kp.resolve(model)?;
    let estimate = estimate_person_size(kp, table)?;
    let visible = |i: &usize| kp.confidence[*i] > 0.0;
    let to_points = |idx: Vec<usize>| -> Vec<(usize, BodyPoint)> {
        idx.into_iter().filter(visible).map(|i| (i, BodyPoint::from_keypoint(model, set.sources[i]))).collect()
    };
    if let Some(&i) = cfg.torso_keypoints.iter().flatten().find(|&&i| i >= kp.len()) {
        return Err(FitError::InvalidConfig(format!("torso keypoint {i} out of range")));
    }
    let points = to_points((0..kp.len()).collect());
    let mut torso = to_points(cfg.torso_keypoints.clone().unwrap_or_else(|| torso_keypoints(model, set)));
    if torso.len() < 3 {
        torso = points.clone();
    }
    let target = match silhouette {
        Some(m) if cfg.use_silhouette => {
            if m.width() != cam.width as usize || m.height() != cam.height as usize {
                return Err(FitError::InvalidInput("silhouette size differs from the camera image".into()));
            }
            Some(SilhouetteData::new(m)?)
        }
        _ => None,
    };
    let ctx = FitContext { model, cam: *cam, kp, cfg, points, torso, scale: estimate.size / cfg.reference_size };

    let split = cfg.stages.iter().position(|s| s.objective == StageObjective::Silhouette).unwrap_or(cfg.stages.len());
    let (pre, post) = cfg.stages.split_at(split);

    let mut best: Option<(f64, Vec<f64>, Vec<StageReport>)> = None;
    let mut last_err = None;
    for &yaw in &cfg.yaw_starts_deg {
        let mut pose = PoseParams::zeros(model.n_joints());
        pose.0[0] = Vector3::new(0.0, yaw.to_radians(), 0.0);
        let t = init_depth_with_pose(estimate.size, cam, model, kp, &pose)?;
        let mut params = pack_params(&pose, &crate::body_model::ShapeParams::zeros(model.n_shape()), &t);
        let mut reports = Vec::new();
        let mut failed = false;
        for stage in pre {
            match ctx.run_stage(stage, stage.name.clone(), params.clone(), None) {
                Ok((p, r)) => {
                    params = p;
                    reports.push(r);
                }
                Err(e) => {
                    last_err = Some(e);
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            continue;
        }
        let mut energy = reports.last().and_then(|r| r.energy_trace.last().copied()).unwrap_or(0.0);
        if let (true, Some(stage)) = (cfg.flip_search, pre.iter().rev().find(|s| s.objective == StageObjective::Keypoints)) {
            let ends = bone_ends(model, &ctx.points);
            for _ in 0..3 {
                let mut improved = false;
                for &bone in &ends {
                    let child = match bone.1 {
                        BodyPoint::Joint(c) => ends.iter().find(|(b, _)| *b == c).copied(),
                        BodyPoint::Vertex(_) => None,
                    };
                    for flipped in flip_candidates(model, &params, bone, child) {
                        let Ok((p, r)) = ctx.run_stage(stage, format!("flip{}", bone.0), flipped, None) else { continue };
                        let e = r.energy_trace.last().copied().unwrap_or(f64::INFINITY);
                        if e < energy * (1.0 - 1e-9) {
                            energy = e;
                            params = p;
                            reports.push(r);
                            improved = true;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
        }
        if best.as_ref().is_none_or(|(e, _, _)| energy < *e) {
            best = Some((energy, params, reports));
        }
    }
    let (_, mut params, mut reports) = match best {
        Some(b) => b,
        None => return Err(last_err.unwrap_or(FitError::Diverged { stage: "start".into() })),
    };

    let levels: Vec<(f64, SilhouetteData, Camera)> = match &target {
        Some(t) => pyramid(t, cam, &cfg.silhouette_pyramid)?,
        None => Vec::new(),
    };
    for stage in post {
        if stage.objective == StageObjective::Silhouette {
            for (factor, data, level_cam) in &levels {
                let k = ctx.scale * factor;
                let level = SilhouetteLevel { target: data, cam: *level_cam, norm: 1.0 / (k * k) };
                let (p, r) = ctx.run_stage(stage, format!("{}@{}", stage.name, factor), params, Some(level))?;
                params = p;
                reports.push(r);
            }
        } else {
            let (p, r) = ctx.run_stage(stage, stage.name.clone(), params, None)?;
            params = p;
            reports.push(r);
        }
    }

    let full_stage = StageConfig {
        name: "final".into(),
        objective: StageObjective::Keypoints,
        blocks: Vec::new(),
        max_iterations: 0,
        tolerance: 0.0,
    };
    let final_level =
        target.as_ref().map(|t| SilhouetteLevel { target: t, cam: *cam, norm: 1.0 / (ctx.scale * ctx.scale) });
    let energies = ctx.objective(&full_stage, params.clone(), final_level).energies(&params)?;
    let (pose, beta, t) = unpack_params(model, &params)?;
    let result = FitResult {
        keypoint_set: kp.set_name.clone(),
        pose: pose.to_flat(),
        shape: beta.0,
        translation: [t.x, t.y, t.z],
        energies,
        iterations: reports.iter().map(|r| r.iterations).sum(),
        converged: reports.iter().all(|r| r.converged),
        person_size: estimate.size,
        stages: reports,
    };
    if !result.is_finite() {
        return Err(FitError::Diverged { stage: "final".into() });
    }
    Ok(result)
}

/// Objective terms of a given parameter vector under `cfg`, normalized as in
/// [`fit`] for a person of `person_size` pixels.
pub fn fit_energies(
    model: &BodyModel,
    cam: &Camera,
    kp: &KeypointSet2D,
    silhouette: Option<&Mask>,
    cfg: &FitConfig,
    person_size: f64,
    params: &[f64],
) -> Result<Energies, FitError> {
    let set = kp.resolve(model)?;
    unpack_params(model, params)?;
    let points: Vec<(usize, BodyPoint)> = (0..kp.len())
        .filter(|&i| kp.confidence[i] > 0.0)
        .map(|i| (i, BodyPoint::from_keypoint(model, set.sources[i])))
        .collect();
    let target = match silhouette {
        Some(m) if cfg.use_silhouette => Some(SilhouetteData::new(m)?),
        _ => None,
    };
    let ctx = FitContext {
        model,
        cam: *cam,
        kp,
        cfg,
        points: points.clone(),
        torso: points,
        scale: person_size / cfg.reference_size,
    };
    let stage = StageConfig {
        name: "final".into(),
        objective: StageObjective::Keypoints,
        blocks: Vec::new(),
        max_iterations: 0,
        tolerance: 0.0,
    };
    let level = target.as_ref().map(|t| SilhouetteLevel { target: t, cam: *cam, norm: 1.0 / (ctx.scale * ctx.scale) });
    ctx.objective(&stage, params.to_vec(), level).energies(params)
}

fn pyramid(target: &SilhouetteData, cam: &Camera, factors: &[f64]) -> Result<Vec<(f64, SilhouetteData, Camera)>, FitError> {
    let mut out = Vec::new();
    for &f in factors {
        let halvings = (-f.log2()).round() as usize;
        let mut data = target.clone();
        let mut c = *cam;
        for _ in 0..halvings {
            data = data.downsampled()?;
            c = c.scaled(0.5);
        }
        out.push((f, data, c));
    }
    Ok(out)
}

/// A few damped Gauss-Newton steps on the keypoint term over the root
/// rotation and translation only; every other parameter stays fixed.
pub fn refine_root(
    model: &BodyModel,
    cam: &Camera,
    kp: &KeypointSet2D,
    params: &[f64],
    steps: usize,
    sigma: f64,
) -> Result<FitResult, FitError> {
    let set = kp.resolve(model)?;
    unpack_params(model, params)?;
    let points: Vec<(usize, BodyPoint)> = (0..kp.len())
        .filter(|&i| kp.confidence[i] > 0.0)
        .map(|i| (i, BodyPoint::from_keypoint(model, set.sources[i])))
        .collect();
    let weights = TermWeights { keypoint: 1.0, pose: 0.0, hinge: 0.0, shape: 0.0, silhouette: 0.0 };
    let mut obj = Objective {
        model,
        cam: *cam,
        kp,
        points: &points,
        scale: 1.0,
        sigma,
        weights,
        hinges: &[],
        silhouette: None,
        base: params.to_vec(),
        active: Vec::new(),
        slot: Vec::new(),
        fd_pixel_step: 1.0,
    };
    obj.set_active(active_indices(model, &[ParamBlock::RootRotation, ParamBlock::Translation]));
    let x0 = obj.packed(params);
    let opts = LmOptions { max_iterations: steps, rel_tol: 1e-12, grad_tol: 1e-12 };
    let rep = lm::minimize(&obj, x0, opts).map_err(|_| FitError::Diverged { stage: "refine".into() })?;
    let full = obj.full(&rep.x);
    let energies = obj.energies(&full)?;
    let (pose, beta, t) = unpack_params(model, &full)?;
    Ok(FitResult {
        keypoint_set: kp.set_name.clone(),
        pose: pose.to_flat(),
        shape: beta.0,
        translation: [t.x, t.y, t.z],
        energies,
        iterations: rep.iterations,
        converged: rep.converged,
        person_size: 0.0,
        stages: vec![StageReport {
            name: "refine".into(),
            energy_trace: rep.trace,
            iterations: rep.iterations,
            converged: rep.converged,
        }],
    })
}
