use nalgebra::Vector3;
use proptest::prelude::*;

use super::*;
use crate::so3;

fn max_dist(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[test]
fn mini_model_dimensions() {
    let m = make_mini_model();
    assert_eq!(m.n_vertices(), 58);
    assert_eq!(m.n_joints(), 6);
    assert_eq!(m.n_shape(), 2);
    assert_eq!(m.n_landmarks(), 12);
    assert_eq!(m.n_parts(), 6);
    assert_eq!(m.faces.len(), 100);
    assert_eq!(m.canonical_height, 1.70);
    assert!((stature(&m, &ShapeParams::zeros(2)) - 1.70).abs() < 1e-12);
}

#[test]
fn rest_pose_is_the_template() {
    let m = mini();
    let mesh = pose_mesh(m, &PoseParams::zeros(6), &ShapeParams::zeros(2), &Vector3::zeros()).unwrap();
    assert!(max_dist(&mesh.vertices, &m.template_vertices) < 1e-9);
}

#[test]
fn pure_translation() {
    let m = mini();
    let t = Vector3::new(0.0, 0.0, 2.0);
    let mesh = pose_mesh(m, &PoseParams::zeros(6), &ShapeParams::zeros(2), &t).unwrap();
    let shifted: Vec<_> = m.template_vertices.iter().map(|v| v + t).collect();
    assert!(max_dist(&mesh.vertices, &shifted) < 1e-12);
}

#[test]
fn root_rotation_about_z_rotates_through_root_joint() {
    let m = mini();
    let mut pose = PoseParams::zeros(6);
    pose.0[0] = Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
    let mesh = pose_mesh(m, &pose, &ShapeParams::zeros(2), &Vector3::zeros()).unwrap();
    let root = m.rest_joints(&[0.0, 0.0])[0];
    // rotating (x, y) by +90 deg about z maps it to (-y, x)
    let expected: Vec<_> = m
        .template_vertices
        .iter()
        .map(|v| {
            let d = v - root;
            root + Vector3::new(-d.y, d.x, d.z)
        })
        .collect();
    assert!(max_dist(&mesh.vertices, &expected) < 1e-12);
}

#[test]
fn height_direction_increases_stature() {
    let m = mini();
    let beta = ShapeParams(vec![1.0, 0.0]);
    let mesh = pose_mesh(m, &PoseParams::zeros(6), &beta, &Vector3::zeros()).unwrap();
    let (lo, hi) = mesh.vertices.iter().fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v.y), hi.max(v.y)));
    assert!(hi - lo > m.canonical_height + 0.1);
}

#[test]
fn girth_direction_leaves_joints_alone() {
    let m = mini();
    let a = m.rest_joints(&[0.0, 0.0]);
    let b = m.rest_joints(&[0.0, 2.0]);
    assert!(max_dist(&a, &b) < 1e-12);
}

#[test]
fn rest_joints_are_regressed_from_rest_vertices() {
    let m = mini();
    let beta = ShapeParams(vec![0.4, -0.7]);
    let mesh = pose_mesh(m, &PoseParams::zeros(6), &beta, &Vector3::zeros()).unwrap();
    let regressed: Vec<_> = (0..6)
        .map(|j| (0..58).fold(Vector3::zeros(), |acc, v| acc + m.joint_regressor[(j, v)] * mesh.vertices[v]))
        .collect();
    assert!(max_dist(&mesh.joints3d, &regressed) < 1e-12);
}

#[test]
fn dimension_mismatch_is_reported() {
    let m = mini();
    let err = pose_mesh(m, &PoseParams::zeros(5), &ShapeParams::zeros(2), &Vector3::zeros()).unwrap_err();
    assert!(matches!(err, ModelError::Dimension { what: "pose", .. }));
    let err = pose_mesh(m, &PoseParams::zeros(6), &ShapeParams::zeros(3), &Vector3::zeros()).unwrap_err();
    assert!(matches!(err, ModelError::Dimension { what: "shape", .. }));
}

#[test]
fn landmarks_follow_the_mesh() {
    let m = mini();
    let t = Vector3::new(0.1, -0.2, 3.0);
    let rest = pose_mesh(m, &PoseParams::zeros(6), &ShapeParams::zeros(2), &Vector3::zeros()).unwrap();
    let rest_lm = surface_landmarks(&rest, m);
    assert_eq!(rest_lm.len(), 12);
    for (l, &v) in rest_lm.iter().zip(&m.landmark_vertices) {
        assert!((l - m.template_vertices[v]).norm() < 1e-12);
    }
    let moved = pose_mesh(m, &PoseParams::zeros(6), &ShapeParams::zeros(2), &t).unwrap();
    let moved_lm = surface_landmarks(&moved, m);
    let expected: Vec<_> = rest_lm.iter().map(|p| p + t).collect();
    assert!(max_dist(&moved_lm, &expected) < 1e-12);

    let r = Vector3::new(0.3, -1.2, 0.5);
    let mut pose = PoseParams::zeros(6);
    pose.0[0] = r;
    let rotated = pose_mesh(m, &pose, &ShapeParams::zeros(2), &Vector3::zeros()).unwrap();
    let root = rest.joints3d[0];
    let rot = so3::exp(&r);
    let expected: Vec<_> = rest_lm.iter().map(|p| rot * (p - root) + root).collect();
    let d = max_dist(&surface_landmarks(&rotated, m), &expected);
    assert!(d < 1e-12, "{d}");
}

#[test]
fn shape_is_linear_at_rest() {
    let m = mini();
    let zero = PoseParams::zeros(6);
    let at = |b: [f64; 2]| pose_mesh(m, &zero, &ShapeParams(b.to_vec()), &Vector3::zeros()).unwrap().vertices;
    let t = at([0.0, 0.0]);
    let (a, b, ab) = (at([0.7, -0.3]), at([-1.1, 0.9]), at([-0.4, 0.6]));
    for i in 0..t.len() {
        let lhs = ab[i] - t[i];
        let rhs = (a[i] - t[i]) + (b[i] - t[i]);
        assert!((lhs - rhs).norm() < 1e-9);
    }
}

fn random_state(seed: u64) -> (PoseParams, ShapeParams, Vector3<f64>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pose = PoseParams((0..6).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect());
    let beta = ShapeParams(vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)]);
    let t = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(2.0..5.0));
    (pose, beta, t)
}

#[test]
fn point_jacobian_matches_finite_differences() {
    let m = mini();
    for seed in 0..5 {
        let (pose, beta, t) = random_state(seed);
        let kin = Kinematics::new(m, &pose, &beta, &t).unwrap();
        let points: Vec<BodyPoint> = (0..6).map(BodyPoint::Joint).chain((0..58).step_by(5).map(BodyPoint::Vertex)).collect();
        let mut flat: Vec<f64> = pose.to_flat();
        flat.extend(&beta.0);
        flat.extend(t.iter());
        let eval = |params: &[f64], p: BodyPoint| {
            let pose = PoseParams::from_flat(&params[..18]);
            let beta = ShapeParams(params[18..20].to_vec());
            let t = Vector3::new(params[20], params[21], params[22]);
            Kinematics::new(m, &pose, &beta, &t).unwrap().point(p)
        };
        for p in points {
            let (pos, jac) = kin.point_jacobian(p);
            assert!((pos - kin.point(p)).norm() < 1e-12);
            for i in 0..flat.len() {
                let h = 1e-6;
                let mut plus = flat.clone();
                plus[i] += h;
                let mut minus = flat.clone();
                minus[i] -= h;
                let fd = (eval(&plus, p) - eval(&minus, p)) / (2.0 * h);
                assert!((fd - jac[i]).norm() < 1e-6, "seed {seed} point {p:?} param {i}: fd {fd} vs {}", jac[i]);
            }
        }
    }
}

#[test]
fn pose_correctives_enter_the_jacobian() {
    let base = make_mini_model();
    let n = base.n_vertices();
    let cols = 9 * 5;
    let correctives: Vec<DMatrix<f64>> =
        (0..n).map(|v| DMatrix::from_fn(3, cols, |r, c| 0.01 * (((v * 7 + r * 3 + c) % 11) as f64 - 5.0))).collect();
    let m = BodyModel::new(
        base.template_vertices.clone(),
        base.faces.clone(),
        base.shape_blendshapes.clone(),
        Some(correctives),
        base.joint_regressor.clone(),
        base.skinning_weights.clone(),
        base.parents.clone(),
        base.part_label.clone(),
        base.landmark_vertices.clone(),
        base.keypoint_sets.clone(),
        base.canonical_height,
    )
    .unwrap();
    // rest pose is unaffected, since R - I vanishes
    let rest = pose_mesh(&m, &PoseParams::zeros(6), &ShapeParams::zeros(2), &Vector3::zeros()).unwrap();
    assert!(max_dist(&rest.vertices, &m.template_vertices) < 1e-12);

    let (pose, beta, t) = random_state(11);
    let kin = Kinematics::new(&m, &pose, &beta, &t).unwrap();
    let p = BodyPoint::Vertex(48);
    let (_, jac) = kin.point_jacobian(p);
    let flat = pose.to_flat();
    for i in 0..18 {
        let h = 1e-6;
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let at = |f: &[f64]| Kinematics::new(&m, &PoseParams::from_flat(f), &beta, &t).unwrap().point(p);
        let fd = (at(&plus) - at(&minus)) / (2.0 * h);
        assert!((fd - jac[i]).norm() < 1e-6, "param {i}");
    }
}

#[test]
fn invalid_models_are_rejected() {
    let base = make_mini_model();
    let rebuild = |f: &dyn Fn(&mut BodyModel)| {
        let mut m = base.clone();
        f(&mut m);
        BodyModel::new(
            m.template_vertices,
            m.faces,
            m.shape_blendshapes,
            m.pose_blendshapes,
            m.joint_regressor,
            m.skinning_weights,
            m.parents,
            m.part_label,
            m.landmark_vertices,
            m.keypoint_sets,
            m.canonical_height,
        )
    };
    let err = rebuild(&|m| m.skinning_weights[3] = vec![(0, 0.5)]).unwrap_err();
    assert!(err.to_string().contains("skinning row 3"), "{err}");
    let err = rebuild(&|m| m.joint_regressor[(2, 0)] += 0.25).unwrap_err();
    assert!(err.to_string().contains("joint regressor row 2"), "{err}");
    let err = rebuild(&|m| m.parents[3] = Some(4)).unwrap_err();
    assert!(err.to_string().contains("joint 3"), "{err}");
    let err = rebuild(&|m| m.landmark_vertices[4] = 999).unwrap_err();
    assert!(err.to_string().contains("landmark 4"), "{err}");
    let err = rebuild(&|m| m.part_label[9] = 31).unwrap_err();
    assert!(err.to_string().contains("face 9"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn global_rotation_is_rigid(rx in -3.0..3.0f64, ry in -3.0..3.0f64, rz in -3.0..3.0f64,
                                tx in -1.0..1.0f64, tz in 1.0..6.0f64, b0 in -2.0..2.0f64, b1 in -2.0..2.0f64) {
        let m = mini();
        let beta = ShapeParams(vec![b0, b1]);
        let t = Vector3::new(tx, 0.3, tz);
        let r = Vector3::new(rx, ry, rz);
        let mut pose = PoseParams::zeros(6);
        pose.0[0] = r;
        let posed = pose_mesh(m, &pose, &beta, &t).unwrap();
        let rest = pose_mesh(m, &PoseParams::zeros(6), &beta, &Vector3::zeros()).unwrap();
        let root = rest.joints3d[0];
        let rot = so3::exp(&r);
        let expected: Vec<_> = rest.vertices.iter().map(|v| rot * (v - root) + root + t).collect();
        prop_assert!(max_dist(&posed.vertices, &expected) < 1e-9);
        let expected_joints: Vec<_> = rest.joints3d.iter().map(|v| rot * (v - root) + root + t).collect();
        prop_assert!(max_dist(&posed.joints3d, &expected_joints) < 1e-9);
    }
}
