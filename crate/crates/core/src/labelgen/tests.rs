use nalgebra::Vector3;
use proptest::prelude::*;

use super::*;
use crate::body_model::{mini, mini_part, PoseParams, ShapeParams};
use crate::render::Raster;

fn frontal_fit(yaw: f64, depth: f64) -> FitResult {
    let m = mini();
    let mut pose = PoseParams::zeros(m.n_joints());
    pose.0[0] = Vector3::new(0.0, yaw, 0.0);
    let beta = ShapeParams::zeros(m.n_shape());
    let t = crate::synth::place_root(m, &beta, 0.0, 0.0, depth);
    FitResult::from_params("skeleton", &pose, &beta, &t)
}

fn cam() -> Camera {
    Camera::centered(600.0, 320, 320)
}

#[test]
fn frontal_rest_pose_shows_every_part_on_the_mirrored_side() {
    let m = mini();
    let b = generate_labels(m, &frontal_fit(0.0, 3.0), &cam(), &PartReductionMap::mini()).unwrap();
    let mut count = [0usize; 7];
    let mut x_sum = [0f64; 7];
    for y in 0..b.part_mask.height() {
        for x in 0..b.part_mask.width() {
            let v = b.part_mask.get(x, y) as usize;
            count[v] += 1;
            x_sum[v] += x as f64;
        }
    }
    for part in 0..m.n_parts() {
        assert!(count[part + 1] > 0, "part {part} missing");
    }
    let mean_x = |p: u8| x_sum[p as usize + 1] / count[p as usize + 1] as f64;
    let cx = cam().principal_point[0];
    assert!(mean_x(mini_part::LEFT_UPPER_ARM) > cx && mean_x(mini_part::LEFT_FOREARM) > cx);
    assert!(mean_x(mini_part::RIGHT_UPPER_ARM) < cx && mean_x(mini_part::RIGHT_FOREARM) < cx);
    assert_eq!(b.part_mask.count_nonzero(), count[1..].iter().sum::<usize>());
}

// Oracle: brute-force depth test of every face containing the landmark's
// pixel center, independent of the z-buffer.
fn front_most_depth(verts: &[Vector3<f64>], faces: &[[u32; 3]], cam: &Camera, px: f64, py: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for f in faces {
        let r: Raster = crate::render::rasterize_region(
            &f.map(|i| verts[i as usize]),
            &[[0, 1, 2]],
            cam,
            crate::render::Viewport { x0: px as usize, y0: py as usize, width: 1, height: 1 },
        );
        if let Some(z) = r.depth_at(px as usize, py as usize) {
            best = Some(best.map_or(z, |b: f64| b.min(z)));
        }
    }
    best
}

#[test]
fn landmark_visibility_follows_the_facing_direction() {
    let m = mini();
    let c = cam();
    for (yaw, front_visible) in [(0.0, true), (std::f64::consts::PI, false)] {
        let fit = frontal_fit(yaw, 3.0);
        let b = generate_labels(m, &fit, &c, &PartReductionMap::mini()).unwrap();
        let vis = b.visible();
        // nose, chest, navel face the front; landmark 4 sits on the back
        for l in [1, 2, 3] {
            assert_eq!(vis[l], front_visible, "landmark {l} at yaw {yaw}");
        }
        assert_eq!(vis[4], !front_visible);
        let mesh = pose_mesh(m, &fit.pose_params(), &fit.shape_params(), &fit.translation_vec()).unwrap();
        let p = mesh.vertices[m.landmark_vertices[2]];
        let uv = c.project_point(&p);
        let z = front_most_depth(&mesh.vertices, &m.faces, &c, uv.x.floor(), uv.y.floor()).unwrap();
        assert_eq!((z - p.z).abs() <= VISIBILITY_TOLERANCE, front_visible);
    }
}

#[test]
fn body_behind_the_camera_is_an_error() {
    let r = generate_labels(mini(), &frontal_fit(0.0, -3.0), &cam(), &PartReductionMap::mini());
    assert!(matches!(r, Err(LabelError::BehindCamera)));
}

#[test]
fn foreground_matches_silhouette_and_contains_visible_landmarks() {
    let m = mini();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
    let c = cam();
    for _ in 0..10 {
        let (pose, beta) = crate::synth::PoseSampler::mini().sample(m, &mut rng);
        let t = crate::synth::place_root(m, &beta, 0.0, 0.0, 3.2);
        let fit = FitResult::from_params("skeleton", &pose, &beta, &t);
        let b = generate_labels(m, &fit, &c, &PartReductionMap::mini()).unwrap();
        let mesh = pose_mesh(m, &pose, &beta, &t).unwrap();
        let (sil, _) = rasterize(&mesh, m, &c, RasterMode::Silhouette);
        assert_eq!(b.foreground, sil);
        for (p, &v) in b.landmarks.points.iter().zip(&b.visible()) {
            if !v {
                continue;
            }
            let (x, y) = (p.x.floor() as i64, p.y.floor() as i64);
            let near = (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (xx, yy) = (x + dx, y + dy);
                    xx >= 0 && yy >= 0 && sil.get(xx as usize, yy as usize) != 0
                })
            });
            assert!(near, "visible landmark at {p:?} off the silhouette");
        }
        let again = generate_labels(m, &fit, &c, &PartReductionMap::mini()).unwrap();
        assert_eq!(again.part_mask, b.part_mask);
        assert_eq!(again.landmarks, b.landmarks);
    }
}

#[test]
fn reduction_of_trivial_masks() {
    let map = PartReductionMap::mini();
    let empty = Mask::new(5, 4);
    assert_eq!(reduce_parts(&empty, &map).unwrap(), empty);
    let head = Mask::from_fn(5, 4, |_, _| mini_part::HEAD + 1);
    let r = reduce_parts(&head, &map).unwrap();
    assert!(r.data().iter().all(|&v| v == ReducedClass::Head as u8));
    let bad = Mask::from_fn(2, 2, |_, _| 9);
    assert!(matches!(reduce_parts(&bad, &map), Err(LabelError::UnmappedPart(9))));
}

#[test]
fn reduction_map_round_trips_and_rejects_background_parts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.json");
    PartReductionMap::mini().save(&path).unwrap();
    assert_eq!(PartReductionMap::load(&path).unwrap(), PartReductionMap::mini());
    std::fs::write(&path, r#"{"parts": ["torso", "background"]}"#).unwrap();
    assert!(PartReductionMap::load(&path).is_err());
    let short = PartReductionMap { parts: vec![ReducedClass::Torso] };
    assert!(short.validate(mini()).is_err());
}

#[test]
fn ignore_mask_marks_disagreement() {
    let a = Mask::from_vec(3, 1, vec![0, 2, 5]).unwrap();
    let h = Mask::from_vec(3, 1, vec![1, 1, 0]).unwrap();
    assert_eq!(ignore_mask(&a, &h).unwrap().data(), &[1, 0, 1]);
    assert!(ignore_mask(&a, &Mask::new(2, 2)).is_err());
}

#[test]
fn bundle_manifest_hashes_the_written_files() {
    let m = mini();
    let b = generate_labels(m, &frontal_fit(0.3, 3.0), &cam(), &PartReductionMap::mini()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_bundle(&b, dir.path()).unwrap();
    assert_eq!(manifest.members.len(), 4);
    for member in &manifest.members {
        assert_eq!(member.sha256, sha256_hex(&std::fs::read(dir.path().join(&member.file)).unwrap()));
    }
    let parts = crate::render::read_mask_png(&dir.path().join("parts.png")).unwrap();
    assert_eq!(parts, b.part_mask);
    let kp = crate::fitting::read_keypoint_file(&dir.path().join("landmarks.txt")).unwrap();
    assert_eq!(kp.set_name, "surface12");
    assert_eq!(kp.len(), m.n_landmarks());
    let again = write_bundle(&b, dir.path()).unwrap();
    assert_eq!(again, manifest);
}

proptest! {
    #[test]
    fn reduction_is_a_per_pixel_lookup(data in proptest::collection::vec(0u8..7, 1..200)) {
        let map = PartReductionMap::mini();
        let mask = Mask::from_vec(data.len(), 1, data.clone()).unwrap();
        let r = reduce_parts(&mask, &map).unwrap();
        for (i, &v) in data.iter().enumerate() {
            let expected = if v == 0 { 0 } else { map.parts[v as usize - 1] as u8 };
            prop_assert_eq!(r.data()[i], expected);
        }
    }
}
