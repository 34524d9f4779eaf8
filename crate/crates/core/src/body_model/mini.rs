//! Deterministic low-poly stand-in for an SMPL-format model.
//!
//! Capsule torso, a head and two T-posed two-segment arms; 58 vertices,
//! 6 joints, 2 shape directions (height, girth), 12 surface landmarks and
//! 6 face parts. Subject faces -z, so its left arm lies at +x and shows up
//! on the right of the image.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::{DMatrix, Vector3};

use super::{BodyModel, KeypointSetDef, KeypointSource};

pub const MINI_CANONICAL_HEIGHT: f64 = 1.70;

const TORSO_RINGS: [f64; 4] = [-0.10, -0.50, -0.90, -1.30];
const TORSO_RX: f64 = 0.17;
const TORSO_RZ: f64 = 0.11;
const HEAD_RINGS: [f64; 2] = [-1.48, -1.63];
const HEAD_R: f64 = 0.10;
const ARM_Y: f64 = -1.25;
const ARM_R: f64 = 0.05;
const SHOULDER_X: f64 = 0.20;
const ELBOW_X: f64 = 0.50;
const HAND_X: f64 = 0.78;

pub mod part {
    pub const TORSO: u8 = 0;
    pub const HEAD: u8 = 1;
    pub const LEFT_UPPER_ARM: u8 = 2;
    pub const LEFT_FOREARM: u8 = 3;
    pub const RIGHT_UPPER_ARM: u8 = 4;
    pub const RIGHT_FOREARM: u8 = 5;
}

pub mod joint {
    pub const PELVIS: usize = 0;
    pub const NECK: usize = 1;
    pub const LEFT_SHOULDER: usize = 2;
    pub const LEFT_ELBOW: usize = 3;
    pub const RIGHT_SHOULDER: usize = 4;
    pub const RIGHT_ELBOW: usize = 5;
}

#[derive(Clone, Copy, PartialEq)]
enum Region {
    Torso,
    Head,
    Arm,
}

/// Shared instance for callers that only need to read the model.
pub fn mini() -> &'static BodyModel {
    static MODEL: OnceLock<BodyModel> = OnceLock::new();
    MODEL.get_or_init(make_mini_model)
}

pub fn make_mini_model() -> BodyModel {
    let mut verts: Vec<Vector3<f64>> = Vec::with_capacity(58);
    let mut region = Vec::with_capacity(58);
    let mut push = |v: Vector3<f64>, r: Region, verts: &mut Vec<Vector3<f64>>| {
        verts.push(v);
        region.push(r);
        verts.len() - 1
    };

    // torso: bottom cap, 4 rings of 8, top cap
    let torso_bottom = push(Vector3::zeros(), Region::Torso, &mut verts);
    let mut torso_ring = [[0usize; 8]; 4];
    for (r, &y) in TORSO_RINGS.iter().enumerate() {
        for k in 0..8 {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            torso_ring[r][k] = push(Vector3::new(TORSO_RX * a.cos(), y, TORSO_RZ * a.sin()), Region::Torso, &mut verts);
        }
    }
    let torso_top = push(Vector3::new(0.0, -1.38, 0.0), Region::Torso, &mut verts);

    // head: bottom cap, 2 rings of 4, top cap
    let head_bottom = push(Vector3::new(0.0, -1.43, 0.0), Region::Head, &mut verts);
    let mut head_ring = [[0usize; 4]; 2];
    for (r, &y) in HEAD_RINGS.iter().enumerate() {
        for k in 0..4 {
            let a = k as f64 * std::f64::consts::FRAC_PI_2;
            head_ring[r][k] = push(Vector3::new(HEAD_R * a.cos(), y, HEAD_R * a.sin()), Region::Head, &mut verts);
        }
    }
    let head_top = push(Vector3::new(0.0, -1.70, 0.0), Region::Head, &mut verts);

    // arms: triangular cross-section rings at shoulder and elbow, hand tip
    let half = 3f64.sqrt() / 2.0;
    let ring_offsets = [(-ARM_R, 0.0), (0.5 * ARM_R, -half * ARM_R), (0.5 * ARM_R, half * ARM_R)];
    let mut arm = |side: f64, verts: &mut Vec<Vector3<f64>>| {
        let mut shoulder = [0usize; 3];
        let mut elbow = [0usize; 3];
        for (i, (dy, dz)) in ring_offsets.iter().enumerate() {
            shoulder[i] = push(Vector3::new(side * SHOULDER_X, ARM_Y + dy, *dz), Region::Arm, verts);
        }
        for (i, (dy, dz)) in ring_offsets.iter().enumerate() {
            elbow[i] = push(Vector3::new(side * ELBOW_X, ARM_Y + dy, *dz), Region::Arm, verts);
        }
        let hand = push(Vector3::new(side * HAND_X, ARM_Y, 0.0), Region::Arm, verts);
        (shoulder, elbow, hand)
    };
    let (l_shoulder, l_elbow, l_hand) = arm(1.0, &mut verts);
    let (r_shoulder, r_elbow, r_hand) = arm(-1.0, &mut verts);
    drop(arm);
    let n = verts.len();
    debug_assert_eq!(n, 58);

    let mut faces: Vec<[u32; 3]> = Vec::with_capacity(100);
    let mut labels = Vec::with_capacity(100);
    let mut tri = |a: usize, b: usize, c: usize, label: u8| {
        faces.push([a as u32, b as u32, c as u32]);
        labels.push(label);
    };
    for k in 0..8 {
        let k1 = (k + 1) % 8;
        tri(torso_bottom, torso_ring[0][k1], torso_ring[0][k], part::TORSO);
        for r in 0..3 {
            let (a, b) = (torso_ring[r][k], torso_ring[r][k1]);
            let (c, d) = (torso_ring[r + 1][k1], torso_ring[r + 1][k]);
            tri(a, b, c, part::TORSO);
            tri(a, c, d, part::TORSO);
        }
        tri(torso_top, torso_ring[3][k], torso_ring[3][k1], part::TORSO);
    }
    for k in 0..4 {
        let k1 = (k + 1) % 4;
        tri(head_bottom, head_ring[0][k1], head_ring[0][k], part::HEAD);
        let (a, b) = (head_ring[0][k], head_ring[0][k1]);
        let (c, d) = (head_ring[1][k1], head_ring[1][k]);
        tri(a, b, c, part::HEAD);
        tri(a, c, d, part::HEAD);
        tri(head_top, head_ring[1][k], head_ring[1][k1], part::HEAD);
    }
    for (shoulder, elbow, hand, upper, fore) in [
        (l_shoulder, l_elbow, l_hand, part::LEFT_UPPER_ARM, part::LEFT_FOREARM),
        (r_shoulder, r_elbow, r_hand, part::RIGHT_UPPER_ARM, part::RIGHT_FOREARM),
    ] {
        tri(shoulder[0], shoulder[2], shoulder[1], upper);
        for i in 0..3 {
            let i1 = (i + 1) % 3;
            tri(shoulder[i], shoulder[i1], elbow[i1], upper);
            tri(shoulder[i], elbow[i1], elbow[i], upper);
            tri(elbow[i], elbow[i1], hand, fore);
        }
    }
    drop(tri);

    // shape directions: 0 = height (vertical stretch from the soles),
    // 1 = girth (radial about each part's axis; leaves joints untouched)
    let height: Vec<Vector3<f64>> = verts.iter().map(|v| Vector3::new(0.0, 0.1 * v.y, 0.0)).collect();
    let girth: Vec<Vector3<f64>> = verts
        .iter()
        .zip(&region)
        .map(|(v, r)| match r {
            Region::Torso => Vector3::new(0.2 * v.x, 0.0, 0.2 * v.z),
            Region::Head => Vector3::new(0.1 * v.x, 0.0, 0.1 * v.z),
            Region::Arm => Vector3::new(0.0, 0.2 * (v.y - ARM_Y), 0.2 * v.z),
        })
        .collect();

    let k = 6;
    let mut regressor = DMatrix::zeros(k, n);
    for &v in &torso_ring[2] {
        regressor[(joint::PELVIS, v)] = 1.0 / 8.0;
    }
    regressor[(joint::NECK, torso_top)] = 0.5;
    for &v in &head_ring[0] {
        regressor[(joint::NECK, v)] = 0.125;
    }
    for (j, ring) in [
        (joint::LEFT_SHOULDER, l_shoulder),
        (joint::LEFT_ELBOW, l_elbow),
        (joint::RIGHT_SHOULDER, r_shoulder),
        (joint::RIGHT_ELBOW, r_elbow),
    ] {
        for v in ring {
            regressor[(j, v)] = 1.0 / 3.0;
        }
    }

    let mut skinning: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (v, r) in region.iter().enumerate() {
        match r {
            Region::Torso => skinning[v] = vec![(joint::PELVIS, 1.0)],
            Region::Head => skinning[v] = vec![(joint::NECK, 1.0)],
            Region::Arm => {}
        }
    }
    for (shoulder, elbow, hand, js, je) in [
        (l_shoulder, l_elbow, l_hand, joint::LEFT_SHOULDER, joint::LEFT_ELBOW),
        (r_shoulder, r_elbow, r_hand, joint::RIGHT_SHOULDER, joint::RIGHT_ELBOW),
    ] {
        for v in shoulder {
            skinning[v] = vec![(js, 1.0)];
        }
        for v in elbow {
            skinning[v] = vec![(js, 0.5), (je, 0.5)];
        }
        skinning[hand] = vec![(je, 1.0)];
    }

    let parents = vec![None, Some(0), Some(0), Some(2), Some(0), Some(4)];

    let landmarks = vec![
        head_top,          // 0 head top
        head_ring[1][3],   // 1 nose (front of the head)
        torso_ring[3][6],  // 2 chest
        torso_ring[2][6],  // 3 navel
        torso_ring[2][2],  // 4 back
        torso_bottom,      // 5 bottom
        torso_ring[1][0],  // 6 left hip
        torso_ring[1][4],  // 7 right hip
        l_hand,            // 8 left hand
        r_hand,            // 9 right hand
        l_elbow[0],        // 10 left elbow (top)
        r_elbow[0],        // 11 right elbow (top)
    ];

    use KeypointSource::{Joint as J, Landmark as L};
    let mut sets = BTreeMap::new();
    sets.insert(
        "joints".to_string(),
        KeypointSetDef {
            sources: (0..k).map(J).collect(),
            connections: vec![(0, 1), (2, 3), (4, 5), (2, 4)],
        },
    );
    sets.insert(
        "skeleton".to_string(),
        KeypointSetDef {
            sources: vec![J(0), J(1), J(2), J(3), L(8), J(4), J(5), L(9), L(0)],
            connections: vec![(0, 1), (1, 8), (2, 5), (2, 3), (3, 4), (5, 6), (6, 7)],
        },
    );
    // alternate annotation convention: no neck, nose instead of head top
    sets.insert(
        "fashion".to_string(),
        KeypointSetDef {
            sources: vec![J(0), J(2), J(3), L(8), J(4), J(5), L(9), L(1)],
            connections: vec![(0, 7), (1, 4), (1, 2), (2, 3), (4, 5), (5, 6)],
        },
    );
    sets.insert(
        "surface12".to_string(),
        KeypointSetDef {
            sources: (0..12).map(L).collect(),
            connections: vec![(0, 2), (2, 5), (6, 7), (8, 10), (9, 11)],
        },
    );

    BodyModel::new(
        verts,
        faces,
        vec![height, girth],
        None,
        regressor,
        skinning,
        parents,
        labels,
        landmarks,
        sets,
        MINI_CANONICAL_HEIGHT,
    )
    .expect("mini model satisfies all invariants")
}
