//! Rotation helpers: axis-angle <-> matrix conversion, the SO(3) left
//! Jacobian used for analytic pose derivatives, and projection of an
//! arbitrary 3x3 matrix onto the nearest rotation.

use nalgebra::{Matrix3, Vector3};

const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric cross-product matrix of `v`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn exp(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = hat(r);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // second-order Taylor keeps the result orthonormal to ~1e-16
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Matrix3::identity() + a * k + b * k * k
}

/// Inverse of [`exp`]; the returned angle lies in `[0, pi]`.
pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-6 {
        return 0.5 * w;
    }
    if std::f64::consts::PI - theta > 1e-4 {
        return w * (theta / (2.0 * theta.sin()));
    }
    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part R + I = 2 a a^T (approximately), picking the largest column.
    let s = (r + Matrix3::identity()) * 0.5;
    let (mut best, mut best_norm) = (0, -1.0);
    for c in 0..3 {
        let n = s.column(c).norm();
        if n > best_norm {
            best = c;
            best_norm = n;
        }
    }
    let mut axis: Vector3<f64> = s.column(best).into_owned() / best_norm;
    // disambiguate the sign with the (small) antisymmetric residue
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3): `d exp(r) / d r_c * exp(r)^T = hat(J_l(r) e_c)`.
pub fn left_jacobian(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = hat(r);
    if theta2 < 1e-10 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Nearest rotation matrix in the Frobenius sense.
///
/// Uses the singular decomposition `M = U S V^T` and returns
/// `U diag(1, 1, det(U V^T)) V^T`, so reflections are flipped to proper
/// rotations. Non-finite inputs yield the identity.
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    if !m.iter().all(|v| v.is_finite()) {
        return Matrix3::identity();
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Matrix3::identity(),
    };
    let d = (u * v_t).determinant().signum();
    let d = if d == 0.0 { 1.0 } else { d };
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    // One Newton polar step cleans up the last ulps of SVD round-off so that
    // repeated projection is a fixed point.
    let refined = 0.5 * (r + r.try_inverse().unwrap_or(r).transpose());
    if (refined - r).norm() < 1e-6 {
        refined
    } else {
        r
    }
}

/// `max(|R^T R - I|_inf, |det R - 1|)`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let e = r.transpose() * r - Matrix3::identity();
    let m = e.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    m.max((r.determinant() - 1.0).abs())
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    exp(&Vector3::new(angle, 0.0, 0.0))
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    exp(&Vector3::new(0.0, angle, 0.0))
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    exp(&Vector3::new(0.0, 0.0, angle))
}
