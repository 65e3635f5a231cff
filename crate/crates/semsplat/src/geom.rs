//! Quaternion / SE(3) / covariance math used by the renderer and its
//! backward pass.
//!
//! Quaternions are stored (w, x, y, z). Rotations built from a raw
//! quaternion always normalize first; gradients w.r.t. the raw values chain
//! through that normalization so finite differences on the raw storage agree
//! with the analytic path.

use nalgebra::{Matrix3, Vector3};

pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    if n == 0.0 {
        return QUAT_IDENTITY;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_rot(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of `quat_to_rot` w.r.t. each unit-quaternion
/// component, evaluated at `q` (assumed unit). Index order w, x, y, z.
pub fn quat_rot_jacobian(q: &Quat) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    let dw = Matrix3::new(
        0.0, -2.0 * z, 2.0 * y, //
        2.0 * z, 0.0, -2.0 * x, //
        -2.0 * y, 2.0 * x, 0.0,
    );
    let dx = Matrix3::new(
        0.0, 2.0 * y, 2.0 * z, //
        2.0 * y, -4.0 * x, -2.0 * w, //
        2.0 * z, 2.0 * w, -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y, 2.0 * x, 2.0 * w, //
        2.0 * x, 0.0, 2.0 * z, //
        -2.0 * w, 2.0 * z, -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z, -2.0 * w, 2.0 * x, //
        2.0 * w, -4.0 * z, 2.0 * y, //
        2.0 * x, 2.0 * y, 0.0,
    );
    [dw, dx, dy, dz]
}

/// Pull a gradient w.r.t. the normalized quaternion back to the raw
/// (unnormalized) storage: d/dq of q/|q| is (I - q̂ q̂ᵀ)/|q|.
pub fn quat_grad_raw(q_raw: &Quat, grad_unit: &Quat) -> Quat {
    let n = quat_norm(q_raw);
    let qh = quat_normalize(q_raw);
    let dot: f64 = (0..4).map(|k| qh[k] * grad_unit[k]).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (grad_unit[k] - qh[k] * dot) / n;
    }
    out
}

/// Quaternion (w, x, y, z) of a rotation matrix. Shepperd's method.
pub fn rot_to_quat(r: &Matrix3<f64>) -> Quat {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues rotation for an axis-angle vector.
pub fn so3_exp(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    if angle < 1e-12 {
        return Matrix3::identity() + skew(theta);
    }
    let k = skew(&(theta / angle));
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// SE(3) exponential of a twist (rotation xyz, translation xyz); returns
/// (R, t) of the rigid transform.
pub fn se3_exp(twist: &[f64; 6]) -> (Matrix3<f64>, Vector3<f64>) {
    let theta = Vector3::new(twist[0], twist[1], twist[2]);
    let rho = Vector3::new(twist[3], twist[4], twist[5]);
    let angle = theta.norm();
    let r = so3_exp(&theta);
    let v = if angle < 1e-9 {
        Matrix3::identity() + skew(&theta) * 0.5
    } else {
        let k = skew(&theta);
        Matrix3::identity() + k * ((1.0 - angle.cos()) / (angle * angle))
            + k * k * ((angle - angle.sin()) / (angle * angle * angle))
    };
    (r, v * rho)
}

/// World covariance of a Gaussian: R diag(s^2) Rᵀ for unit quaternion `q`
/// and positive scales `s` (meters).
pub fn covariance_from_unit(q: &Quat, scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_rot(q);
    let d = Matrix3::from_diagonal(&Vector3::new(
        scale.x * scale.x,
        scale.y * scale.y,
        scale.z * scale.z,
    ));
    r * d * r.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rot_jacobian_matches_finite_differences() {
        let q = quat_normalize(&[0.9, -0.2, 0.35, 0.1]);
        let jac = quat_rot_jacobian(&q);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            // finite difference of the unnormalized polynomial map
            let fd = (quat_to_rot(&qp) - quat_to_rot(&qm)) / (2.0 * h);
            for i in 0..3 {
                for j in 0..3 {
                    assert_relative_eq!(jac[k][(i, j)], fd[(i, j)], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn quat_rot_roundtrip() {
        let q = quat_normalize(&[0.3, 0.8, -0.1, 0.5]);
        let r = quat_to_rot(&q);
        let q2 = rot_to_quat(&r);
        // q and -q are the same rotation
        let sign = if q[0] * q2[0] >= 0.0 { 1.0 } else { -1.0 };
        for k in 0..4 {
            assert_relative_eq!(q[k], sign * q2[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn se3_exp_small_angle() {
        let (r, t) = se3_exp(&[0.0, 0.0, 0.0, 0.1, -0.2, 0.3]);
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-15);
        assert_relative_eq!(t, Vector3::new(0.1, -0.2, 0.3), epsilon = 1e-15);
    }

    #[test]
    fn se3_exp_rotation_is_orthonormal() {
        let (r, _) = se3_exp(&[0.4, -0.2, 0.9, 0.0, 0.0, 0.0]);
        assert_relative_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }
}
