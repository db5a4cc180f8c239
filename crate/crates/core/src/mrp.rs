//! Modified Rodrigues parameters (MRP).
//!
//! `sigma = axis * tan(angle / 4)`. The rotation returned by [`rotation`]
//! maps body-frame vectors into the world frame. Angular velocities are
//! expressed in the body frame.

use nalgebra::{Matrix3, Vector3};

/// Norm above which [`rechart`] switches to the shadow set.
pub const RECHART_NORM: f64 = 1.0;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn rotation(sigma: &Vector3<f64>) -> Matrix3<f64> {
    let s2 = sigma.norm_squared();
    let s = skew(sigma);
    let d = (1.0 + s2) * (1.0 + s2);
    Matrix3::identity() + (8.0 * s * s + 4.0 * (1.0 - s2) * s) / d
}

/// `d(R(sigma) a) / d sigma`.
pub fn rotate_jacobian(sigma: &Vector3<f64>, a: &Vector3<f64>) -> Matrix3<f64> {
    rotate_jacobian_signed(sigma, a, 1.0)
}

/// `d(R(sigma)^T a) / d sigma`.
pub fn rotate_transpose_jacobian(sigma: &Vector3<f64>, a: &Vector3<f64>) -> Matrix3<f64> {
    rotate_jacobian_signed(sigma, a, -1.0)
}

// R = I + (8 S^2 + sign * 4 c S) / D with c = 1 - |sigma|^2, D = (1 + |sigma|^2)^2.
fn rotate_jacobian_signed(sigma: &Vector3<f64>, a: &Vector3<f64>, sign: f64) -> Matrix3<f64> {
    let s2 = sigma.norm_squared();
    let c = 1.0 - s2;
    let d = (1.0 + s2) * (1.0 + s2);
    let sa = sigma.cross(a);
    let ssa = sigma.cross(&sa);
    let n_a = 8.0 * ssa + sign * 4.0 * c * sa;
    let mut out = Matrix3::zeros();
    for k in 0..3 {
        let e = Vector3::ith(k, 1.0);
        let ea = e.cross(a);
        let dn = 8.0 * (e.cross(&sa) + sigma.cross(&ea)) + sign * (-8.0 * sigma[k] * sa + 4.0 * c * ea);
        let dd = 4.0 * sigma[k] * (1.0 + s2);
        out.set_column(k, &(dn / d - n_a * dd / (d * d)));
    }
    out
}

/// Kinematic matrix `B` with `sigma_dot = B(sigma) omega / 4`.
pub fn kinematics(sigma: &Vector3<f64>) -> Matrix3<f64> {
    let s2 = sigma.norm_squared();
    (1.0 - s2) * Matrix3::identity() + 2.0 * skew(sigma) + 2.0 * sigma * sigma.transpose()
}

/// `d(B(sigma) omega) / d sigma`.
pub fn kinematics_jacobian(sigma: &Vector3<f64>, omega: &Vector3<f64>) -> Matrix3<f64> {
    -2.0 * omega * sigma.transpose() - 2.0 * skew(omega)
        + 2.0 * sigma.dot(omega) * Matrix3::identity()
        + 2.0 * sigma * omega.transpose()
}

/// Semi-implicit orientation update `sigma + h/4 B(sigma) omega`.
pub fn integrate(sigma: &Vector3<f64>, omega: &Vector3<f64>, h: f64) -> Vector3<f64> {
    sigma + 0.25 * h * kinematics(sigma) * omega
}

/// Maps `sigma` to its shadow set when its norm exceeds [`RECHART_NORM`].
pub fn rechart(sigma: &Vector3<f64>) -> Vector3<f64> {
    let s2 = sigma.norm_squared();
    if s2 > RECHART_NORM * RECHART_NORM {
        -sigma / s2
    } else {
        *sigma
    }
}

/// MRP of a pure yaw rotation.
pub fn from_yaw(yaw: f64) -> Vector3<f64> {
    Vector3::new(0.0, 0.0, (yaw / 4.0).tan())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&Vector3<f64>) -> Vector3<f64>>(f: F, x: &Vector3<f64>) -> Matrix3<f64> {
        let eps = 1e-6;
        let mut j = Matrix3::zeros();
        for k in 0..3 {
            let mut xp = *x;
            let mut xm = *x;
            xp[k] += eps;
            xm[k] -= eps;
            j.set_column(k, &((f(&xp) - f(&xm)) / (2.0 * eps)));
        }
        j
    }

    #[test]
    fn rotation_is_orthonormal() {
        let sigma = Vector3::new(0.2, -0.4, 0.3);
        let r = rotation(&sigma);
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn yaw_matches_axis_angle() {
        let r = rotation(&from_yaw(0.7));
        let expected = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 0.7);
        assert!((r - expected.matrix()).norm() < 1e-12);
    }

    #[test]
    fn rotate_jacobians_match_finite_differences() {
        let sigma = Vector3::new(0.3, 0.1, -0.25);
        let a = Vector3::new(0.4, -1.0, 0.7);
        let j = rotate_jacobian(&sigma, &a);
        assert!((j - fd(|s| rotation(s) * a, &sigma)).norm() < 1e-8);
        let jt = rotate_transpose_jacobian(&sigma, &a);
        assert!((jt - fd(|s| rotation(s).transpose() * a, &sigma)).norm() < 1e-8);
        let w = Vector3::new(0.5, 2.0, -1.0);
        let jk = kinematics_jacobian(&sigma, &w);
        assert!((jk - fd(|s| kinematics(s) * w, &sigma)).norm() < 1e-8);
    }

    #[test]
    fn kinematics_consistent_with_body_rates() {
        let sigma = Vector3::new(0.1, 0.2, -0.3);
        let w = Vector3::new(0.3, -0.2, 0.5);
        let h = 1e-6;
        let r0 = rotation(&sigma);
        let r1 = rotation(&integrate(&sigma, &w, h));
        let rdot = (r1 - r0) / h;
        assert!((rdot - r0 * skew(&w)).norm() < 1e-5);
    }

    #[test]
    fn shadow_set_is_same_rotation() {
        let sigma = Vector3::new(0.9, 0.5, 0.2);
        let shadow = rechart(&sigma);
        assert!(shadow.norm() < 1.0);
        assert!((rotation(&sigma) - rotation(&shadow)).norm() < 1e-12);
    }
}
