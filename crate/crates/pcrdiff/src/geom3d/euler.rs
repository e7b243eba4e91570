//! Intrinsic Z-Y-X Euler-angle representation, used by the 6-vector
//! diffusion-object ablation.

use super::{GeomError, Mat3, Quaternion, RigidTransform, Vec3};

/// 6-vector state for the Euler ablation: `[yaw, pitch, roll, tx, ty, tz]`,
/// angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformVec6(pub [f64; 6]);

pub(crate) fn quat_from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Quaternion {
    let qz = Quaternion::new((yaw / 2.0).cos(), 0.0, 0.0, (yaw / 2.0).sin());
    let qy = Quaternion::new((pitch / 2.0).cos(), 0.0, (pitch / 2.0).sin(), 0.0);
    let qx = Quaternion::new((roll / 2.0).cos(), (roll / 2.0).sin(), 0.0, 0.0);
    qz.mul(&qy).mul(&qx)
}

/// Extracts intrinsic Z-Y-X angles `(yaw, pitch, roll)` from a rotation
/// matrix. Errors with [`GeomError::GimbalLock`] when the pitch is within
/// 1e-6 rad of ±π/2.
pub(crate) fn euler_zyx_from_matrix(m: &Mat3) -> Result<(f64, f64, f64), GeomError> {
    let sp = (-m[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6 {
        return Err(GeomError::GimbalLock);
    }
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    Ok((yaw, pitch, roll))
}

/// Lenient variant for metric aggregation: at gimbal lock the roll is folded
/// into the yaw (roll = 0 convention) instead of erroring.
pub(crate) fn euler_zyx_from_matrix_lenient(m: &Mat3) -> (f64, f64, f64) {
    match euler_zyx_from_matrix(m) {
        Ok(t) => t,
        Err(_) => {
            let sp = (-m[(2, 0)]).clamp(-1.0, 1.0);
            let pitch = sp.asin();
            let yaw = (-m[(0, 1)]).atan2(m[(1, 1)]);
            (yaw, pitch, 0.0)
        }
    }
}

/// Z-Y-X Euler + translation 6-vector of a transform.
pub fn euler_to_vec6(g: &RigidTransform) -> Result<TransformVec6, GeomError> {
    let (yaw, pitch, roll) = euler_zyx_from_matrix(&g.rotation_matrix())?;
    let t = g.translation;
    Ok(TransformVec6([yaw, pitch, roll, t.x, t.y, t.z]))
}

/// Transform of a Euler 6-vector.
pub fn vec6_to_transform(v: &TransformVec6) -> Result<RigidTransform, GeomError> {
    let q = quat_from_euler_zyx(v.0[0], v.0[1], v.0[2]);
    RigidTransform::new(q, Vec3::new(v.0[3], v.0[4], v.0[5]))
}
