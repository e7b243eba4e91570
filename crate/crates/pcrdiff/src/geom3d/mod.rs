//! Rigid-body math: quaternions, SE(3) transforms, 7-vector conversions,
//! weighted SVD alignment, and the text format for transform records.

mod euler;
mod io;
mod kabsch;

pub use euler::{euler_to_vec6, vec6_to_transform, TransformVec6};
pub(crate) use euler::euler_zyx_from_matrix_lenient as euler_zyx_lenient;
pub use io::{load_transforms, save_transforms, TransformIoError};
pub use kabsch::kabsch;

use nalgebra::Matrix3;
use thiserror::Error;

/// Matrix type used for rotation matrices throughout the crate.
pub type Mat3 = Matrix3<f64>;

/// Norm below which a quaternion is considered degenerate.
pub const QUAT_DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("quaternion norm {norm:e} is below {QUAT_DEGENERATE_NORM:e}")]
    DegenerateQuaternion { norm: f64 },
    #[error("matrix is not a rotation: {reason}")]
    NotARotation { reason: String },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("degenerate geometry: {reason}")]
    DegenerateGeometry { reason: String },
    #[error("weight sum {sum:e} underflows")]
    WeightUnderflow { sum: f64 },
    #[error("bad range: {what}")]
    BadRange { what: String },
    #[error("gimbal lock: pitch within 1e-6 of ±π/2")]
    GimbalLock,
    #[error("mismatched lengths: {left} vs {right}")]
    MismatchedLengths { left: usize, right: usize },
}

/// A 3D point or vector in model coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, o: &Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn sub(&self, o: &Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn add(&self, o: &Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn scale(&self, c: f64) -> Vec3 {
        Vec3::new(self.x * c, self.y * c, self.z * c)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub(crate) fn to_na(self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(self.x, self.y, self.z)
    }

    pub(crate) fn from_na(v: nalgebra::Vector3<f64>) -> Self {
        Vec3::new(v.x, v.y, v.z)
    }
}

/// Rotation quaternion in (w, x, y, z) component order.
///
/// Most operations expect a unit quaternion; [`Quaternion::normalized`]
/// additionally canonicalizes the sign so that `w >= 0`, making the
/// representation of a rotation unique.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit-norm, canonical (`w >= 0`) version of `self`.
    ///
    /// Canonicalization picks one representative of the q/−q pair so the
    /// map from rotations to quaternions is a function.
    pub fn normalized(&self) -> Result<Quaternion, GeomError> {
        let n = self.norm();
        if n <= QUAT_DEGENERATE_NORM {
            return Err(GeomError::DegenerateQuaternion { norm: n });
        }
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Ok(Quaternion::new(self.w * s, self.x * s, self.y * s, self.z * s))
    }

    /// Hamilton product `self * other` (applies `other` first).
    pub fn mul(&self, o: &Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn conjugate(&self) -> Quaternion {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_matrix(&self) -> Result<Mat3, GeomError> {
        let n = self.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(GeomError::DegenerateQuaternion { norm: n });
        }
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Ok(Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }

    /// Quaternion of a rotation matrix (Shepperd's method), canonical form.
    pub fn from_matrix(m: &Mat3) -> Result<Quaternion, GeomError> {
        let ortho = (m * m.transpose() - Mat3::identity()).abs().max();
        if ortho > 1e-6 {
            return Err(GeomError::NotARotation {
                reason: format!("orthogonality residual {ortho:e}"),
            });
        }
        let det = m.determinant();
        if det <= 0.0 {
            return Err(GeomError::NotARotation { reason: format!("determinant {det}") });
        }
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalized()
    }

    /// Rotate a single point.
    pub fn rotate(&self, p: &Vec3) -> Vec3 {
        // q p q* via the two-cross-product expansion.
        let u = Vec3::new(self.x, self.y, self.z);
        let cross = |a: &Vec3, b: &Vec3| {
            Vec3::new(a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x)
        };
        let c1 = cross(&u, p);
        let c2 = cross(&u, &c1);
        Vec3::new(
            p.x + 2.0 * (self.w * c1.x + c2.x),
            p.y + 2.0 * (self.w * c1.y + c2.y),
            p.z + 2.0 * (self.w * c1.z + c2.z),
        )
    }
}

/// Rigid transformation: unit canonical rotation quaternion plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform =
        RigidTransform { rotation: Quaternion::IDENTITY, translation: Vec3::ZERO };

    /// Builds a transform, normalizing and canonicalizing the rotation.
    pub fn new(rotation: Quaternion, translation: Vec3) -> Result<Self, GeomError> {
        Ok(RigidTransform { rotation: rotation.normalized()?, translation })
    }

    /// Applies the transform to every point: `R p + t`.
    pub fn apply(&self, cloud: &[Vec3]) -> Result<Vec<Vec3>, GeomError> {
        if cloud.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        Ok(cloud.iter().map(|p| self.apply_point(p)).collect())
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p).add(&self.translation)
    }

    /// Composition: `self ∘ other`, i.e. `other` acts first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = self
            .rotation
            .mul(&other.rotation)
            .normalized()
            .expect("product of unit quaternions is unit");
        let translation = self.rotation.rotate(&other.translation).add(&self.translation);
        RigidTransform { rotation, translation }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rotation = self
            .rotation
            .conjugate()
            .normalized()
            .expect("conjugate of unit quaternion is unit");
        let translation = rotation.rotate(&self.translation).scale(-1.0);
        RigidTransform { rotation, translation }
    }

    /// Homogeneous 4×4 matrix, row-major.
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = self.rotation.to_matrix().expect("rotation is unit");
        let t = self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_matrix().expect("rotation is unit")
    }
}

/// Raw 7-real diffusion state: `[qw, qx, qy, qz, tx, ty, tz]`.
///
/// The quaternion part need not be unit mid-diffusion; conversion back to a
/// [`RigidTransform`] normalizes it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformVec7(pub [f64; 7]);

impl TransformVec7 {
    pub const ZERO: TransformVec7 = TransformVec7([0.0; 7]);

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn to_transform(&self) -> Result<RigidTransform, GeomError> {
        let v = &self.0;
        let q = Quaternion::new(v[0], v[1], v[2], v[3]).normalized()?;
        Ok(RigidTransform { rotation: q, translation: Vec3::new(v[4], v[5], v[6]) })
    }
}

impl RigidTransform {
    /// Canonical 7-vector of the transform (unit, `w >= 0` quaternion).
    pub fn to_vec7(&self) -> TransformVec7 {
        let q = self.rotation.normalized().expect("rotation is unit");
        let t = self.translation;
        TransformVec7([q.w, q.x, q.y, q.z, t.x, t.y, t.z])
    }
}

/// Uniformly samples intrinsic Z-Y-X Euler angles in `[0, rot_max_deg]`
/// degrees and translation components in `[0, trans_max]`.
pub fn random_transform<R: rand::Rng>(
    rng: &mut R,
    rot_max_deg: f64,
    trans_max: f64,
) -> Result<RigidTransform, GeomError> {
    if !(0.0..180.0).contains(&rot_max_deg) {
        return Err(GeomError::BadRange { what: format!("rot_max_deg {rot_max_deg}") });
    }
    if trans_max < 0.0 || !trans_max.is_finite() {
        return Err(GeomError::BadRange { what: format!("trans_max {trans_max}") });
    }
    let deg = rot_max_deg.to_radians();
    let yaw = if deg > 0.0 { rng.gen_range(0.0..deg) } else { 0.0 };
    let pitch = if deg > 0.0 { rng.gen_range(0.0..deg) } else { 0.0 };
    let roll = if deg > 0.0 { rng.gen_range(0.0..deg) } else { 0.0 };
    let tx = if trans_max > 0.0 { rng.gen_range(0.0..trans_max) } else { 0.0 };
    let ty = if trans_max > 0.0 { rng.gen_range(0.0..trans_max) } else { 0.0 };
    let tz = if trans_max > 0.0 { rng.gen_range(0.0..trans_max) } else { 0.0 };
    let rotation = euler::quat_from_euler_zyx(yaw, pitch, roll);
    RigidTransform::new(rotation, Vec3::new(tx, ty, tz))
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_geodesic_rad(a: &Quaternion, b: &Quaternion) -> f64 {
    let d = (a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z).abs().min(1.0);
    2.0 * d.acos()
}
