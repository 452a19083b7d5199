//! Pose and quaternion arithmetic.
//!
//! Quaternions are stored scalar-first `(w, x, y, z)`. The camera looks along
//! its local `+z` axis; a pose's viewing direction is that axis rotated into
//! the world frame. Every synthetic scene and parser in the crate uses the
//! same convention so that the line-of-sight term is self-consistent.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `| |q| - 1 |` for a quaternion to count as unit.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Below this norm a quaternion cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

/// Predicted and true positions closer than this (metres) make the
/// line-of-sight term exactly satisfied.
pub const LOS_DEGENERACY_EPS: f64 = 1e-9;

/// Orthonormality / determinant tolerance for matrix input.
pub const ROTATION_MATRIX_TOLERANCE: f64 = 1e-6;

/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_component(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Returns `None` for vectors too short to normalize.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > MIN_NORM).then(|| self * (1.0 / n))
    }

    pub fn component_min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn component_max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A quaternion with no unit-norm guarantee (network outputs are of this kind).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> UnitQuaternion {
        let Some(a) = axis.normalized() else {
            return UnitQuaternion::IDENTITY;
        };
        let (s, c) = (0.5 * angle).sin_cos();
        UnitQuaternion(Quaternion::new(c, a.x * s, a.y * s, a.z * s))
    }

    pub fn dot(self, o: Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn conjugate(self) -> Quaternion {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn scale(self, s: f64) -> Quaternion {
        Quaternion::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn is_unit(self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    /// Hamilton product.
    fn mul(self, o: Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;
    fn sub(self, o: Quaternion) -> Quaternion {
        Quaternion::new(self.w - o.w, self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Add for Quaternion {
    type Output = Quaternion;
    fn add(self, o: Quaternion) -> Quaternion {
        Quaternion::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// A quaternion known to have unit norm within [`UNIT_TOLERANCE`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Quaternion", into = "Quaternion")]
pub struct UnitQuaternion(Quaternion);

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion(Quaternion::IDENTITY);

    pub fn try_new(q: Quaternion) -> Result<Self> {
        if q.is_finite() && q.is_unit() {
            Ok(Self(q))
        } else {
            Err(Error::NotUnit { norm: q.norm() })
        }
    }

    pub fn quaternion(self) -> Quaternion {
        self.0
    }

    /// Rotates `v` by this quaternion: `q (0, v) q*`.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let q = self.0;
        let p = q * Quaternion::new(0.0, v.x, v.y, v.z) * q.conjugate();
        Vec3::new(p.x, p.y, p.z)
    }

    pub fn inverse(self) -> UnitQuaternion {
        UnitQuaternion(self.0.conjugate())
    }

    /// Product of two rotations, renormalized to stop drift.
    pub fn compose(self, o: UnitQuaternion) -> UnitQuaternion {
        let p = self.0 * o.0;
        UnitQuaternion(p.scale(1.0 / p.norm()))
    }

    /// Same rotation with `w >= 0`.
    pub fn canonical(self) -> UnitQuaternion {
        if self.0.w < 0.0 {
            UnitQuaternion(-self.0)
        } else {
            self
        }
    }

    /// Rotation angle (radians, in `[0, pi]`) and unit axis.
    pub fn to_axis_angle(self) -> (Vec3, f64) {
        let q = self.canonical().0;
        let v = Vec3::new(q.x, q.y, q.z);
        let s = v.norm();
        let angle = 2.0 * s.atan2(q.w);
        match v.normalized() {
            Some(axis) => (axis, angle),
            None => (Vec3::Z, 0.0),
        }
    }
}

impl TryFrom<Quaternion> for UnitQuaternion {
    type Error = Error;
    fn try_from(q: Quaternion) -> Result<Self> {
        Self::try_new(q)
    }
}

impl From<UnitQuaternion> for Quaternion {
    fn from(q: UnitQuaternion) -> Quaternion {
        q.0
    }
}

impl std::ops::Deref for UnitQuaternion {
    type Target = Quaternion;
    fn deref(&self) -> &Quaternion {
        &self.0
    }
}

/// Camera position (metres) and rotation. Ground-truth poses carry a unit
/// rotation; predicted poses may not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: Quaternion,
}

impl Pose {
    pub fn new(position: Vec3, rotation: Quaternion) -> Self {
        Self { position, rotation }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.rotation.is_finite()
    }
}

pub fn normalize(q: Quaternion) -> Result<UnitQuaternion> {
    let n = q.norm();
    if !n.is_finite() || n <= MIN_NORM {
        return Err(Error::ZeroNorm { norm: n });
    }
    Ok(UnitQuaternion(Quaternion::new(
        q.w / n,
        q.x / n,
        q.y / n,
        q.z / n,
    )))
}

/// Geodesic angle between two rotations, in degrees within `[0, 180]`.
///
/// Uses `4 atan2(min(|a-b|, |a+b|), max(..))`, which equals `2 acos|a.b|`
/// but stays accurate near 0 and gives exactly 0 for `q` against `-q`.
pub fn angular_distance_deg(a: UnitQuaternion, b: UnitQuaternion) -> f64 {
    let (diff, sum) = ((*a - *b).norm(), (*a + *b).norm());
    4.0 * diff.min(sum).atan2(diff.max(sum)).to_degrees()
}

/// World-frame direction of the camera's forward (`+z`) axis.
pub fn viewing_direction(q: UnitQuaternion) -> Vec3 {
    q.rotate(Vec3::Z)
}

/// Same as [`viewing_direction`] for a rotation that is unit by contract.
pub(crate) fn viewing_direction_of(rotation: Quaternion) -> Vec3 {
    debug_assert!(rotation.is_unit(), "ground-truth rotation must be unit");
    viewing_direction(UnitQuaternion(rotation))
}

/// Cosine of the angle between the ground-truth viewing direction and
/// `gt.position - pred_position`. Returns 1 when the two positions coincide
/// within [`LOS_DEGENERACY_EPS`].
pub fn line_of_sight_cos(gt: &Pose, pred_position: Vec3) -> f64 {
    let v = viewing_direction_of(gt.rotation);
    let delta = gt.position - pred_position;
    let dn = delta.norm();
    if dn <= LOS_DEGENERACY_EPS {
        return 1.0;
    }
    (v.dot(delta) / (v.norm() * dn)).clamp(-1.0, 1.0)
}

pub fn quat_to_rotmat(q: UnitQuaternion) -> Mat3 {
    let Quaternion { w, x, y, z } = q.0;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    t
}

pub fn mat3_mul_vec(m: &Mat3, v: Vec3) -> Vec3 {
    let a = v.to_array();
    let r = |i: usize| m[i][0] * a[0] + m[i][1] * a[1] + m[i][2] * a[2];
    Vec3::new(r(0), r(1), r(2))
}

/// Converts a rotation matrix to a unit quaternion with `w >= 0`.
pub fn rotmat_to_quat(m: &Mat3) -> Result<UnitQuaternion> {
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NotARotation {
            reason: "non-finite entry".into(),
        });
    }
    let mtm = mat3_mul(&transpose(m), m);
    let mut ortho_err: f64 = 0.0;
    for (i, row) in mtm.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            ortho_err = ortho_err.max((v - target).abs());
        }
    }
    if ortho_err > ROTATION_MATRIX_TOLERANCE {
        return Err(Error::NotARotation {
            reason: format!("not orthonormal (max |M^T M - I| = {ortho_err:e})"),
        });
    }
    let det = det3(m);
    if (det - 1.0).abs() > ROTATION_MATRIX_TOLERANCE {
        return Err(Error::NotARotation {
            reason: format!("determinant {det}"),
        });
    }

    // Shepperd: branch on the largest of (trace, diagonal) for stability.
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr >= m[0][0] && tr >= m[1][1] && tr >= m[2][2] {
        let s = 2.0 * (1.0 + tr).sqrt();
        Quaternion::new(
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        )
    } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
        let s = 2.0 * (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt();
        Quaternion::new(
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        )
    } else if m[1][1] >= m[2][2] {
        let s = 2.0 * (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt();
        Quaternion::new(
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        )
    } else {
        let s = 2.0 * (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt();
        Quaternion::new(
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        )
    };
    Ok(normalize(q)?.canonical())
}
