//! Quaternion and pose numerics used by the motion-related queries.
//!
//! Conventions: quaternions are `(w, x, y, z)`, right-handed, and rotate
//! vectors actively (`v' = q v q*`). The ego-local frame is x forward,
//! y left, z up, so `v[0]` is longitudinal and `v[1]` lateral.

use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Quaternions whose norm drifts further than this from one are not
/// accepted as rotations by the database loader.
pub const MAX_NORM_DRIFT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(v: [f64; 3]) -> Self {
        Vec3::new(v[0], v[1], v[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, rhs: f64) -> Vec3 {
        Vec3::new(self.x * rhs, self.y * rhs, self.z * rhs)
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        match index {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index out of range: {index}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Rotation of `yaw` radians about +z (counter-clockwise seen from above).
    pub fn from_yaw(yaw: f64) -> Self {
        let half = 0.5 * yaw;
        Self::new(half.cos(), 0.0, 0.0, half.sin())
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn normalized(self) -> Result<Self, GeometryError> {
        let n = self.norm();
        if !n.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if n == 0.0 {
            return Err(GeometryError::ZeroQuaternion);
        }
        if n == 1.0 {
            return Ok(self);
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Heading angle about +z, assuming the rotation is (close to) planar.
    pub fn yaw(self) -> f64 {
        let siny = 2.0 * (self.w * self.z + self.x * self.y);
        let cosy = 1.0 - 2.0 * (self.y * self.y + self.z * self.z);
        siny.atan2(cosy)
    }

    fn vector(self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }
}

impl From<[f64; 4]> for Quaternion {
    fn from(q: [f64; 4]) -> Self {
        Quaternion::new(q[0], q[1], q[2], q[3])
    }
}

impl From<Quaternion> for [f64; 4] {
    fn from(q: Quaternion) -> Self {
        [q.w, q.x, q.y, q.z]
    }
}

fn rotate_unit(q: Quaternion, v: Vec3) -> Vec3 {
    // v' = v + w t + u x t, with t = 2 (u x v)
    let u = q.vector();
    let t = u.cross(v) * 2.0;
    v + t * q.w + u.cross(t)
}

/// Applies `q` to `v` (active rotation). `q` is renormalized first.
pub fn rotate(q: Quaternion, v: Vec3) -> Result<Vec3, GeometryError> {
    Ok(rotate_unit(q.normalized()?, v))
}

/// Applies `q⁻¹` to `v`, i.e. expresses a world-frame vector in the frame
/// whose orientation is `q`.
pub fn rotate_inverse(q: Quaternion, v: Vec3) -> Result<Vec3, GeometryError> {
    Ok(rotate_unit(q.normalized()?.conjugate(), v))
}

/// Ground-plane distance `√(x² + y²)`; z is ignored.
pub fn planar_norm(v: Vec3) -> f64 {
    v.x.hypot(v.y)
}

/// Displacement from `p_from` to `p_to`, expressed in the frame of a mover
/// at `p_from` with orientation `r_from`.
pub fn relative_motion(
    p_from: Vec3,
    r_from: Quaternion,
    p_to: Vec3,
) -> Result<Vec3, GeometryError> {
    rotate_inverse(r_from, p_to - p_from)
}

/// Position of a world point in the local frame of a pose.
pub fn world_to_local(
    pose_t: Vec3,
    pose_r: Quaternion,
    world: Vec3,
) -> Result<Vec3, GeometryError> {
    relative_motion(pose_t, pose_r, world)
}

/// Hamilton product.
impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}
