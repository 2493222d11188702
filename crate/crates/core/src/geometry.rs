//! Pinhole camera model, rigid transforms, and the bijection between
//! fingertip pairs and the centroid/width/yaw grasp parameterization.
//!
//! Camera frame convention (right-handed, standard optical): +x right,
//! +y down, +z forward. Yaw is the angle of the left-to-right fingertip
//! separation vector in the camera x-z plane, `atan2(v_z, v_x)`; pitch and
//! roll are held constant, so the separation vector has zero y-component.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Width below which a fingertip pair is treated as coincident.
pub const DEGENERATE_WIDTH: f64 = 1e-6;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::geometry(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(Error::geometry(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }

    /// Intrinsics used by the synthetic camera: 224x224, ~70 degree FOV.
    pub fn desk_default() -> Self {
        CameraIntrinsics { fx: 160.0, fy: 160.0, cx: 112.0, cy: 112.0, width: 224, height: 224 }
    }

    pub fn contains_pixel(&self, px: &Vec2) -> bool {
        px.x >= 0.0 && px.x < self.width as f64 && px.y >= 0.0 && px.y < self.height as f64
    }
}

/// Rigid transform `p' = R p + t` with `R` orthonormal, det +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Mat3::identity()).abs().max();
        if dev > ORTHONORMAL_TOL {
            return Err(Error::geometry(format!(
                "rotation not orthonormal (max deviation {dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::geometry(format!("rotation determinant {det} != +1")));
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn identity() -> Self {
        RigidTransform { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        RigidTransform { rotation: Mat3::identity(), translation: t }
    }

    /// Rotation about the +y axis by `angle` radians (right-handed).
    pub fn from_rotation_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let rotation = Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        RigidTransform { rotation, translation: Vec3::zeros() }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotate a direction vector (ignores translation).
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Composition: `(a.compose(b))(p) == a(b(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Checks the orthonormality invariant; used to reject corrupted poses
    /// coming from files before they silently skew associated goals.
    pub fn is_valid(&self) -> bool {
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Mat3::identity()).abs().max();
        dev <= 1e-6 && (self.rotation.determinant() - 1.0).abs() <= 1e-6
    }

    pub fn to_row_major_4x4(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_row_major_4x4(m: &[f64; 16]) -> Result<Self> {
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        RigidTransform::new(rotation, translation)
    }
}

/// Left and right fingertip positions in meters, camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FingertipPair {
    pub left: Vec3,
    pub right: Vec3,
}

impl FingertipPair {
    pub fn new(left: Vec3, right: Vec3) -> Self {
        FingertipPair { left, right }
    }

    pub fn centroid(&self) -> Vec3 {
        (self.left + self.right) * 0.5
    }

    pub fn width(&self) -> f64 {
        (self.right - self.left).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.left.iter().chain(self.right.iter()).all(|v| v.is_finite())
    }

    /// Separation y-component; zero under the constant pitch/roll convention.
    pub fn separation_y(&self) -> f64 {
        self.right.y - self.left.y
    }

    pub fn map(&self, t: &RigidTransform) -> FingertipPair {
        FingertipPair { left: t.apply(&self.left), right: t.apply(&self.right) }
    }
}

/// Centroid/width/yaw parameterization of a fingertip pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspParams {
    pub centroid: Vec3,
    /// Euclidean distance between the fingertips, meters.
    pub width: f64,
    /// Angle of the left-to-right separation vector in the camera x-z
    /// plane, radians in (-pi, pi].
    pub yaw: f64,
    /// True when the fingertips were coincident and width/yaw fell back to 0.
    pub degenerate: bool,
}

/// Perspective projection of a camera-frame point onto the image.
///
/// The result may lie outside the image bounds; callers filter.
pub fn project(p: &Vec3, k: &CameraIntrinsics) -> Result<Vec2> {
    if p.z <= 0.0 {
        return Err(Error::geometry(format!("cannot project point with depth {} <= 0", p.z)));
    }
    Ok(Vec2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Inverse of [`project`] at a known depth `z` (camera-frame meters).
pub fn unproject(px: &Vec2, z: f64, k: &CameraIntrinsics) -> Result<Vec3> {
    if z <= 0.0 {
        return Err(Error::geometry(format!("cannot unproject with depth {z} <= 0")));
    }
    Ok(Vec3::new((px.x - k.cx) * z / k.fx, (px.y - k.cy) * z / k.fy, z))
}

pub fn transform_point(t: &RigidTransform, p: &Vec3) -> Vec3 {
    t.apply(p)
}

/// Collapse a fingertip pair to `(centroid, width, yaw)`.
///
/// Coincident fingertips (width below [`DEGENERATE_WIDTH`]) return width 0
/// and yaw 0 with the degenerate flag set; closed grippers occur in real
/// data and must not error.
pub fn fingertips_to_goal(c: &FingertipPair) -> GraspParams {
    let centroid = c.centroid();
    let v = c.right - c.left;
    let width = v.norm();
    if width < DEGENERATE_WIDTH {
        return GraspParams { centroid, width: 0.0, yaw: 0.0, degenerate: true };
    }
    let yaw = v.z.atan2(v.x);
    GraspParams { centroid, width, yaw, degenerate: false }
}

/// Reconstruct the fingertip pair from `(centroid, width, yaw)`.
pub fn goal_to_fingertips(centroid: &Vec3, width: f64, yaw: f64) -> Result<FingertipPair> {
    if width < 0.0 {
        return Err(Error::geometry(format!("negative gripper width {width}")));
    }
    let half = 0.5 * width * Vec3::new(yaw.cos(), 0.0, yaw.sin());
    Ok(FingertipPair { left: centroid - half, right: centroid + half })
}
