//! Pinhole camera model, rigid poses, and the plane-sweep coordinate mappings.
//!
//! Conventions (pinned for the whole crate):
//! - Poses map world coordinates to camera coordinates: `X_cam = R·X_world + t`.
//! - The camera looks along +z; pixel (u, v) back-projects to the ray
//!   `((u - cx)/fx, (v - cy)/fy, 1) · z`.
//! - A projection is in bounds when `0 ≤ u ≤ width-1` and `0 ≤ v ≤ height-1`
//!   and the depth in the target camera is positive. Out-of-frustum points are
//!   signalled with `valid = false`, never clamped.
//!
//! All geometry runs in double precision.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for rotation orthonormality and determinant checks.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("focal lengths must be positive, got fx={fx} fy={fy}")]
    InvalidFocal { fx: f64, fy: f64 },
    #[error("image size must be at least 4x4, got {width}x{height}")]
    ImageTooSmall { width: usize, height: usize },
    #[error("image size {width}x{height} is not divisible by {factor}")]
    NotDivisible {
        width: usize,
        height: usize,
        factor: usize,
    },
    #[error("rotation is not orthonormal within {ROTATION_TOLERANCE}")]
    NotOrthonormal,
    #[error("rotation determinant is not +1 within {ROTATION_TOLERANCE}")]
    NotRightHanded,
    #[error("depth range requires 0 < z_min < z_max, got [{z_min}, {z_max}]")]
    InvalidDepthRange { z_min: f64, z_max: f64 },
    #[error("need at least 2 depth hypotheses, got {0}")]
    TooFewHypotheses(usize),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidFocal { fx, fy });
        }
        if width < 4 || height < 4 {
            return Err(GeometryError::ImageTooSmall { width, height });
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Divide every parameter by `factor`, e.g. to follow a feature grid at
    /// quarter resolution. The pixel sizes must divide exactly.
    pub fn scaled_down(&self, factor: usize) -> Result<Self, GeometryError> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(GeometryError::NotDivisible {
                width: self.width,
                height: self.height,
                factor,
            });
        }
        let s = factor as f64;
        Intrinsics::new(
            self.fx / s,
            self.fy / s,
            self.cx / s,
            self.cy / s,
            self.width / factor,
            self.height / factor,
        )
    }

    /// True when the continuous pixel (u, v) lies inside `[0, w-1] x [0, h-1]`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Row-major `[R|t]` serialization form.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rows: [[f64; 4]; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let mut rows = [[0.0; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for c in 0..3 {
                row[c] = p.rotation[(r, c)];
            }
            row[3] = p.translation[r];
        }
        PoseRepr { rows }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = String;

    fn try_from(repr: PoseRepr) -> Result<Self, String> {
        let mut rotation = Matrix3::zeros();
        let mut translation = Vector3::zeros();
        for (r, row) in repr.rows.iter().enumerate() {
            for c in 0..3 {
                rotation[(r, c)] = row[c];
            }
            translation[r] = row[3];
        }
        Pose::new(rotation, translation).map_err(|e| e.to_string())
    }
}

impl Pose {
    /// Validates orthonormality and right-handedness within [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        let mut max_dev = 0.0f64;
        for r in 0..3 {
            for c in 0..3 {
                let target = if r == c { 1.0 } else { 0.0 };
                max_dev = max_dev.max((gram[(r, c)] - target).abs());
            }
        }
        if max_dev > ROTATION_TOLERANCE {
            return Err(GeometryError::NotOrthonormal);
        }
        if (rotation.determinant() - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::NotRightHanded);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Exact (bitwise) identity test; used to short-circuit warps so that the
    /// zero-baseline case is exact rather than accurate to rounding.
    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.transpose();
        Self {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    /// Camera center in world coordinates, `-Rᵀ·t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Intrinsics plus pose of one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn scaled_down(&self, factor: usize) -> Result<Self, GeometryError> {
        Ok(Self {
            intrinsics: self.intrinsics.scaled_down(factor)?,
            pose: self.pose,
        })
    }
}

/// Uniformly spaced depth hypotheses `z_0..z_{D-1}` with `z_0 = z_min` and
/// `z_{D-1} = z_max` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthHypotheses {
    z_min: f64,
    z_max: f64,
    values: Vec<f64>,
}

impl DepthHypotheses {
    pub fn new(z_min: f64, z_max: f64, count: usize) -> Result<Self, GeometryError> {
        if !(z_min > 0.0 && z_min < z_max) {
            return Err(GeometryError::InvalidDepthRange { z_min, z_max });
        }
        if count < 2 {
            return Err(GeometryError::TooFewHypotheses(count));
        }
        let spacing = (z_max - z_min) / (count - 1) as f64;
        let mut values: Vec<f64> = (0..count).map(|m| z_min + m as f64 * spacing).collect();
        values[count - 1] = z_max;
        Ok(Self {
            z_min,
            z_max,
            values,
        })
    }

    pub fn z_min(&self) -> f64 {
        self.z_min
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn spacing(&self) -> f64 {
        (self.z_max - self.z_min) / (self.count() - 1) as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Depth of a continuous plane index. Integer indices return the stored
    /// grid value bit-exactly.
    pub fn depth_of_index(&self, d: f64) -> f64 {
        let m = d as usize;
        if d >= 0.0 && m < self.count() && d == m as f64 {
            self.values[m]
        } else {
            self.z_min + d * self.spacing()
        }
    }

    /// Fractional plane index of a depth. Depths that equal a stored grid
    /// value return that index bit-exactly.
    pub fn index_of_depth(&self, z: f64) -> f64 {
        let d = (z - self.z_min) / self.spacing();
        let m = d.round();
        if m >= 0.0 && (m as usize) < self.count() && self.values[m as usize] == z {
            m
        } else {
            d
        }
    }

    /// Index of the hypothesis nearest to `z`, clamped to the grid.
    pub fn nearest_index(&self, z: f64) -> usize {
        let d = (z - self.z_min) / self.spacing();
        (d.round().max(0.0) as usize).min(self.count() - 1)
    }
}

/// Result of mapping a reference pixel at a hypothesis depth into another view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMapResult {
    /// Continuous column in the target view.
    pub u: f64,
    /// Continuous row in the target view.
    pub v: f64,
    /// Depth of the transformed point in the target camera (meters).
    pub z: f64,
    /// In bounds and in front of the target camera.
    pub valid: bool,
}

/// Result of mapping a reference voxel (u, v, plane) into another frustum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelMapResult {
    pub u: f64,
    pub v: f64,
    /// Continuous plane index in the target frustum.
    pub d: f64,
    pub valid: bool,
}

/// Relative pose taking reference-camera coordinates to source-camera
/// coordinates: `X_source = R·X_reference + t`.
///
/// Bit-identical poses short-circuit to the exact identity.
pub fn relative_pose(reference: &Pose, source: &Pose) -> Pose {
    if reference == source {
        return Pose::identity();
    }
    let rotation = source.rotation * reference.rotation.transpose();
    let translation = source.translation - rotation * reference.translation;
    Pose {
        rotation,
        translation,
    }
}

/// Plane-sweep mapping: back-project pixel (u, v) to depth `z_m`, transform by
/// the relative pose, and project into the target view.
pub fn homography_map(u: f64, v: f64, z_m: f64, k: &Intrinsics, rel: &Pose) -> PixelMapResult {
    debug_assert!(z_m > 0.0, "hypothesis depth must be positive");
    if rel.is_identity() {
        return PixelMapResult {
            u,
            v,
            z: z_m,
            valid: z_m > 0.0 && k.contains(u, v),
        };
    }
    let point = Vector3::new((u - k.cx) / k.fx * z_m, (v - k.cy) / k.fy * z_m, z_m);
    let mapped = rel.transform(&point);
    let z = mapped.z;
    if z <= 0.0 {
        return PixelMapResult {
            u: 0.0,
            v: 0.0,
            z,
            valid: false,
        };
    }
    let u_t = k.fx * mapped.x / z + k.cx;
    let v_t = k.fy * mapped.y / z + k.cy;
    PixelMapResult {
        u: u_t,
        v: v_t,
        z,
        valid: k.contains(u_t, v_t),
    }
}

/// Voxel-to-voxel frustum mapping used to resample volumes between views:
/// plane index -> depth -> [`homography_map`] -> fractional plane index.
pub fn epipolar_voxel_map(
    u: f64,
    v: f64,
    d: f64,
    hyp: &DepthHypotheses,
    k: &Intrinsics,
    rel: &Pose,
) -> VoxelMapResult {
    let max_index = (hyp.count() - 1) as f64;
    if rel.is_identity() {
        return VoxelMapResult {
            u,
            v,
            d,
            valid: k.contains(u, v) && d >= 0.0 && d <= max_index,
        };
    }
    let z = hyp.depth_of_index(d);
    let mapped = homography_map(u, v, z, k, rel);
    if !mapped.valid {
        return VoxelMapResult {
            u: mapped.u,
            v: mapped.v,
            d: 0.0,
            valid: false,
        };
    }
    let d_t = hyp.index_of_depth(mapped.z);
    VoxelMapResult {
        u: mapped.u,
        v: mapped.v,
        d: d_t,
        valid: d_t >= 0.0 && d_t <= max_index,
    }
}
