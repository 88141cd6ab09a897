//! Synthetic multi-view scenes with ray-cast ground-truth depth.
//!
//! Scenes are built from analytic primitives (fronto-parallel planes, slanted
//! planes, spheres) carrying procedural hash-noise textures evaluated at the
//! world-space hit point, so corresponding pixels in different views see the
//! same intensity by construction. Rendering is deterministic given the scene
//! seed and camera, bit-for-bit, regardless of thread count.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, GeometryError, Intrinsics, Pose};
use crate::grid::Image;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("trajectory needs at least 1 frame")]
    EmptyTrajectory,
    #[error("{motion} step must be positive, got {value}")]
    NonPositiveStep { motion: &'static str, value: f64 },
    #[error("orbit target coincides with the camera center")]
    DegenerateOrbit,
    #[error("scene depth range requires 0 < z_min < z_max, got [{z_min}, {z_max}]")]
    BadDepthRange { z_min: f64, z_max: f64 },
    #[error("primitive #{index} ({kind}) lies outside the depth range [{z_min}, {z_max}]")]
    PrimitiveOutOfRange {
        index: usize,
        kind: &'static str,
        z_min: f64,
        z_max: f64,
    },
    #[error("sphere radius must be positive")]
    BadSphere,
    #[error("plane normal must be nonzero")]
    BadNormal,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Procedural texture: multi-octave value noise evaluated at world points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Per-primitive seed, mixed with the scene seed.
    pub seed: u64,
    /// World-space size of one noise cell at the base octave (meters).
    pub scale: f64,
    pub octaves: u32,
    /// Intensity swing around 0.5; 0 gives a texture-less surface.
    pub amplitude: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 0.5,
            octaves: 3,
            amplitude: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// Infinite plane z = `z` in world coordinates.
    FrontoPlane { z: f64, texture: TextureParams },
    /// Infinite plane through `point` with the given normal.
    SlantedPlane {
        point: [f64; 3],
        normal: [f64; 3],
        texture: TextureParams,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        texture: TextureParams,
    },
}

impl Primitive {
    fn kind(&self) -> &'static str {
        match self {
            Primitive::FrontoPlane { .. } => "fronto_plane",
            Primitive::SlantedPlane { .. } => "slanted_plane",
            Primitive::Sphere { .. } => "sphere",
        }
    }

    fn texture(&self) -> &TextureParams {
        match self {
            Primitive::FrontoPlane { texture, .. } => texture,
            Primitive::SlantedPlane { texture, .. } => texture,
            Primitive::Sphere { texture, .. } => texture,
        }
    }
}

/// Background behind all primitives. Depth 0 marks misses as invalid, matching
/// the loss-mask convention; a positive depth acts as an infinite world plane
/// at that z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub depth: f64,
    #[serde(default)]
    pub texture: Option<TextureParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub background: Background,
}

/// On-disk scene description: geometry plus image size, intrinsics, and the
/// depth range the scene is expected to occupy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub background: Background,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.z_min > 0.0 && self.z_min < self.z_max) {
            return Err(SynthError::BadDepthRange {
                z_min: self.z_min,
                z_max: self.z_max,
            });
        }
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?;
        let in_range = |z: f64| z >= self.z_min && z <= self.z_max;
        for (index, prim) in self.primitives.iter().enumerate() {
            let ok = match prim {
                Primitive::FrontoPlane { z, .. } => in_range(*z),
                Primitive::SlantedPlane { point, normal, .. } => {
                    let n = Vector3::new(normal[0], normal[1], normal[2]);
                    if n.norm() == 0.0 {
                        return Err(SynthError::BadNormal);
                    }
                    in_range(point[2])
                }
                Primitive::Sphere { center, radius, .. } => {
                    if *radius <= 0.0 {
                        return Err(SynthError::BadSphere);
                    }
                    in_range(center[2] - radius) && in_range(center[2] + radius)
                }
            };
            if !ok {
                return Err(SynthError::PrimitiveOutOfRange {
                    index,
                    kind: prim.kind(),
                    z_min: self.z_min,
                    z_max: self.z_max,
                });
            }
        }
        if self.background.depth != 0.0 && !in_range(self.background.depth) {
            return Err(SynthError::PrimitiveOutOfRange {
                index: self.primitives.len(),
                kind: "background",
                z_min: self.z_min,
                z_max: self.z_max,
            });
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics, SynthError> {
        Ok(Intrinsics::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
        )?)
    }

    pub fn scene(&self) -> Scene {
        Scene {
            seed: self.seed,
            primitives: self.primitives.clone(),
            background: self.background.clone(),
        }
    }
}

/// One rendered view: grayscale image, per-pixel depth (0 = invalid), camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: Image,
    pub depth: Vec<f32>,
    pub camera: Camera,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn lattice_hash(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = mix64(seed ^ (x as u64).wrapping_mul(0x8ebc6af09c88c6e3));
    h = mix64(h ^ (y as u64).wrapping_mul(0x589965cc75374cc3));
    h = mix64(h ^ (z as u64).wrapping_mul(0x1d8e4e27c47d124f));
    // Map to [-1, 1].
    (h >> 11) as f64 / ((1u64 << 53) as f64) * 2.0 - 1.0
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, p: &Vector3<f64>) -> f64 {
    let x0 = p.x.floor();
    let y0 = p.y.floor();
    let z0 = p.z.floor();
    let (fx, fy, fz) = (
        smoothstep(p.x - x0),
        smoothstep(p.y - y0),
        smoothstep(p.z - z0),
    );
    let (xi, yi, zi) = (x0 as i64, y0 as i64, z0 as i64);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                acc += wx * wy * wz * lattice_hash(seed, xi + dx, yi + dy, zi + dz);
            }
        }
    }
    acc
}

/// Multi-octave noise in roughly [-1, 1], deterministic given the seed.
fn octave_noise(seed: u64, point: &Vector3<f64>, params: &TextureParams) -> f64 {
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut freq = 1.0 / params.scale.max(1e-9);
    for octave in 0..params.octaves.max(1) {
        let p = point * freq;
        total += amp * value_noise(mix64(seed ^ octave as u64), &p);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    total / norm
}

fn texture_intensity(scene_seed: u64, params: &TextureParams, point: &Vector3<f64>) -> f32 {
    if params.amplitude == 0.0 {
        return 0.5;
    }
    let seed = mix64(scene_seed) ^ params.seed;
    let n = octave_noise(seed, point, params);
    (0.5 + params.amplitude * n).clamp(0.0, 1.0) as f32
}

struct Hit {
    /// Camera-space depth along the ray (ray direction has unit z in camera frame).
    depth: f64,
    point: Vector3<f64>,
    texture: TextureParams,
}

fn intersect_plane(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    point: &Vector3<f64>,
    normal: &Vector3<f64>,
) -> Option<f64> {
    let denom = normal.dot(dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let s = normal.dot(&(point - origin)) / denom;
    (s > 1e-9).then_some(s)
}

fn intersect_sphere(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    center: &Vector3<f64>,
    radius: f64,
) -> Option<f64> {
    let oc = origin - center;
    let a = dir.dot(dir);
    let b = 2.0 * dir.dot(&oc);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sqrt_disc = disc.sqrt();
    let s_near = (-b - sqrt_disc) / (2.0 * a);
    let s_far = (-b + sqrt_disc) / (2.0 * a);
    if s_near > 1e-9 {
        Some(s_near)
    } else if s_far > 1e-9 {
        Some(s_far)
    } else {
        None
    }
}

fn cast(scene: &Scene, origin: &Vector3<f64>, dir_world: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |depth: f64, texture: TextureParams| {
        if best.as_ref().is_none_or(|b| depth < b.depth) {
            best = Some(Hit {
                depth,
                point: origin + dir_world * depth,
                texture,
            });
        }
    };
    for prim in &scene.primitives {
        match prim {
            Primitive::FrontoPlane { z, .. } => {
                if let Some(s) = intersect_plane(
                    origin,
                    dir_world,
                    &Vector3::new(0.0, 0.0, *z),
                    &Vector3::z(),
                ) {
                    consider(s, *prim.texture());
                }
            }
            Primitive::SlantedPlane { point, normal, .. } => {
                let p = Vector3::new(point[0], point[1], point[2]);
                let n = Vector3::new(normal[0], normal[1], normal[2]);
                if let Some(s) = intersect_plane(origin, dir_world, &p, &n) {
                    consider(s, *prim.texture());
                }
            }
            Primitive::Sphere { center, radius, .. } => {
                let c = Vector3::new(center[0], center[1], center[2]);
                if let Some(s) = intersect_sphere(origin, dir_world, &c, *radius) {
                    consider(s, *prim.texture());
                }
            }
        }
    }
    if best.is_none() && scene.background.depth > 0.0 {
        if let Some(s) = intersect_plane(
            origin,
            dir_world,
            &Vector3::new(0.0, 0.0, scene.background.depth),
            &Vector3::z(),
        ) {
            let texture = scene.background.texture.unwrap_or(TextureParams {
                amplitude: 0.0,
                ..TextureParams::default()
            });
            best = Some(Hit {
                depth: s,
                point: origin + dir_world * s,
                texture,
            });
        }
    }
    best
}

/// Cast the ray through continuous pixel (u, v); returns (depth, intensity)
/// with depth 0 for misses. Exposed so tests can evaluate the scene at
/// sub-pixel correspondences in full precision.
pub fn cast_ray(scene: &Scene, camera: &Camera, u: f64, v: f64) -> (f64, f32) {
    let k = &camera.intrinsics;
    let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    // Ray origin is the camera center, so the ray parameter equals the
    // camera-space depth (the direction has unit z in the camera frame).
    let origin = camera.pose.center();
    let dir_world = camera.pose.rotation.transpose() * dir_cam;
    match cast(scene, &origin, &dir_world) {
        Some(hit) => (
            hit.depth,
            texture_intensity(scene.seed, &hit.texture, &hit.point),
        ),
        None => (0.0, 0.5),
    }
}

/// Render all pixels of one view. Parallel over rows; each pixel is
/// independent, so the output is identical for any thread count.
pub fn render(scene: &Scene, camera: &Camera) -> RenderedFrame {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut image = Image::zeros(w, h);
    let mut depth = vec![0.0f32; w * h];
    image
        .data
        .par_chunks_mut(w)
        .zip(depth.par_chunks_mut(w))
        .enumerate()
        .for_each(|(v, (img_row, depth_row))| {
            for u in 0..w {
                let (z, intensity) = cast_ray(scene, camera, u as f64, v as f64);
                depth_row[u] = z as f32;
                img_row[u] = intensity;
            }
        });
    RenderedFrame {
        image,
        depth,
        camera: *camera,
    }
}

/// Camera motion patterns for synthetic trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    /// Slide the camera along its own x axis by `baseline` per frame.
    Lateral { baseline: f64 },
    /// Advance the camera along its own z axis by `step` per frame.
    Forward { step: f64 },
    /// Rotate the camera center around the world y axis through `target`,
    /// keeping the camera aimed at the target.
    Orbit { target: [f64; 3], angle_step: f64 },
}

/// World-to-camera look-at rotation with a y-down image convention.
fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Result<Pose, SynthError> {
    let forward = target - center;
    if forward.norm() < 1e-12 {
        return Err(SynthError::DegenerateOrbit);
    }
    let z_axis = forward.normalize();
    let up_hint = Vector3::new(0.0, 1.0, 0.0);
    let x_axis = up_hint.cross(&z_axis);
    if x_axis.norm() < 1e-9 {
        return Err(SynthError::DegenerateOrbit);
    }
    let x_axis = x_axis.normalize();
    let y_axis = z_axis.cross(&x_axis);
    let rotation = Matrix3::from_rows(&[
        x_axis.transpose(),
        y_axis.transpose(),
        z_axis.transpose(),
    ]);
    let translation = -(rotation * center);
    Ok(Pose::new(rotation, translation)?)
}

/// Deterministic pose sequence starting at `start`.
pub fn make_trajectory(
    n_frames: usize,
    motion: &Motion,
    start: &Pose,
) -> Result<Vec<Pose>, SynthError> {
    if n_frames == 0 {
        return Err(SynthError::EmptyTrajectory);
    }
    match motion {
        Motion::Lateral { baseline } => {
            if *baseline <= 0.0 {
                return Err(SynthError::NonPositiveStep {
                    motion: "lateral baseline",
                    value: *baseline,
                });
            }
            Ok((0..n_frames)
                .map(|k| Pose {
                    rotation: start.rotation,
                    translation: start.translation
                        - Vector3::new(k as f64 * baseline, 0.0, 0.0),
                })
                .collect())
        }
        Motion::Forward { step } => {
            if *step <= 0.0 {
                return Err(SynthError::NonPositiveStep {
                    motion: "forward step",
                    value: *step,
                });
            }
            Ok((0..n_frames)
                .map(|k| Pose {
                    rotation: start.rotation,
                    translation: start.translation - Vector3::new(0.0, 0.0, k as f64 * step),
                })
                .collect())
        }
        Motion::Orbit { target, angle_step } => {
            if *angle_step <= 0.0 {
                return Err(SynthError::NonPositiveStep {
                    motion: "orbit angle step",
                    value: *angle_step,
                });
            }
            let target = Vector3::new(target[0], target[1], target[2]);
            let start_center = start.center();
            let arm = start_center - target;
            (0..n_frames)
                .map(|k| {
                    let theta = k as f64 * angle_step;
                    let (s, c) = theta.sin_cos();
                    // Rotate the arm around the world y axis.
                    let rotated = Vector3::new(
                        c * arm.x + s * arm.z,
                        arm.y,
                        -s * arm.x + c * arm.z,
                    );
                    look_at(&(target + rotated), &target)
                })
                .collect()
        }
    }
}
