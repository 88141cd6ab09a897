//! Plane-sweep matching volumes and the hybrid cost volume.
//!
//! The learned operators of the original architecture are replaced by fixed
//! deterministic ones: the feature extractor is a filter bank, the channel
//! reduction is a seeded linear map, volume regularization is separable box
//! smoothing, and the context branch is a multi-scale descriptor behind a
//! seeded projection. The geometric construction (homography warping,
//! concatenation, view-average pooling, context expansion) follows the
//! standard hybrid-volume layout exactly.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    homography_map, relative_pose, Camera, DepthHypotheses, GeometryError,
};
use crate::grid::{ChannelVolume, Image, VolumeShape, VoxelMask};
use crate::params::{LinearMap, CONTEXT_DESCRIPTOR_CHANNELS};

/// Spatial downsampling factor between images and feature grids.
pub const FEATURE_SCALE: usize = 4;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("image must be at least 8x8, got {width}x{height}")]
    ImageTooSmall { width: usize, height: usize },
    #[error("image size {width}x{height} must be divisible by {FEATURE_SCALE}")]
    NotDivisible { width: usize, height: usize },
    #[error("feature maps disagree: {0}")]
    FeatureMismatch(String),
    #[error("view list is empty")]
    NoViews,
    #[error("volume shapes disagree across views")]
    ViewShapeMismatch,
    #[error("reduction map is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    BadReduction {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("context projection expects {expected} rows (one per plane), got {got}")]
    BadContextProjection { expected: usize, got: usize },
    #[error("image {iw}x{ih} does not match volume grid {vw}x{vh} at 1/{FEATURE_SCALE} scale")]
    GridMismatch {
        iw: usize,
        ih: usize,
        vw: usize,
        vh: usize,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Quarter-resolution feature grid with the camera it was extracted from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major: `data[c * h * w + v * w + u]`.
    pub data: Vec<f32>,
    /// Camera at feature resolution (intrinsics divided by [`FEATURE_SCALE`]).
    pub camera: Camera,
}

impl FeatureMap {
    #[inline]
    pub fn get(&self, c: usize, v: usize, u: usize) -> f32 {
        self.data[(c * self.height + v) * self.width + u]
    }
}

/// Matching feature volume with a per-voxel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub volume: ChannelVolume,
    pub mask: VoxelMask,
}

/// Regularized matching volume plus one context channel, tied to its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridVolume {
    pub volume: ChannelVolume,
    pub mask: VoxelMask,
    pub camera: Camera,
}

// ---------------------------------------------------------------------------
// Filter bank
// ---------------------------------------------------------------------------

pub(crate) fn gradient_x(image: &Image) -> Image {
    let mut out = Image::zeros(image.width, image.height);
    for v in 0..image.height {
        for u in 0..image.width {
            let right = image.get_clamped(u as isize + 1, v as isize);
            let left = image.get_clamped(u as isize - 1, v as isize);
            out.set(u, v, (right - left) * 0.5);
        }
    }
    out
}

pub(crate) fn gradient_y(image: &Image) -> Image {
    let mut out = Image::zeros(image.width, image.height);
    for v in 0..image.height {
        for u in 0..image.width {
            let below = image.get_clamped(u as isize, v as isize + 1);
            let above = image.get_clamped(u as isize, v as isize - 1);
            out.set(u, v, (below - above) * 0.5);
        }
    }
    out
}

/// Separable box filter with clamped borders (window mean over in-range taps).
pub(crate) fn box_filter(image: &Image, radius: usize) -> Image {
    let r = radius as isize;
    let mut horizontal = Image::zeros(image.width, image.height);
    for v in 0..image.height {
        for u in 0..image.width {
            let mut acc = 0.0f64;
            let mut count = 0u32;
            for du in -r..=r {
                let uu = u as isize + du;
                if uu >= 0 && uu < image.width as isize {
                    acc += image.get(uu as usize, v) as f64;
                    count += 1;
                }
            }
            horizontal.set(u, v, (acc / count as f64) as f32);
        }
    }
    let mut out = Image::zeros(image.width, image.height);
    for v in 0..image.height {
        for u in 0..image.width {
            let mut acc = 0.0f64;
            let mut count = 0u32;
            for dv in -r..=r {
                let vv = v as isize + dv;
                if vv >= 0 && vv < image.height as isize {
                    acc += horizontal.get(u, vv as usize) as f64;
                    count += 1;
                }
            }
            out.set(u, v, (acc / count as f64) as f32);
        }
    }
    out
}

/// 4x4 average pooling.
pub(crate) fn avg_pool4(image: &Image) -> Image {
    let (w, h) = (image.width / FEATURE_SCALE, image.height / FEATURE_SCALE);
    let mut out = Image::zeros(w, h);
    for v in 0..h {
        for u in 0..w {
            let mut acc = 0.0f64;
            for dv in 0..FEATURE_SCALE {
                for du in 0..FEATURE_SCALE {
                    acc += image.get(u * FEATURE_SCALE + du, v * FEATURE_SCALE + dv) as f64;
                }
            }
            out.set(u, v, (acc / (FEATURE_SCALE * FEATURE_SCALE) as f64) as f32);
        }
    }
    out
}

/// Base filter responses backing the feature channels, in cycle order:
/// intensity, x-gradient, y-gradient, box radius 1, box radius 2.
fn filter_bank(image: &Image) -> [Image; 5] {
    [
        image.clone(),
        gradient_x(image),
        gradient_y(image),
        box_filter(image, 1),
        box_filter(image, 2),
    ]
}

/// Deterministic feature extraction: the filter bank assigned cyclically over
/// `channels`, each response average-pooled to quarter resolution.
pub fn extract_features(
    image: &Image,
    channels: usize,
    camera: &Camera,
) -> Result<FeatureMap, VolumeError> {
    if image.width < 8 || image.height < 8 {
        return Err(VolumeError::ImageTooSmall {
            width: image.width,
            height: image.height,
        });
    }
    if image.width % FEATURE_SCALE != 0 || image.height % FEATURE_SCALE != 0 {
        return Err(VolumeError::NotDivisible {
            width: image.width,
            height: image.height,
        });
    }
    let pooled: Vec<Image> = filter_bank(image).iter().map(avg_pool4).collect();
    let (w, h) = (pooled[0].width, pooled[0].height);
    let mut data = Vec::with_capacity(channels * w * h);
    for c in 0..channels {
        data.extend_from_slice(&pooled[c % pooled.len()].data);
    }
    Ok(FeatureMap {
        channels,
        height: h,
        width: w,
        data,
        camera: camera.scaled_down(FEATURE_SCALE)?,
    })
}

// ---------------------------------------------------------------------------
// Raw matching volume
// ---------------------------------------------------------------------------

/// Bilinear sample positions: clamp the base cell so `x in [0, n-1]` always
/// addresses valid texels (at the upper edge the fraction becomes 1).
#[inline]
fn bilinear_cell(x: f64, n: usize) -> (usize, f64) {
    let mut i = x.floor() as isize;
    if i > n as isize - 2 {
        i = n as isize - 2;
    }
    if i < 0 {
        i = 0;
    }
    (i as usize, x - i as f64)
}

/// Warp the source feature map onto every hypothesis plane of the reference
/// view and concatenate with the reference features: channels `[0, C)` hold
/// the reference map, `[C, 2C)` the warped source, with invalid samples set
/// to zero and masked out.
pub fn build_raw_matching_volume(
    reference: &FeatureMap,
    source: &FeatureMap,
    hyp: &DepthHypotheses,
) -> Result<FeatureVolume, VolumeError> {
    if reference.channels != source.channels
        || reference.width != source.width
        || reference.height != source.height
    {
        return Err(VolumeError::FeatureMismatch(
            "reference and source shapes differ".into(),
        ));
    }
    if reference.camera.intrinsics != source.camera.intrinsics {
        return Err(VolumeError::FeatureMismatch(
            "views must share intrinsics".into(),
        ));
    }
    let c = reference.channels;
    let (w, h, planes) = (reference.width, reference.height, hyp.count());
    let shape = VolumeShape {
        channels: 2 * c,
        planes,
        height: h,
        width: w,
    };
    let mut volume = ChannelVolume::zeros(shape);
    let mut mask = VoxelMask::zeros(planes, h, w);
    let rel = relative_pose(&reference.camera.pose, &source.camera.pose);
    let k = &reference.camera.intrinsics;
    let voxels = shape.voxels();
    let plane_area = h * w;

    // Parallel over hypothesis planes; each plane writes a disjoint slab of
    // every channel, gathered through raw pointers via chunked mask rows.
    let mut plane_outputs: Vec<(Vec<f32>, Vec<u8>)> = Vec::with_capacity(planes);
    (0..planes)
        .into_par_iter()
        .map(|d| {
            let z = hyp.value(d);
            let mut warped = vec![0.0f32; c * plane_area];
            let mut plane_mask = vec![0u8; plane_area];
            for v in 0..h {
                for u in 0..w {
                    let m = homography_map(u as f64, v as f64, z, k, &rel);
                    if !m.valid {
                        continue;
                    }
                    let (u0, fu) = bilinear_cell(m.u, w);
                    let (v0, fv) = bilinear_cell(m.v, h);
                    let w00 = ((1.0 - fu) * (1.0 - fv)) as f32;
                    let w10 = (fu * (1.0 - fv)) as f32;
                    let w01 = ((1.0 - fu) * fv) as f32;
                    let w11 = (fu * fv) as f32;
                    let base = v0 * w + u0;
                    let pix = v * w + u;
                    for ch in 0..c {
                        let slab = &source.data[ch * plane_area..(ch + 1) * plane_area];
                        let value = w00 * slab[base]
                            + w10 * slab[base + 1]
                            + w01 * slab[base + w]
                            + w11 * slab[base + w + 1];
                        warped[ch * plane_area + pix] = value;
                    }
                    plane_mask[pix] = 1;
                }
            }
            (warped, plane_mask)
        })
        .collect_into_vec(&mut plane_outputs);

    for (d, (warped, plane_mask)) in plane_outputs.into_iter().enumerate() {
        let plane_offset = d * plane_area;
        for ch in 0..c {
            // Reference half: the reference map broadcast over planes.
            volume.data[ch * voxels + plane_offset..ch * voxels + plane_offset + plane_area]
                .copy_from_slice(&reference.data[ch * plane_area..(ch + 1) * plane_area]);
            // Warped half.
            volume.data
                [(c + ch) * voxels + plane_offset..(c + ch) * voxels + plane_offset + plane_area]
                .copy_from_slice(&warped[ch * plane_area..(ch + 1) * plane_area]);
        }
        mask.data[plane_offset..plane_offset + plane_area].copy_from_slice(&plane_mask);
        // Zero the reference half where the warp is invalid so masked voxels
        // stay exactly zero in both halves.
        for pix in 0..plane_area {
            if plane_mask[pix] == 0 {
                for ch in 0..c {
                    volume.data[ch * voxels + plane_offset + pix] = 0.0;
                }
            }
        }
    }
    Ok(FeatureVolume { volume, mask })
}

// ---------------------------------------------------------------------------
// Aggregation and regularization
// ---------------------------------------------------------------------------

/// Separable box smoothing of radius 1 along columns, rows, and planes.
/// Windows are normalized over in-range, in-mask taps so masked voxels do not
/// dim their valid neighbors; masked voxels themselves stay untouched (zero).
/// Accumulation in f64 keeps constant fields exactly constant.
fn box_smooth_volume(volume: &mut ChannelVolume, mask: &VoxelMask) {
    let VolumeShape {
        channels,
        planes,
        height,
        width,
    } = volume.shape;
    let voxels = volume.shape.voxels();
    let smooth_line = |values: &mut Vec<f64>, valid: &[bool]| {
        let n = values.len();
        if n < 2 {
            return;
        }
        let snapshot = values.clone();
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            let mut acc = 0.0;
            let mut count = 0u32;
            for j in lo..=hi {
                if valid[j] {
                    acc += snapshot[j];
                    count += 1;
                }
            }
            values[i] = acc / count as f64;
        }
    };
    let mut line = Vec::new();
    let mut line_valid = Vec::new();
    for ch in 0..channels {
        let slab_start = ch * voxels;
        // Along u.
        for d in 0..planes {
            for v in 0..height {
                let row = (d * height + v) * width;
                line.clear();
                line_valid.clear();
                for u in 0..width {
                    line.push(volume.data[slab_start + row + u] as f64);
                    line_valid.push(mask.data[row + u] != 0);
                }
                smooth_line(&mut line, &line_valid);
                for (u, val) in line.iter().enumerate() {
                    volume.data[slab_start + row + u] = *val as f32;
                }
            }
        }
        // Along v.
        for d in 0..planes {
            for u in 0..width {
                line.clear();
                line_valid.clear();
                for v in 0..height {
                    let idx = (d * height + v) * width + u;
                    line.push(volume.data[slab_start + idx] as f64);
                    line_valid.push(mask.data[idx] != 0);
                }
                smooth_line(&mut line, &line_valid);
                for (v, val) in line.iter().enumerate() {
                    volume.data[slab_start + (d * height + v) * width + u] = *val as f32;
                }
            }
        }
        // Along d.
        for v in 0..height {
            for u in 0..width {
                line.clear();
                line_valid.clear();
                for d in 0..planes {
                    let idx = (d * height + v) * width + u;
                    line.push(volume.data[slab_start + idx] as f64);
                    line_valid.push(mask.data[idx] != 0);
                }
                smooth_line(&mut line, &line_valid);
                for (d, val) in line.iter().enumerate() {
                    volume.data[slab_start + (d * height + v) * width + u] = *val as f32;
                }
            }
        }
    }
}

/// Reduce each raw volume per voxel with `w_reduce`, average across views with
/// a mask-weighted mean, then box-smooth. Voxels invalid in every view stay
/// zero with mask zero. The per-channel view sum runs over value-sorted
/// addends, so the result is bitwise invariant under view permutations.
pub fn aggregate_and_regularize(
    raws: &[FeatureVolume],
    w_reduce: &LinearMap,
) -> Result<FeatureVolume, VolumeError> {
    let first = raws.first().ok_or(VolumeError::NoViews)?;
    let in_shape = first.volume.shape;
    if raws
        .iter()
        .any(|r| r.volume.shape != in_shape || !r.mask.same_shape(&first.mask))
    {
        return Err(VolumeError::ViewShapeMismatch);
    }
    if w_reduce.cols != in_shape.channels || w_reduce.rows * 2 != w_reduce.cols {
        return Err(VolumeError::BadReduction {
            rows: w_reduce.rows,
            cols: w_reduce.cols,
            expected_rows: in_shape.channels / 2,
            expected_cols: in_shape.channels,
        });
    }
    let out_channels = w_reduce.rows;
    let out_shape = VolumeShape {
        channels: out_channels,
        ..in_shape
    };
    let voxels = in_shape.voxels();
    let mut volume = ChannelVolume::zeros(out_shape);
    let mut mask = VoxelMask::zeros(in_shape.planes, in_shape.height, in_shape.width);

    let n_views = raws.len();
    let reduced: Vec<Vec<f32>> = raws
        .par_iter()
        .map(|raw| {
            let mut out = vec![0.0f32; out_channels * voxels];
            let mut input = vec![0.0f32; in_shape.channels];
            let mut result = vec![0.0f32; out_channels];
            for voxel in 0..voxels {
                if raw.mask.data[voxel] == 0 {
                    continue;
                }
                raw.volume.read_voxel(voxel, &mut input);
                w_reduce.apply(&input, &mut result);
                for (c, val) in result.iter().enumerate() {
                    out[c * voxels + voxel] = *val;
                }
            }
            out
        })
        .collect();

    let mut addends: Vec<f32> = Vec::with_capacity(n_views);
    for voxel in 0..voxels {
        let count = raws.iter().filter(|r| r.mask.data[voxel] != 0).count();
        if count == 0 {
            continue;
        }
        mask.data[voxel] = 1;
        for c in 0..out_channels {
            addends.clear();
            for (view, raw) in raws.iter().enumerate() {
                if raw.mask.data[voxel] != 0 {
                    addends.push(reduced[view][c * voxels + voxel]);
                }
            }
            addends.sort_by(f32::total_cmp);
            let sum: f64 = addends.iter().map(|x| *x as f64).sum();
            volume.data[c * voxels + voxel] = (sum / count as f64) as f32;
        }
    }

    box_smooth_volume(&mut volume, &mask);
    Ok(FeatureVolume { volume, mask })
}

// ---------------------------------------------------------------------------
// Context channel and hybrid volume
// ---------------------------------------------------------------------------

/// Multi-scale context descriptor at quarter resolution: intensity, a box
/// pyramid (radii 1, 2, 4), and both gradients.
fn context_descriptor(image: &Image) -> Vec<Image> {
    let maps = [
        image.clone(),
        box_filter(image, 1),
        box_filter(image, 2),
        box_filter(image, 4),
        gradient_x(image),
        gradient_y(image),
    ];
    maps.iter().map(avg_pool4).collect()
}

/// Project the context descriptor to one channel per plane and concatenate it
/// onto the matching volume, giving `C+1` channels. The context value at voxel
/// (d, v, u) is descriptor channel d evaluated at (v, u).
pub fn context_and_fuse(
    image: &Image,
    matching: &FeatureVolume,
    projection: &LinearMap,
    camera: &Camera,
) -> Result<HybridVolume, VolumeError> {
    let shape = matching.volume.shape;
    if image.width != shape.width * FEATURE_SCALE || image.height != shape.height * FEATURE_SCALE {
        return Err(VolumeError::GridMismatch {
            iw: image.width,
            ih: image.height,
            vw: shape.width,
            vh: shape.height,
        });
    }
    if projection.rows != shape.planes || projection.cols != CONTEXT_DESCRIPTOR_CHANNELS {
        return Err(VolumeError::BadContextProjection {
            expected: shape.planes,
            got: projection.rows,
        });
    }
    let descriptor = context_descriptor(image);
    let voxels = shape.voxels();
    let plane_area = shape.height * shape.width;
    let out_shape = VolumeShape {
        channels: shape.channels + 1,
        ..shape
    };
    let mut volume = ChannelVolume::zeros(out_shape);
    volume.data[..shape.channels * voxels].copy_from_slice(&matching.volume.data);
    let context = &mut volume.data[shape.channels * voxels..];
    let mut desc = vec![0.0f32; CONTEXT_DESCRIPTOR_CHANNELS];
    let mut projected = vec![0.0f32; shape.planes];
    for pix in 0..plane_area {
        for (k, map) in descriptor.iter().enumerate() {
            desc[k] = map.data[pix];
        }
        projection.apply(&desc, &mut projected);
        for (d, val) in projected.iter().enumerate() {
            context[d * plane_area + pix] = *val;
        }
    }
    Ok(HybridVolume {
        volume,
        mask: matching.mask.clone(),
        camera: camera.scaled_down(FEATURE_SCALE)?,
    })
}
