//! Epipolar spatio-temporal attention over volume memories.
//!
//! Hybrid volumes are squeezed into key/value pairs by fixed pointwise maps,
//! memories are resampled into the query frustum along epipolar geometry,
//! and a per-voxel softmax over memories retrieves values that are fused with
//! the query value, either by concatenation or by the adaptive reliability
//! blend `w⊙y + (1-w)⊙g(v_q, r⊙y)`.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{epipolar_voxel_map, relative_pose, Camera, DepthHypotheses};
use crate::grid::{ChannelVolume, VolumeShape, VoxelMask};
use crate::params::LinearMap;
use crate::volume::HybridVolume;

/// Interpolated mask weight below which a warped voxel is considered invalid.
const MASK_INTERP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EstError {
    #[error("encoder is {rows}x{cols}, expected output of {expected_out} from {expected_in} channels")]
    BadEncoder {
        rows: usize,
        cols: usize,
        expected_out: usize,
        expected_in: usize,
    },
    #[error("key/value grids disagree in shape")]
    ShapeMismatch,
    #[error("memory list is empty")]
    NoMemories,
    #[error("memories and query must share intrinsics and hypothesis count")]
    FrameMismatch,
    #[error("attention volume has {got} memories, expected {expected}")]
    MemoryCountMismatch { expected: usize, got: usize },
    #[error("fusion parameter volumes must have one value per voxel ({expected}), got {got}")]
    BadFusionVolume { expected: usize, got: usize },
    #[error("fusion map is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    BadFusionMap {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
}

/// Squeezed key/value encoding of a hybrid volume.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyValuePair {
    pub key: ChannelVolume,
    pub value: ChannelVolume,
    pub mask: VoxelMask,
    pub camera: Camera,
}

/// Per-voxel attention weights over N memories: nonnegative, summing to one
/// over the valid memories of each voxel, zero where a memory is invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionVolume {
    pub memories: usize,
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    /// Layout `[memory][plane][row][column]`.
    pub weights: Vec<f32>,
}

impl AttentionVolume {
    pub fn voxels(&self) -> usize {
        self.planes * self.height * self.width
    }

    #[inline]
    pub fn get(&self, memory: usize, d: usize, v: usize, u: usize) -> f32 {
        self.weights[memory * self.voxels() + (d * self.height + v) * self.width + u]
    }
}

/// Reliability volumes and fusion map for the adaptive blend. The raw volumes
/// are logistic-squashed to (0, 1) before use.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_raw: Vec<f32>,
    pub r_raw: Vec<f32>,
    pub g: LinearMap,
}

impl FusionParams {
    /// Neutral parameters: w = r = 0.5 with the given fusion map.
    pub fn neutral(voxels: usize, g: LinearMap) -> Self {
        Self {
            w_raw: vec![0.0; voxels],
            r_raw: vec![0.0; voxels],
            g,
        }
    }
}

/// Apply the key and value encoders per voxel. Masked voxels stay exactly
/// zero in both outputs.
pub fn encode_key_value(
    hybrid: &HybridVolume,
    p_k: &LinearMap,
    p_v: &LinearMap,
) -> Result<KeyValuePair, EstError> {
    let in_channels = hybrid.volume.shape.channels;
    for encoder in [p_k, p_v] {
        if encoder.cols != in_channels || encoder.rows != p_k.rows {
            return Err(EstError::BadEncoder {
                rows: encoder.rows,
                cols: encoder.cols,
                expected_out: p_k.rows,
                expected_in: in_channels,
            });
        }
    }
    let out_shape = VolumeShape {
        channels: p_k.rows,
        ..hybrid.volume.shape
    };
    let voxels = out_shape.voxels();
    let mut key = ChannelVolume::zeros(out_shape);
    let mut value = ChannelVolume::zeros(out_shape);
    let mut input = vec![0.0f32; in_channels];
    let mut out = vec![0.0f32; out_shape.channels];
    for voxel in 0..voxels {
        if hybrid.mask.data[voxel] == 0 {
            continue;
        }
        hybrid.volume.read_voxel(voxel, &mut input);
        p_k.apply(&input, &mut out);
        for (c, val) in out.iter().enumerate() {
            key.data[c * voxels + voxel] = *val;
        }
        p_v.apply(&input, &mut out);
        for (c, val) in out.iter().enumerate() {
            value.data[c * voxels + voxel] = *val;
        }
    }
    Ok(KeyValuePair {
        key,
        value,
        mask: hybrid.mask.clone(),
        camera: hybrid.camera,
    })
}

#[inline]
fn trilinear_cell(x: f64, n: usize) -> (usize, f64) {
    let mut i = x.floor() as isize;
    if i > n as isize - 2 {
        i = n as isize - 2;
    }
    if i < 0 {
        i = 0;
    }
    (i as usize, x - i as f64)
}

/// Resample a memory key/value pair into the query camera's frustum.
///
/// Each query voxel maps through the epipolar voxel mapping and samples the
/// memory trilinearly. A warped voxel is valid only when the mapping lands in
/// the frustum and the interpolated memory mask is (numerically) one, so no
/// partially-invalid neighborhood leaks data; invalid voxels are zeroed.
pub fn epipolar_warp_kv(
    memory: &KeyValuePair,
    query_camera: &Camera,
    hyp: &DepthHypotheses,
) -> Result<KeyValuePair, EstError> {
    if memory.camera.intrinsics != query_camera.intrinsics
        || memory.key.shape.planes != hyp.count()
    {
        return Err(EstError::FrameMismatch);
    }
    let shape = memory.key.shape;
    let (planes, h, w) = (shape.planes, shape.height, shape.width);
    let voxels = shape.voxels();
    let plane_area = h * w;
    let channels = shape.channels;
    let rel = relative_pose(&query_camera.pose, &memory.camera.pose);
    let k = &query_camera.intrinsics;

    let mut plane_outputs: Vec<(Vec<f32>, Vec<f32>, Vec<u8>)> = Vec::with_capacity(planes);
    (0..planes)
        .into_par_iter()
        .map(|d| {
            let mut key_out = vec![0.0f32; channels * plane_area];
            let mut value_out = vec![0.0f32; channels * plane_area];
            let mut mask_out = vec![0u8; plane_area];
            for v in 0..h {
                for u in 0..w {
                    let m = epipolar_voxel_map(u as f64, v as f64, d as f64, hyp, k, &rel);
                    if !m.valid {
                        continue;
                    }
                    let (u0, fu) = trilinear_cell(m.u, w);
                    let (v0, fv) = trilinear_cell(m.v, h);
                    let (d0, fd) = trilinear_cell(m.d, planes);
                    let corner = |dd: usize, dv: usize, du: usize| {
                        ((d0 + dd) * h + v0 + dv) * w + u0 + du
                    };
                    let mut weights = [0.0f64; 8];
                    let mut corners = [0usize; 8];
                    let mut idx = 0;
                    for (dd, wd) in [(0, 1.0 - fd), (1, fd)] {
                        for (dv, wv) in [(0, 1.0 - fv), (1, fv)] {
                            for (du, wu) in [(0, 1.0 - fu), (1, fu)] {
                                weights[idx] = wd * wv * wu;
                                corners[idx] = corner(dd, dv, du);
                                idx += 1;
                            }
                        }
                    }
                    let mask_interp: f64 = weights
                        .iter()
                        .zip(corners.iter())
                        .map(|(w8, i)| w8 * memory.mask.data[*i] as f64)
                        .sum();
                    if mask_interp < 1.0 - MASK_INTERP_TOLERANCE {
                        continue;
                    }
                    let pix = v * w + u;
                    for c in 0..channels {
                        let key_slab = &memory.key.data[c * voxels..(c + 1) * voxels];
                        let value_slab = &memory.value.data[c * voxels..(c + 1) * voxels];
                        let mut key_acc = 0.0f64;
                        let mut value_acc = 0.0f64;
                        for (w8, i) in weights.iter().zip(corners.iter()) {
                            key_acc += w8 * key_slab[*i] as f64;
                            value_acc += w8 * value_slab[*i] as f64;
                        }
                        key_out[c * plane_area + pix] = key_acc as f32;
                        value_out[c * plane_area + pix] = value_acc as f32;
                    }
                    mask_out[pix] = 1;
                }
            }
            (key_out, value_out, mask_out)
        })
        .collect_into_vec(&mut plane_outputs);

    let mut key = ChannelVolume::zeros(shape);
    let mut value = ChannelVolume::zeros(shape);
    let mut mask = VoxelMask::zeros(planes, h, w);
    for (d, (key_out, value_out, mask_out)) in plane_outputs.into_iter().enumerate() {
        let offset = d * plane_area;
        for c in 0..channels {
            key.data[c * voxels + offset..c * voxels + offset + plane_area]
                .copy_from_slice(&key_out[c * plane_area..(c + 1) * plane_area]);
            value.data[c * voxels + offset..c * voxels + offset + plane_area]
                .copy_from_slice(&value_out[c * plane_area..(c + 1) * plane_area]);
        }
        mask.data[offset..offset + plane_area].copy_from_slice(&mask_out);
    }
    Ok(KeyValuePair {
        key,
        value,
        mask,
        camera: *query_camera,
    })
}

/// Per-voxel softmax over memory key correlations, with max subtraction,
/// restricted to memories valid at that voxel. Voxels with no valid memory
/// get all-zero weights.
pub fn attention(
    query: &KeyValuePair,
    warped: &[KeyValuePair],
) -> Result<AttentionVolume, EstError> {
    if warped.is_empty() {
        return Err(EstError::NoMemories);
    }
    let shape = query.key.shape;
    if warped.iter().any(|m| m.key.shape != shape) {
        return Err(EstError::ShapeMismatch);
    }
    let n = warped.len();
    let voxels = shape.voxels();
    let channels = shape.channels;
    let mut weights = vec![0.0f32; n * voxels];
    let mut logits = vec![0.0f64; n];
    for voxel in 0..voxels {
        let mut any_valid = false;
        let mut max_logit = f64::NEG_INFINITY;
        for (i, memory) in warped.iter().enumerate() {
            if memory.mask.data[voxel] == 0 {
                continue;
            }
            let mut dot = 0.0f64;
            for c in 0..channels {
                dot += query.key.data[c * voxels + voxel] as f64
                    * memory.key.data[c * voxels + voxel] as f64;
            }
            logits[i] = dot;
            max_logit = max_logit.max(dot);
            any_valid = true;
        }
        if !any_valid {
            continue;
        }
        let mut total = 0.0f64;
        for (i, memory) in warped.iter().enumerate() {
            if memory.mask.data[voxel] != 0 {
                total += (logits[i] - max_logit).exp();
            }
        }
        for (i, memory) in warped.iter().enumerate() {
            if memory.mask.data[voxel] != 0 {
                weights[i * voxels + voxel] = ((logits[i] - max_logit).exp() / total) as f32;
            }
        }
    }
    Ok(AttentionVolume {
        memories: n,
        planes: shape.planes,
        height: shape.height,
        width: shape.width,
        weights,
    })
}

/// Attention-weighted sum of the warped memory values, accumulated in memory
/// order.
pub fn retrieve(
    att: &AttentionVolume,
    warped: &[KeyValuePair],
) -> Result<ChannelVolume, EstError> {
    if warped.len() != att.memories {
        return Err(EstError::MemoryCountMismatch {
            expected: att.memories,
            got: warped.len(),
        });
    }
    let shape = warped
        .first()
        .ok_or(EstError::NoMemories)?
        .value
        .shape;
    if warped.iter().any(|m| m.value.shape != shape) {
        return Err(EstError::ShapeMismatch);
    }
    let voxels = shape.voxels();
    let mut out = ChannelVolume::zeros(shape);
    for c in 0..shape.channels {
        for voxel in 0..voxels {
            let mut acc = 0.0f64;
            for (i, memory) in warped.iter().enumerate() {
                acc += att.weights[i * voxels + voxel] as f64
                    * memory.value.data[c * voxels + voxel] as f64;
            }
            out.data[c * voxels + voxel] = acc as f32;
        }
    }
    Ok(out)
}

/// Concatenation fusion: `[v_q ; y]`.
pub fn fuse_concat(
    value: &ChannelVolume,
    retrieved: &ChannelVolume,
) -> Result<ChannelVolume, EstError> {
    if value.shape.planes != retrieved.shape.planes
        || value.shape.height != retrieved.shape.height
        || value.shape.width != retrieved.shape.width
    {
        return Err(EstError::ShapeMismatch);
    }
    let shape = VolumeShape {
        channels: value.shape.channels + retrieved.shape.channels,
        ..value.shape
    };
    let mut out = ChannelVolume::zeros(shape);
    out.data[..value.data.len()].copy_from_slice(&value.data);
    out.data[value.data.len()..].copy_from_slice(&retrieved.data);
    Ok(out)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adaptive fusion `w⊙y + (1-w)⊙g([v_q ; r⊙y])` with w, r the
/// logistic-squashed reliability volumes broadcast over channels.
pub fn fuse_adaptive(
    value: &ChannelVolume,
    retrieved: &ChannelVolume,
    params: &FusionParams,
) -> Result<ChannelVolume, EstError> {
    if value.shape != retrieved.shape {
        return Err(EstError::ShapeMismatch);
    }
    let channels = value.shape.channels;
    let voxels = value.shape.voxels();
    if params.w_raw.len() != voxels || params.r_raw.len() != voxels {
        return Err(EstError::BadFusionVolume {
            expected: voxels,
            got: params.w_raw.len(),
        });
    }
    if params.g.rows != channels || params.g.cols != 2 * channels {
        return Err(EstError::BadFusionMap {
            rows: params.g.rows,
            cols: params.g.cols,
            expected_rows: channels,
            expected_cols: 2 * channels,
        });
    }
    let mut out = ChannelVolume::zeros(value.shape);
    let mut stacked = vec![0.0f32; 2 * channels];
    let mut blended = vec![0.0f32; channels];
    for voxel in 0..voxels {
        let w = sigmoid(params.w_raw[voxel] as f64);
        let r = sigmoid(params.r_raw[voxel] as f64);
        for c in 0..channels {
            stacked[c] = value.data[c * voxels + voxel];
            stacked[channels + c] = (r * retrieved.data[c * voxels + voxel] as f64) as f32;
        }
        params.g.apply(&stacked, &mut blended);
        for c in 0..channels {
            let y = retrieved.data[c * voxels + voxel] as f64;
            out.data[c * voxels + voxel] = (w * y + (1.0 - w) * blended[c] as f64) as f32;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Double-precision attention/retrieval kernel with analytic gradients
// ---------------------------------------------------------------------------

/// Small double-precision attention instance used for gradient verification.
/// Layout of every grid is `[channel][voxel]` flattened.
#[derive(Debug, Clone)]
pub struct AttentionInstance {
    pub memories: usize,
    pub channels: usize,
    pub voxels: usize,
    pub query_key: Vec<f64>,
    pub memory_keys: Vec<Vec<f64>>,
    pub memory_values: Vec<Vec<f64>>,
    pub masks: Vec<Vec<u8>>,
}

/// Gradients of `<upstream, y>` with respect to the instance inputs.
#[derive(Debug, Clone)]
pub struct AttentionGradients {
    pub query_key: Vec<f64>,
    pub memory_keys: Vec<Vec<f64>>,
    pub memory_values: Vec<Vec<f64>>,
}

fn instance_weights(inst: &AttentionInstance, voxel: usize) -> Vec<f64> {
    let mut logits = vec![f64::NEG_INFINITY; inst.memories];
    let mut max_logit = f64::NEG_INFINITY;
    for i in 0..inst.memories {
        if inst.masks[i][voxel] == 0 {
            continue;
        }
        let mut dot = 0.0;
        for c in 0..inst.channels {
            dot += inst.query_key[c * inst.voxels + voxel]
                * inst.memory_keys[i][c * inst.voxels + voxel];
        }
        logits[i] = dot;
        max_logit = max_logit.max(dot);
    }
    let mut weights = vec![0.0; inst.memories];
    if max_logit == f64::NEG_INFINITY {
        return weights;
    }
    let mut total = 0.0;
    for (i, logit) in logits.iter().enumerate() {
        if inst.masks[i][voxel] != 0 {
            weights[i] = (logit - max_logit).exp();
            total += weights[i];
        }
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    weights
}

/// Forward pass: softmax attention over memories followed by value retrieval.
pub fn attention_retrieve(inst: &AttentionInstance) -> Vec<f64> {
    let mut out = vec![0.0; inst.channels * inst.voxels];
    for voxel in 0..inst.voxels {
        let weights = instance_weights(inst, voxel);
        for c in 0..inst.channels {
            let mut acc = 0.0;
            for i in 0..inst.memories {
                acc += weights[i] * inst.memory_values[i][c * inst.voxels + voxel];
            }
            out[c * inst.voxels + voxel] = acc;
        }
    }
    out
}

/// Analytic gradients of `sum(upstream ⊙ attention_retrieve(inst))` through
/// the softmax Jacobian and the weighted sum.
pub fn grad_attention_retrieve(
    inst: &AttentionInstance,
    upstream: &[f64],
) -> AttentionGradients {
    let mut grads = AttentionGradients {
        query_key: vec![0.0; inst.channels * inst.voxels],
        memory_keys: vec![vec![0.0; inst.channels * inst.voxels]; inst.memories],
        memory_values: vec![vec![0.0; inst.channels * inst.voxels]; inst.memories],
    };
    for voxel in 0..inst.voxels {
        let weights = instance_weights(inst, voxel);
        // s_i = <upstream, v_i> at this voxel; d y / d x_i.
        let mut value_dots = vec![0.0; inst.memories];
        for i in 0..inst.memories {
            for c in 0..inst.channels {
                let g = upstream[c * inst.voxels + voxel];
                value_dots[i] += g * inst.memory_values[i][c * inst.voxels + voxel];
                grads.memory_values[i][c * inst.voxels + voxel] = weights[i] * g;
            }
        }
        let weighted_mean: f64 = (0..inst.memories).map(|i| weights[i] * value_dots[i]).sum();
        for i in 0..inst.memories {
            if inst.masks[i][voxel] == 0 {
                continue;
            }
            // dL/d logit_i through the softmax Jacobian.
            let dlogit = weights[i] * (value_dots[i] - weighted_mean);
            for c in 0..inst.channels {
                grads.query_key[c * inst.voxels + voxel] +=
                    dlogit * inst.memory_keys[i][c * inst.voxels + voxel];
                grads.memory_keys[i][c * inst.voxels + voxel] +=
                    dlogit * inst.query_key[c * inst.voxels + voxel];
            }
        }
    }
    grads
}
