//! Probability volumes, soft-argmax depth regression, fixed two-stage
//! upsampling, and the multi-view training loss.
//!
//! The learned score head is replaced by a deterministic one: per-voxel
//! channel energy (a positive reduction of the squared channels), normalized
//! per pixel across planes and negated, so that planes where the matching
//! channels vanish score highest. The refinement stages are bilinear x2
//! upsampling followed by joint-bilateral smoothing against the grayscale
//! guide image.

use thiserror::Error;

use crate::geometry::DepthHypotheses;
use crate::grid::{ChannelVolume, Image, VoxelMask};

/// Guard against division by zero in the per-pixel score normalization.
const SCORE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("score weights have {got} entries, expected one per channel ({expected})")]
    BadScoreWeights { expected: usize, got: usize },
    #[error("mask shape does not match the volume")]
    MaskMismatch,
    #[error("depth map {got_w}x{got_h} does not match expected {want_w}x{want_h}")]
    SizeMismatch {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("no valid pixels in loss term (stage {stage}, view {view})")]
    EmptyLossTerm { stage: usize, view: usize },
    #[error("loss needs at least one predicted stage")]
    NoStages,
    #[error("lambda must be in (0, 1], got {0}")]
    BadLambda(f64),
}

/// Per-voxel scores over depth planes; `NEG_INFINITY` marks masked voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Softmax of the scores over the plane dimension. Pixels with no valid plane
/// fall back to a uniform distribution and are flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub pixel_valid: Vec<u8>,
}

/// Depth map at one pyramid stage (0, 1 quarter res; 2 half; 3 full).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub stage: u8,
    pub data: Vec<f32>,
    pub mask: Vec<u8>,
}

impl DepthMap {
    pub fn constant(width: usize, height: usize, stage: u8, value: f32) -> Self {
        Self {
            width,
            height,
            stage,
            data: vec![value; width * height],
            mask: vec![1; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }
}

/// Outer half width of the plane window used for local contrast
/// normalization, and the inner guard band excluded around the plane itself
/// so a match trough is not normalized against its own low energies.
const SCORE_WINDOW_RADIUS: usize = 6;
const SCORE_WINDOW_GUARD: usize = 2;

/// Additive regularization of the contrast ratio, as a fraction of the
/// pixel's mean energy.
const SCORE_REGULARIZER: f64 = 0.05;

/// Deterministic score head replacing the learned score layers.
///
/// Per voxel, the weighted energy of the squared channels is box-averaged
/// along the plane axis (radius 1, mask-aware) so isolated per-channel
/// cancellations cannot fake a match, then scored by local contrast:
///
/// `score_d = -gain * (q_d + a) / (W_d + a)`
///
/// with `W_d` the windowed mean energy around plane d and `a` a small
/// fraction of the pixel's global mean energy. A low point among energetic
/// neighbors (a feature match) scores near zero; a low point inside a low
/// window (a textureless stretch of the sweep) scores near `-gain` like any
/// mismatch, and a fully textureless pixel degenerates to a uniform
/// distribution. Masked voxels score negative infinity so the softmax
/// ignores them.
pub fn match_scores(
    volume: &ChannelVolume,
    mask: &VoxelMask,
    weights: &[f32],
    gain: f32,
) -> Result<ScoreVolume, DepthError> {
    let shape = volume.shape;
    if weights.len() != shape.channels {
        return Err(DepthError::BadScoreWeights {
            expected: shape.channels,
            got: weights.len(),
        });
    }
    if mask.planes != shape.planes || mask.height != shape.height || mask.width != shape.width {
        return Err(DepthError::MaskMismatch);
    }
    let voxels = shape.voxels();
    let plane_area = shape.height * shape.width;
    let mut energy = vec![0.0f64; voxels];
    for c in 0..shape.channels {
        let w = weights[c] as f64;
        let slab = &volume.data[c * voxels..(c + 1) * voxels];
        for (e, x) in energy.iter_mut().zip(slab.iter()) {
            let xv = *x as f64;
            *e += w * xv * xv;
        }
    }
    let mut data = vec![f32::NEG_INFINITY; voxels];
    let mut smoothed = vec![0.0f64; shape.planes];
    let mut valid = vec![false; shape.planes];
    for pix in 0..plane_area {
        // Mask-aware box average of the energy along d, radius 1.
        let mut total = 0.0f64;
        let mut count = 0usize;
        for d in 0..shape.planes {
            valid[d] = mask.data[d * plane_area + pix] != 0;
            if !valid[d] {
                smoothed[d] = 0.0;
                continue;
            }
            let lo = d.saturating_sub(1);
            let hi = (d + 1).min(shape.planes - 1);
            let mut acc = 0.0f64;
            let mut n = 0usize;
            for j in lo..=hi {
                let voxel = j * plane_area + pix;
                if mask.data[voxel] != 0 {
                    acc += energy[voxel];
                    n += 1;
                }
            }
            smoothed[d] = acc / n as f64;
            total += smoothed[d];
            count += 1;
        }
        if count == 0 {
            continue;
        }
        let regularizer = SCORE_REGULARIZER * total / count as f64 + SCORE_EPSILON;
        for d in 0..shape.planes {
            if !valid[d] {
                continue;
            }
            let lo = d.saturating_sub(SCORE_WINDOW_RADIUS);
            let hi = (d + SCORE_WINDOW_RADIUS).min(shape.planes - 1);
            let mut window = 0.0f64;
            let mut n = 0usize;
            for j in lo..=hi {
                if valid[j] && j.abs_diff(d) >= SCORE_WINDOW_GUARD {
                    window += smoothed[j];
                    n += 1;
                }
            }
            let reference = if n > 0 {
                window / n as f64
            } else {
                smoothed[d]
            };
            let contrast = (smoothed[d] + regularizer) / (reference + regularizer);
            data[d * plane_area + pix] = (-(gain as f64) * contrast) as f32;
        }
    }
    Ok(ScoreVolume {
        planes: shape.planes,
        height: shape.height,
        width: shape.width,
        data,
    })
}

/// Softmax over the plane dimension with per-pixel max subtraction,
/// normalized in f64.
pub fn probability_volume(scores: &ScoreVolume) -> ProbabilityVolume {
    let plane_area = scores.height * scores.width;
    let planes = scores.planes;
    let mut data = vec![0.0f32; planes * plane_area];
    let mut pixel_valid = vec![0u8; plane_area];
    for pix in 0..plane_area {
        let mut max_score = f64::NEG_INFINITY;
        for d in 0..planes {
            max_score = max_score.max(scores.data[d * plane_area + pix] as f64);
        }
        if max_score == f64::NEG_INFINITY {
            // No valid plane: uniform fallback, pixel flagged invalid.
            let uniform = 1.0 / planes as f32;
            for d in 0..planes {
                data[d * plane_area + pix] = uniform;
            }
            continue;
        }
        pixel_valid[pix] = 1;
        let mut total = 0.0f64;
        for d in 0..planes {
            let s = scores.data[d * plane_area + pix] as f64;
            total += (s - max_score).exp();
        }
        for d in 0..planes {
            let s = scores.data[d * plane_area + pix] as f64;
            data[d * plane_area + pix] = ((s - max_score).exp() / total) as f32;
        }
    }
    ProbabilityVolume {
        planes,
        height: scores.height,
        width: scores.width,
        data,
        pixel_valid,
    }
}

/// Expected depth under the per-pixel plane distribution.
pub fn soft_argmax(p: &ProbabilityVolume, hyp: &DepthHypotheses, stage: u8) -> DepthMap {
    let plane_area = p.height * p.width;
    let mut data = vec![0.0f32; plane_area];
    for pix in 0..plane_area {
        let mut acc = 0.0f64;
        for d in 0..p.planes {
            acc += hyp.value(d) * p.data[d * plane_area + pix] as f64;
        }
        // A convex combination stays in range up to rounding; clamp anyway.
        data[pix] = acc.clamp(hyp.z_min(), hyp.z_max()) as f32;
    }
    DepthMap {
        width: p.width,
        height: p.height,
        stage,
        data,
        mask: p.pixel_valid.clone(),
    }
}

fn bilinear_up2(depth: &DepthMap, stage: u8) -> DepthMap {
    let (w, h) = (depth.width * 2, depth.height * 2);
    let mut data = vec![0.0f32; w * h];
    let mut mask = vec![0u8; w * h];
    let cell = |x: f64, n: usize| {
        let mut i = x.floor() as isize;
        if i > n as isize - 2 {
            i = n as isize - 2;
        }
        if i < 0 {
            i = 0;
        }
        (i as usize, x - i as f64)
    };
    for v in 0..h {
        for u in 0..w {
            let (u0, fu) = cell(u as f64 / 2.0, depth.width);
            let (v0, fv) = cell(v as f64 / 2.0, depth.height);
            let d00 = depth.get(u0, v0) as f64;
            let d10 = depth.get(u0 + 1, v0) as f64;
            let d01 = depth.get(u0, v0 + 1) as f64;
            let d11 = depth.get(u0 + 1, v0 + 1) as f64;
            data[v * w + u] =
                ((1.0 - fv) * ((1.0 - fu) * d00 + fu * d10) + fv * ((1.0 - fu) * d01 + fu * d11))
                    as f32;
            mask[v * w + u] = depth.mask[(v / 2) * depth.width + u / 2];
        }
    }
    DepthMap {
        width: w,
        height: h,
        stage,
        data,
        mask,
    }
}

/// Box-downsample the guide image by an integer factor.
fn downsample_guide(guide: &Image, factor: usize) -> Image {
    if factor == 1 {
        return guide.clone();
    }
    let (w, h) = (guide.width / factor, guide.height / factor);
    let mut out = Image::zeros(w, h);
    for v in 0..h {
        for u in 0..w {
            let mut acc = 0.0f64;
            for dv in 0..factor {
                for du in 0..factor {
                    acc += guide.get(u * factor + du, v * factor + dv) as f64;
                }
            }
            out.set(u, v, (acc / (factor * factor) as f64) as f32);
        }
    }
    out
}

/// Joint bilateral smoothing of a depth map guided by image intensities.
fn guided_smooth(depth: &DepthMap, guide: &Image) -> DepthMap {
    const RADIUS: isize = 2;
    const SIGMA_SPATIAL: f64 = 1.2;
    const SIGMA_RANGE: f64 = 0.1;
    debug_assert_eq!(depth.width, guide.width);
    debug_assert_eq!(depth.height, guide.height);
    let inv_2ss = 1.0 / (2.0 * SIGMA_SPATIAL * SIGMA_SPATIAL);
    let inv_2sr = 1.0 / (2.0 * SIGMA_RANGE * SIGMA_RANGE);
    let mut out = depth.clone();
    for v in 0..depth.height as isize {
        for u in 0..depth.width as isize {
            let center = guide.get(u as usize, v as usize) as f64;
            let mut acc = 0.0f64;
            let mut total = 0.0f64;
            for dv in -RADIUS..=RADIUS {
                for du in -RADIUS..=RADIUS {
                    let (uu, vv) = (u + du, v + dv);
                    if uu < 0
                        || vv < 0
                        || uu >= depth.width as isize
                        || vv >= depth.height as isize
                    {
                        continue;
                    }
                    let (uu, vv) = (uu as usize, vv as usize);
                    if depth.mask[vv * depth.width + uu] == 0 {
                        continue;
                    }
                    let spatial = (du * du + dv * dv) as f64;
                    let range = guide.get(uu, vv) as f64 - center;
                    let weight = (-spatial * inv_2ss - range * range * inv_2sr).exp();
                    acc += weight * depth.get(uu, vv) as f64;
                    total += weight;
                }
            }
            if total > 0.0 {
                out.data[v as usize * depth.width + u as usize] = (acc / total) as f32;
            }
        }
    }
    out
}

/// Two-stage fixed refinement: bilinear x2 then edge-aware guided smoothing,
/// twice, producing the half- and full-resolution maps clamped to the
/// hypothesis range.
pub fn upsample_refine(
    depth: &DepthMap,
    guide: &Image,
    hyp: &DepthHypotheses,
) -> Result<(DepthMap, DepthMap), DepthError> {
    if guide.width != depth.width * 4 || guide.height != depth.height * 4 {
        return Err(DepthError::SizeMismatch {
            want_w: depth.width * 4,
            want_h: depth.height * 4,
            got_w: guide.width,
            got_h: guide.height,
        });
    }
    let clamp = |map: &mut DepthMap| {
        for value in map.data.iter_mut() {
            *value = value.clamp(hyp.z_min() as f32, hyp.z_max() as f32);
        }
    };
    let guide_half = downsample_guide(guide, 2);
    let mut half = guided_smooth(&bilinear_up2(depth, 2), &guide_half);
    clamp(&mut half);
    let mut full = guided_smooth(&bilinear_up2(&half, 3), guide);
    clamp(&mut full);
    Ok((half, full))
}

/// Direction of the stage weighting in the multi-view loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaExponent {
    /// Weight stage s by lambda^(s-3): coarse stages count more.
    CoarseHeavy,
    /// Weight stage s by lambda^(3-s): fine stages count more.
    FineHeavy,
}

/// Predictions for one target view, indexed by stage; absent stages are
/// skipped.
pub type StagePredictions = [Option<DepthMap>; 4];

/// Mean-per-valid-pixel L1 against the ground truth per (stage, view),
/// stage-weighted by lambda and averaged over views:
/// `loss = (1/N) * sum_s sum_i weight(s) * mean|D_s^i - gt_s^i|`.
///
/// Ground truth is resized per stage by nearest-neighbor sampling; pixels with
/// invalid (zero) ground truth are masked out.
pub fn multiview_loss(
    predictions: &[StagePredictions],
    ground_truth: &[DepthMap],
    lambda: f64,
    exponent: LambdaExponent,
) -> Result<f64, DepthError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(DepthError::BadLambda(lambda));
    }
    let views = predictions.len();
    assert_eq!(views, ground_truth.len(), "one ground truth per view");
    let mut total = 0.0f64;
    let mut any_stage = false;
    for (view, (stages, gt)) in predictions.iter().zip(ground_truth.iter()).enumerate() {
        for (stage, pred) in stages.iter().enumerate() {
            let Some(pred) = pred else { continue };
            any_stage = true;
            let factor = gt.width / pred.width;
            if pred.width * factor != gt.width || pred.height * factor != gt.height {
                return Err(DepthError::SizeMismatch {
                    want_w: gt.width,
                    want_h: gt.height,
                    got_w: pred.width * factor,
                    got_h: pred.height * factor,
                });
            }
            let mut acc = 0.0f64;
            let mut count = 0usize;
            for v in 0..pred.height {
                for u in 0..pred.width {
                    let gt_value = gt.get(u * factor, v * factor);
                    let gt_valid = gt.mask[v * factor * gt.width + u * factor] != 0
                        && gt_value > 0.0;
                    if !gt_valid || pred.mask[v * pred.width + u] == 0 {
                        continue;
                    }
                    acc += (pred.get(u, v) as f64 - gt_value as f64).abs();
                    count += 1;
                }
            }
            if count == 0 {
                return Err(DepthError::EmptyLossTerm { stage, view });
            }
            let weight = match exponent {
                LambdaExponent::CoarseHeavy => lambda.powi(stage as i32 - 3),
                LambdaExponent::FineHeavy => lambda.powi(3 - stage as i32),
            };
            total += weight * acc / count as f64;
        }
    }
    if !any_stage {
        return Err(DepthError::NoStages);
    }
    Ok(total / views as f64)
}

/// Analytic gradient of `sum(upstream ⊙ soft_argmax(softmax(scores)))` with
/// respect to the raw scores, in double precision. Scores are laid out
/// `[plane][pixel]`, upstream `[pixel]`.
pub fn grad_soft_argmax(
    scores: &[f64],
    planes: usize,
    pixels: usize,
    hyp: &DepthHypotheses,
    upstream: &[f64],
) -> Vec<f64> {
    assert_eq!(scores.len(), planes * pixels);
    assert_eq!(upstream.len(), pixels);
    let mut grads = vec![0.0f64; planes * pixels];
    for pix in 0..pixels {
        let mut max_score = f64::NEG_INFINITY;
        for d in 0..planes {
            max_score = max_score.max(scores[d * pixels + pix]);
        }
        let mut total = 0.0f64;
        for d in 0..planes {
            total += (scores[d * pixels + pix] - max_score).exp();
        }
        let prob: Vec<f64> = (0..planes)
            .map(|d| (scores[d * pixels + pix] - max_score).exp() / total)
            .collect();
        let expected: f64 = (0..planes).map(|d| hyp.value(d) * prob[d]).sum();
        for d in 0..planes {
            // d(expected)/d(score_d) = P_d * (z_d - expected).
            grads[d * pixels + pix] = upstream[pix] * prob[d] * (hyp.value(d) - expected);
        }
    }
    grads
}

/// Forward pass matching [`grad_soft_argmax`]: expected depth of the softmax
/// distribution per pixel.
pub fn soft_argmax_of_scores(
    scores: &[f64],
    planes: usize,
    pixels: usize,
    hyp: &DepthHypotheses,
) -> Vec<f64> {
    let mut out = vec![0.0f64; pixels];
    for pix in 0..pixels {
        let mut max_score = f64::NEG_INFINITY;
        for d in 0..planes {
            max_score = max_score.max(scores[d * pixels + pix]);
        }
        let mut total = 0.0f64;
        let mut weighted = 0.0f64;
        for d in 0..planes {
            let e = (scores[d * pixels + pix] - max_score).exp();
            total += e;
            weighted += e * hyp.value(d);
        }
        out[pix] = weighted / total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VolumeShape;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scores_from(planes: usize, height: usize, width: usize, data: Vec<f32>) -> ScoreVolume {
        ScoreVolume {
            planes,
            height,
            width,
            data,
        }
    }

    #[test]
    fn constant_scores_give_uniform_probability() {
        let scores = scores_from(4, 2, 2, vec![3.0; 16]);
        let p = probability_volume(&scores);
        for value in &p.data {
            assert!((value - 0.25).abs() < 1e-7);
        }
        assert!(p.pixel_valid.iter().all(|v| *v == 1));
    }

    #[test]
    fn dominant_score_saturates() {
        let mut data = vec![0.0f32; 64 * 1];
        data[50] = 50.0;
        let scores = scores_from(64, 1, 1, data);
        let p = probability_volume(&scores);
        assert!(p.data[50] >= 1.0 - 1e-12);
    }

    #[test]
    fn probability_matches_direct_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..5 * 6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scores = scores_from(5, 2, 3, data.clone());
        let p = probability_volume(&scores);
        for pix in 0..6 {
            let exp_sum: f64 = (0..5)
                .map(|d| (data[d * 6 + pix] as f64).exp())
                .sum();
            for d in 0..5 {
                let expected = (data[d * 6 + pix] as f64).exp() / exp_sum;
                assert!((p.data[d * 6 + pix] as f64 - expected).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn probability_sums_to_one_and_handles_all_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let planes = rng.random_range(2..9);
            let mut data: Vec<f32> = (0..planes * 4)
                .map(|_| rng.random_range(-10.0..10.0))
                .collect();
            // Pixel 3 fully masked.
            for d in 0..planes {
                data[d * 4 + 3] = f32::NEG_INFINITY;
            }
            let p = probability_volume(&scores_from(planes, 2, 2, data));
            for pix in 0..4 {
                let sum: f64 = (0..planes).map(|d| p.data[d * 4 + pix] as f64).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
            assert_eq!(p.pixel_valid[3], 0);
        }
    }

    #[test]
    fn soft_argmax_one_hot_and_expectation_cases() {
        let hyp = DepthHypotheses::new(1.0, 4.0, 4).unwrap();
        // One-hot at plane 2 -> exactly z_2.
        let mut data = vec![0.0f32; 4];
        data[2] = 1.0;
        let p = ProbabilityVolume {
            planes: 4,
            height: 1,
            width: 1,
            data,
            pixel_valid: vec![1],
        };
        let depth = soft_argmax(&p, &hyp, 1);
        assert_eq!(depth.data[0] as f64, hyp.value(2));
        // Uniform over {1, 2, 3, 4} -> 2.5.
        let p = ProbabilityVolume {
            planes: 4,
            height: 1,
            width: 1,
            data: vec![0.25; 4],
            pixel_valid: vec![1],
        };
        assert!((soft_argmax(&p, &hyp, 1).data[0] - 2.5).abs() < 1e-7);
        // 0.25 at z=1 and 0.75 at z=3 -> 2.5.
        let hyp2 = DepthHypotheses::new(1.0, 3.0, 2).unwrap();
        let p = ProbabilityVolume {
            planes: 2,
            height: 1,
            width: 1,
            data: vec![0.25, 0.75],
            pixel_valid: vec![1],
        };
        assert!((soft_argmax(&p, &hyp2, 1).data[0] - 2.5).abs() < 1e-7);
    }

    #[test]
    fn soft_argmax_stays_in_hypothesis_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hyp = DepthHypotheses::new(0.5, 6.0, 16).unwrap();
        for _ in 0..100 {
            let mut data: Vec<f32> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f32 = data.iter().sum();
            for x in data.iter_mut() {
                *x /= total;
            }
            let p = ProbabilityVolume {
                planes: 16,
                height: 1,
                width: 1,
                data,
                pixel_valid: vec![1],
            };
            let depth = soft_argmax(&p, &hyp, 1).data[0] as f64;
            assert!(depth >= hyp.z_min() && depth <= hyp.z_max());
        }
    }

    #[test]
    fn match_scores_prefer_match_troughs() {
        // A match trough (three zero-energy planes, matching the width the
        // volume smoothing produces) among energetic planes must outscore the
        // mismatching planes, an isolated one-plane dip, and a textureless
        // stretch of the sweep.
        let shape = VolumeShape {
            channels: 2,
            planes: 15,
            height: 1,
            width: 1,
        };
        let mask = VoxelMask::ones(15, 1, 1);
        let filled = |trough: &[usize]| {
            let mut volume = ChannelVolume::zeros(shape);
            for d in 0..15 {
                if trough.contains(&d) {
                    continue;
                }
                for c in 0..2 {
                    volume.set(c, d, 0, 0, 0.8);
                }
            }
            volume
        };
        let trough = filled(&[6, 7, 8]);
        let scores = match_scores(&trough, &mask, &[0.5, 0.5], 10.0).unwrap();
        for d in 0..15 {
            if !(6..=8).contains(&d) {
                assert!(scores.data[7] > scores.data[d], "plane {d} outscored the trough");
            }
        }
        // An isolated one-plane dip is diluted by the plane-axis average.
        let dip_scores = match_scores(&filled(&[7]), &mask, &[0.5, 0.5], 10.0).unwrap();
        assert!(scores.data[7] > dip_scores.data[7]);
        // A wide textureless stretch scores like a mismatch, not like a match.
        let flat_scores =
            match_scores(&filled(&(2..13).collect::<Vec<_>>()), &mask, &[0.5, 0.5], 10.0)
                .unwrap();
        assert!(scores.data[7] > flat_scores.data[7]);
    }

    #[test]
    fn match_scores_mask_and_degenerate_cases() {
        let shape = VolumeShape {
            channels: 1,
            planes: 2,
            height: 1,
            width: 2,
        };
        // Pixel 0: all planes masked. Pixel 1: all-zero energy (textureless).
        let volume = ChannelVolume::zeros(shape);
        let mut mask = VoxelMask::ones(2, 1, 2);
        mask.set(0, 0, 0, false);
        mask.set(1, 0, 0, false);
        let scores = match_scores(&volume, &mask, &[1.0], 10.0).unwrap();
        assert_eq!(scores.data[0], f32::NEG_INFINITY);
        assert_eq!(scores.data[2], f32::NEG_INFINITY);
        // Zero energy gives equal contrast on both planes (uniform outcome).
        assert!(scores.data[1].is_finite());
        assert_eq!(scores.data[1], scores.data[3]);
        let p = probability_volume(&scores);
        assert_eq!(p.pixel_valid, vec![0, 1]);
        assert!((p.data[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn upsample_keeps_constants_and_shapes() {
        let hyp = DepthHypotheses::new(1.0, 4.0, 8).unwrap();
        let depth = DepthMap::constant(8, 8, 1, 2.5);
        let guide = Image::zeros(32, 32);
        let (half, full) = upsample_refine(&depth, &guide, &hyp).unwrap();
        assert_eq!((half.width, half.height, half.stage), (16, 16, 2));
        assert_eq!((full.width, full.height, full.stage), (32, 32, 3));
        for value in half.data.iter().chain(full.data.iter()) {
            assert!((value - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_preserves_guided_edges() {
        // A depth step aligned with a strong intensity edge must stay within
        // one pixel of the edge at full resolution.
        let hyp = DepthHypotheses::new(1.0, 4.0, 8).unwrap();
        let mut depth = DepthMap::constant(8, 8, 1, 2.0);
        let mut guide = Image::zeros(32, 32);
        for v in 0..8 {
            for u in 4..8 {
                depth.data[v * 8 + u] = 3.0;
            }
        }
        // Intensity edge at full-resolution column 16 (= quarter column 4).
        for v in 0..32 {
            for u in 0..32 {
                guide.set(u, v, if u >= 16 { 0.9 } else { 0.1 });
            }
        }
        let (_, full) = upsample_refine(&depth, &guide, &hyp).unwrap();
        for v in 0..32 {
            // Crossing of the midpoint must sit within one pixel of the guide
            // edge; the far fields outside the bilinear transition ramp stay
            // clean.
            let crossing = (0..32)
                .find(|u| full.get(*u, v) >= 2.5)
                .expect("edge must survive");
            assert!(
                (15..=17).contains(&crossing),
                "edge drifted to column {crossing} in row {v}"
            );
            for u in 0..8 {
                assert!((full.get(u, v) - 2.0).abs() < 0.05, "left field at ({u},{v})");
            }
            for u in 18..32 {
                assert!((full.get(u, v) - 3.0).abs() < 0.05, "right field at ({u},{v})");
            }
        }
    }

    #[test]
    fn loss_zero_for_perfect_predictions() {
        let gt = DepthMap::constant(16, 16, 3, 2.0);
        let quarter = DepthMap::constant(4, 4, 0, 2.0);
        let preds: Vec<StagePredictions> = vec![[
            Some(quarter.clone()),
            Some(quarter),
            Some(DepthMap::constant(8, 8, 2, 2.0)),
            Some(gt.clone()),
        ]];
        let loss =
            multiview_loss(&preds, &[gt], 0.8, LambdaExponent::CoarseHeavy).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_stage_weights_match_closed_form() {
        let gt = DepthMap::constant(16, 16, 3, 2.0);
        // Only stage 3, uniform error 0.1 -> loss 0.1 (weight 1); f32 storage
        // of the error bounds the accuracy.
        let mut pred3 = gt.clone();
        for value in pred3.data.iter_mut() {
            *value += 0.1;
        }
        let preds: Vec<StagePredictions> = vec![[None, None, None, Some(pred3)]];
        let loss =
            multiview_loss(&preds, &[gt.clone()], 0.8, LambdaExponent::CoarseHeavy).unwrap();
        assert!((loss - 0.1).abs() < 1e-7);
        // Only stage 0, uniform error 0.1 -> 0.1 * 0.8^-3 = 0.1953125.
        let mut pred0 = DepthMap::constant(4, 4, 0, 2.0);
        for value in pred0.data.iter_mut() {
            *value += 0.1;
        }
        let preds: Vec<StagePredictions> = vec![[Some(pred0.clone()), None, None, None]];
        let loss =
            multiview_loss(&preds, &[gt.clone()], 0.8, LambdaExponent::CoarseHeavy).unwrap();
        assert!((loss - 0.1953125).abs() < 1e-6);
        // Same weights with a dyadic error (exact in f32): tight to 1e-12.
        let exact0 = DepthMap::constant(4, 4, 0, 2.125);
        let preds: Vec<StagePredictions> = vec![[Some(exact0.clone()), None, None, None]];
        let loss =
            multiview_loss(&preds, &[gt.clone()], 0.8, LambdaExponent::CoarseHeavy).unwrap();
        assert!((loss - 0.125 * 1.953125).abs() < 1e-12);
        let exact3 = DepthMap::constant(16, 16, 3, 2.125);
        let preds: Vec<StagePredictions> = vec![[None, None, None, Some(exact3)]];
        let loss =
            multiview_loss(&preds, &[gt.clone()], 0.8, LambdaExponent::CoarseHeavy).unwrap();
        assert!((loss - 0.125).abs() < 1e-12);
        // Reversed direction: stage 0 gets lambda^3.
        let preds: Vec<StagePredictions> = vec![[Some(exact0), None, None, None]];
        let loss = multiview_loss(&preds, &[gt], 0.8, LambdaExponent::FineHeavy).unwrap();
        assert!((loss - 0.125 * 0.8f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn loss_masks_invalid_gt_and_rejects_empty() {
        let mut gt = DepthMap::constant(4, 4, 3, 2.0);
        gt.data[5] = 0.0; // invalid marker
        let mut pred = DepthMap::constant(4, 4, 3, 2.0);
        pred.data[5] = 9.0; // would blow up the loss if not masked
        let preds: Vec<StagePredictions> = vec![[None, None, None, Some(pred.clone())]];
        let loss =
            multiview_loss(&preds, &[gt], 0.8, LambdaExponent::CoarseHeavy).unwrap();
        assert_eq!(loss, 0.0);

        let all_invalid = DepthMap {
            data: vec![0.0; 16],
            ..DepthMap::constant(4, 4, 3, 0.0)
        };
        let preds: Vec<StagePredictions> = vec![[None, None, None, Some(pred)]];
        assert!(matches!(
            multiview_loss(&preds, &[all_invalid], 0.8, LambdaExponent::CoarseHeavy),
            Err(DepthError::EmptyLossTerm { .. })
        ));
    }

    #[test]
    fn loss_scales_linearly_with_uniform_error() {
        // Dyadic errors on a power-of-two base stay exact through f32 storage.
        let gt = DepthMap::constant(8, 8, 3, 2.0);
        let small = DepthMap::constant(8, 8, 3, 2.0625);
        let large = DepthMap::constant(8, 8, 3, 2.1875);
        let as_pred = |d: DepthMap| -> Vec<StagePredictions> { vec![[None, None, None, Some(d)]] };
        let l_small = multiview_loss(&as_pred(small), &[gt.clone()], 0.8, LambdaExponent::CoarseHeavy)
            .unwrap();
        let l_large =
            multiview_loss(&as_pred(large), &[gt], 0.8, LambdaExponent::CoarseHeavy).unwrap();
        assert!((l_large - 3.0 * l_small).abs() < 1e-12);
        assert!(l_small > 0.0);
    }

    #[test]
    fn grad_soft_argmax_uniform_scores_identity() {
        // Uniform scores, upstream 1: gradient is (z_d - mean(z)) / D.
        let hyp = DepthHypotheses::new(1.0, 4.0, 4).unwrap();
        let scores = vec![0.7f64; 4];
        let grads = grad_soft_argmax(&scores, 4, 1, &hyp, &[1.0]);
        let mean: f64 = hyp.values().iter().sum::<f64>() / 4.0;
        for d in 0..4 {
            let expected = (hyp.value(d) - mean) / 4.0;
            assert!((grads[d] - expected).abs() < 1e-12);
        }
        // Zero upstream: zero gradient.
        let grads = grad_soft_argmax(&scores, 4, 1, &hyp, &[0.0]);
        assert!(grads.iter().all(|g| *g == 0.0));
    }
}
