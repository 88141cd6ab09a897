//! Inference orchestration: independent, joint, and memory-bank (sequential)
//! estimation over image sequences.
//!
//! Every mode shares the same per-frame front end: hybrid volume from the two
//! temporal neighbors, then a key/value encoding. Depth always comes from a
//! value-channel grid through the matching-score head; the transformer modes
//! replace the query value with the fused attention output, while the
//! memory-free paths pass the query value through unchanged, so a run with an
//! empty memory is bit-identical to independent estimation.

use std::collections::VecDeque;
use std::time::Instant;

use thiserror::Error;

use crate::config::{ConfigError, FusionMode, InferenceMode, RunConfig};
use crate::depth::{
    match_scores, probability_volume, soft_argmax, upsample_refine, DepthError, DepthMap,
    ProbabilityVolume,
};
use crate::est::{
    attention, encode_key_value, epipolar_warp_kv, fuse_adaptive, fuse_concat, retrieve,
    EstError, FusionParams, KeyValuePair,
};
use crate::geometry::{Camera, DepthHypotheses};
use crate::grid::{ChannelVolume, Image};
use crate::params::{uniform_score_weights, PipelineParams};
use crate::volume::{
    aggregate_and_regularize, build_raw_matching_volume, context_and_fuse, extract_features,
    HybridVolume, VolumeError,
};

#[derive(Debug, Error)]
pub enum EstmError {
    #[error("need at least 3 frames with poses, got {0}")]
    TooFewFrames(usize),
    #[error("joint estimation takes exactly 5 frames, got {0}")]
    WrongClipLength(usize),
    #[error("fusion parameter volume has {got} entries, expected {expected}")]
    BadFusionVolume { expected: usize, got: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Est(#[from] EstError),
    #[error(transparent)]
    Depth(#[from] DepthError),
}

/// One input frame: grayscale image and its camera at full resolution.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub image: Image,
    pub camera: Camera,
}

/// Ring buffer of past key/value encodings, oldest evicted first.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<(usize, KeyValuePair)>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Frame indices currently held, oldest first.
    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|(idx, _)| *idx).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &(usize, KeyValuePair)> {
        self.entries.iter()
    }

    pub fn push(&mut self, frame_index: usize, pair: KeyValuePair) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((frame_index, pair));
    }
}

/// Per-target-frame output: all four stage depth maps plus the stage-1
/// probability volume and wall-clock time.
#[derive(Debug, Clone)]
pub struct FrameResult {
    pub frame_index: usize,
    pub stages: [DepthMap; 4],
    pub probability: ProbabilityVolume,
    pub millis: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ClipResult {
    pub frames: Vec<FrameResult>,
}

struct Pipeline<'a> {
    cfg: &'a RunConfig,
    params: &'a PipelineParams,
    hyp: DepthHypotheses,
}

struct TargetEncoding {
    hybrid: HybridVolume,
    kv: KeyValuePair,
}

impl<'a> Pipeline<'a> {
    fn new(cfg: &'a RunConfig, params: &'a PipelineParams) -> Result<Self, EstmError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            params,
            hyp: cfg.hypotheses()?,
        })
    }

    /// Hybrid volume and key/value encoding for target frame `t` with sources
    /// `t-1` and `t+1`. Volumes are rebuilt per frame; the only state carried
    /// across frames is the memory bank.
    fn build_target(&self, frames: &[FrameData], t: usize) -> Result<TargetEncoding, EstmError> {
        let target = &frames[t];
        let target_features =
            extract_features(&target.image, self.cfg.channels, &target.camera)?;
        let mut raws = Vec::with_capacity(2);
        for source_index in [t - 1, t + 1] {
            let source = &frames[source_index];
            let source_features =
                extract_features(&source.image, self.cfg.channels, &source.camera)?;
            raws.push(build_raw_matching_volume(
                &target_features,
                &source_features,
                &self.hyp,
            )?);
        }
        let matching = aggregate_and_regularize(&raws, &self.params.w_reduce)?;
        let hybrid = context_and_fuse(
            &target.image,
            &matching,
            &self.params.context_proj,
            &target.camera,
        )?;
        let kv = encode_key_value(&hybrid, &self.params.p_k, &self.params.p_v)?;
        Ok(TargetEncoding { hybrid, kv })
    }

    fn fusion_params(&self, voxels: usize) -> Result<FusionParams, EstmError> {
        let take = |raw: &Option<Vec<f32>>| -> Result<Vec<f32>, EstmError> {
            match raw {
                None => Ok(vec![0.0; voxels]),
                Some(values) if values.len() == voxels => Ok(values.clone()),
                Some(values) => Err(EstmError::BadFusionVolume {
                    expected: voxels,
                    got: values.len(),
                }),
            }
        };
        Ok(FusionParams {
            w_raw: take(&self.params.w_raw)?,
            r_raw: take(&self.params.r_raw)?,
            g: self.params.g.clone(),
        })
    }

    /// Attend over warped memories and fuse with the query value. Voxels
    /// where no memory survives the warp fall back to the memory-free value
    /// path: the fusion formula would rescale the query value there, which
    /// the per-pixel score normalization would misread as a strong match.
    fn transform(
        &self,
        target: &TargetEncoding,
        warped: &[KeyValuePair],
    ) -> Result<ChannelVolume, EstmError> {
        let att = attention(&target.kv, warped)?;
        let retrieved = retrieve(&att, warped)?;
        let value = &target.kv.value;
        let mut fused = match self.cfg.fusion {
            FusionMode::Concat => fuse_concat(value, &retrieved)?,
            FusionMode::Adaptive => {
                let params = self.fusion_params(value.shape.voxels())?;
                fuse_adaptive(value, &retrieved, &params)?
            }
        };
        let voxels = value.shape.voxels();
        let half = value.shape.channels;
        for voxel in 0..voxels {
            if warped.iter().any(|m| m.mask.data[voxel] != 0) {
                continue;
            }
            for c in 0..half {
                fused.data[c * voxels + voxel] = value.data[c * voxels + voxel];
            }
            // Concat fusion carries the retrieval in the upper half; mirror
            // the query value there so the voxel keeps a comparable scale.
            if fused.shape.channels == 2 * half {
                for c in 0..half {
                    fused.data[(half + c) * voxels + voxel] = value.data[c * voxels + voxel];
                }
            }
        }
        Ok(fused)
    }

    /// All four stage depth maps from the (possibly transformed) value grid.
    /// Stage 0 always reads the untransformed query value.
    fn depth_stages(
        &self,
        target: &TargetEncoding,
        fused: &ChannelVolume,
        guide: &Image,
    ) -> Result<([DepthMap; 4], ProbabilityVolume), EstmError> {
        let mask = &target.hybrid.mask;
        let gain = self.cfg.score_gain;

        let stage0_scores = match_scores(
            &target.kv.value,
            mask,
            &uniform_score_weights(target.kv.value.shape.channels),
            gain,
        )?;
        let stage0 = soft_argmax(&probability_volume(&stage0_scores), &self.hyp, 0);

        let stage1_scores = match_scores(
            fused,
            mask,
            &uniform_score_weights(fused.shape.channels),
            gain,
        )?;
        let probability = probability_volume(&stage1_scores);
        let stage1 = soft_argmax(&probability, &self.hyp, 1);

        let (stage2, stage3) = upsample_refine(&stage1, guide, &self.hyp)?;
        Ok(([stage0, stage1, stage2, stage3], probability))
    }

    fn run_target(
        &self,
        frames: &[FrameData],
        t: usize,
        bank: Option<&mut MemoryBank>,
    ) -> Result<FrameResult, EstmError> {
        let start = Instant::now();
        let target = self.build_target(frames, t)?;
        let fused = match &bank {
            Some(bank) if !bank.is_empty() => {
                let warped: Result<Vec<KeyValuePair>, EstError> = bank
                    .entries()
                    .map(|(_, pair)| epipolar_warp_kv(pair, &target.kv.camera, &self.hyp))
                    .collect();
                self.transform(&target, &warped?)?
            }
            // Empty or absent memory: the transformer is bypassed and the
            // query value passes through unchanged.
            _ => target.kv.value.clone(),
        };
        let (stages, probability) = self.depth_stages(&target, &fused, &frames[t].image)?;
        // The memory stores the pre-fusion encoding, pushed only after this
        // frame's depth is extracted: a frame never attends to itself.
        if let Some(bank) = bank {
            bank.push(t, target.kv);
        }
        Ok(FrameResult {
            frame_index: t,
            stages,
            probability,
            millis: start.elapsed().as_secs_f64() * 1000.0,
        })
    }
}

/// Independent estimation: each interior frame from its hybrid volume alone,
/// no attention. A sequence of n frames yields n-2 results.
pub fn estimate_independent(
    frames: &[FrameData],
    cfg: &RunConfig,
    params: &PipelineParams,
) -> Result<ClipResult, EstmError> {
    if frames.len() < 3 {
        return Err(EstmError::TooFewFrames(frames.len()));
    }
    let pipeline = Pipeline::new(cfg, params)?;
    let mut result = ClipResult::default();
    for t in 1..frames.len() - 1 {
        result.frames.push(pipeline.run_target(frames, t, None)?);
    }
    Ok(result)
}

/// Joint estimation over exactly 5 frames: the middle three targets each
/// attend to the other two targets' encodings, warped into their frustum.
pub fn estimate_joint(
    frames: &[FrameData],
    cfg: &RunConfig,
    params: &PipelineParams,
) -> Result<ClipResult, EstmError> {
    if frames.len() != 5 {
        return Err(EstmError::WrongClipLength(frames.len()));
    }
    let pipeline = Pipeline::new(cfg, params)?;
    let targets: Vec<TargetEncoding> = (1..4)
        .map(|t| pipeline.build_target(frames, t))
        .collect::<Result<_, _>>()?;
    let mut result = ClipResult::default();
    for (slot, t) in (1..4).enumerate() {
        let start = Instant::now();
        let target = &targets[slot];
        let warped: Result<Vec<KeyValuePair>, EstError> = targets
            .iter()
            .enumerate()
            .filter(|(other, _)| *other != slot)
            .map(|(_, memory)| epipolar_warp_kv(&memory.kv, &target.kv.camera, &pipeline.hyp))
            .collect();
        let fused = pipeline.transform(target, &warped?)?;
        let (stages, probability) = pipeline.depth_stages(target, &fused, &frames[t].image)?;
        result.frames.push(FrameResult {
            frame_index: t,
            stages,
            probability,
            millis: start.elapsed().as_secs_f64() * 1000.0,
        });
    }
    Ok(result)
}

/// Sequential estimation with a sliding 3-frame window and a memory bank of
/// past key/value encodings. Returns the per-frame results and the final bank
/// state.
pub fn estimate_estm(
    frames: &[FrameData],
    cfg: &RunConfig,
    params: &PipelineParams,
    mut bank: MemoryBank,
) -> Result<(ClipResult, MemoryBank), EstmError> {
    if frames.len() < 3 {
        return Err(EstmError::TooFewFrames(frames.len()));
    }
    let pipeline = Pipeline::new(cfg, params)?;
    let mut result = ClipResult::default();
    for t in 1..frames.len() - 1 {
        result
            .frames
            .push(pipeline.run_target(frames, t, Some(&mut bank))?);
    }
    Ok((result, bank))
}

/// Dispatch on the configured inference mode. ESTM starts from an empty bank
/// with the configured capacity.
pub fn estimate(
    frames: &[FrameData],
    cfg: &RunConfig,
    params: &PipelineParams,
) -> Result<ClipResult, EstmError> {
    match cfg.mode {
        InferenceMode::Independent => estimate_independent(frames, cfg, params),
        InferenceMode::Joint => estimate_joint(frames, cfg, params),
        InferenceMode::Estm => {
            estimate_estm(frames, cfg, params, MemoryBank::new(cfg.memory_capacity))
                .map(|(result, _)| result)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use crate::synth::{
        make_trajectory, render, Background, Motion, Primitive, Scene, TextureParams,
    };

    fn test_config() -> RunConfig {
        RunConfig {
            z_min: 1.0,
            z_max: 4.0,
            planes: 16,
            channels: 8,
            ..RunConfig::default()
        }
    }

    fn scene() -> Scene {
        Scene {
            seed: 5,
            primitives: vec![Primitive::FrontoPlane {
                z: 2.0,
                texture: TextureParams {
                    seed: 3,
                    scale: 0.35,
                    octaves: 3,
                    amplitude: 0.45,
                },
            }],
            background: Background {
                depth: 0.0,
                texture: None,
            },
        }
    }

    fn sequence(n: usize, baseline: f64) -> Vec<FrameData> {
        let intrinsics = Intrinsics::new(64.0, 64.0, 15.5, 15.5, 32, 32).unwrap();
        let poses = make_trajectory(n, &Motion::Lateral { baseline }, &Pose::identity()).unwrap();
        let scene = scene();
        poses
            .into_iter()
            .map(|pose| {
                let camera = Camera::new(intrinsics, pose);
                let frame = render(&scene, &camera);
                FrameData {
                    image: frame.image,
                    camera,
                }
            })
            .collect()
    }

    fn params_for(cfg: &RunConfig) -> PipelineParams {
        PipelineParams::seeded(cfg.seed, cfg.channels, cfg.planes).unwrap()
    }

    #[test]
    fn independent_window_count_and_short_sequences() {
        let cfg = test_config();
        let params = params_for(&cfg);
        let frames = sequence(10, 0.05);
        let result = estimate_independent(&frames, &cfg, &params).unwrap();
        assert_eq!(result.frames.len(), 8);
        assert_eq!(result.frames[0].frame_index, 1);
        assert_eq!(result.frames[7].frame_index, 8);
        assert!(matches!(
            estimate_independent(&frames[..2], &cfg, &params),
            Err(EstmError::TooFewFrames(2))
        ));
    }

    #[test]
    fn identical_frames_degenerate_but_finite() {
        // Zero baseline: matching is degenerate, output must still be finite.
        let cfg = test_config();
        let params = params_for(&cfg);
        let one = sequence(1, 0.05).pop().unwrap();
        let frames = vec![one.clone(), one.clone(), one];
        let result = estimate_independent(&frames, &cfg, &params).unwrap();
        for stage in &result.frames[0].stages {
            assert!(stage.data.iter().all(|d| d.is_finite()));
        }
    }

    #[test]
    fn joint_requires_five_frames() {
        let cfg = test_config();
        let params = params_for(&cfg);
        let frames = sequence(4, 0.05);
        assert!(matches!(
            estimate_joint(&frames, &cfg, &params),
            Err(EstmError::WrongClipLength(4))
        ));
    }

    #[test]
    fn joint_returns_middle_three_targets() {
        let cfg = test_config();
        let params = params_for(&cfg);
        let frames = sequence(5, 0.05);
        let result = estimate_joint(&frames, &cfg, &params).unwrap();
        let indices: Vec<usize> = result.frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(indices, vec![1, 2, 3]);
    }

    #[test]
    fn joint_on_identical_frames_matches_independent() {
        // With five identical frames the warped memories equal the query
        // encoding, retrieval returns the query value, and the neutral
        // adaptive fusion reproduces it, so depth matches the memory-free path.
        let cfg = test_config();
        let params = params_for(&cfg);
        let one = sequence(1, 0.05).pop().unwrap();
        let frames = vec![one; 5];
        let joint = estimate_joint(&frames, &cfg, &params).unwrap();
        let independent = estimate_independent(&frames, &cfg, &params).unwrap();
        for (j, i) in joint.frames.iter().zip(independent.frames.iter()) {
            for (sj, si) in j.stages.iter().zip(i.stages.iter()) {
                for (a, b) in sj.data.iter().zip(si.data.iter()) {
                    assert!((a - b).abs() < 1e-5, "stage {} differs: {a} vs {b}", sj.stage);
                }
            }
        }
    }

    #[test]
    fn estm_zero_capacity_is_bitwise_independent() {
        let cfg = test_config();
        let params = params_for(&cfg);
        let frames = sequence(6, 0.05);
        let independent = estimate_independent(&frames, &cfg, &params).unwrap();
        let (estm, bank) =
            estimate_estm(&frames, &cfg, &params, MemoryBank::new(0)).unwrap();
        assert!(bank.is_empty());
        for (a, b) in independent.frames.iter().zip(estm.frames.iter()) {
            for (sa, sb) in a.stages.iter().zip(b.stages.iter()) {
                assert_eq!(sa.data, sb.data);
                assert_eq!(sa.mask, sb.mask);
            }
            assert_eq!(a.probability.data, b.probability.data);
        }
    }

    #[test]
    fn estm_first_frame_with_empty_bank_is_bitwise_independent() {
        let cfg = test_config();
        let params = params_for(&cfg);
        let frames = sequence(5, 0.05);
        let independent = estimate_independent(&frames, &cfg, &params).unwrap();
        let (estm, _) = estimate_estm(&frames, &cfg, &params, MemoryBank::new(2)).unwrap();
        assert_eq!(
            independent.frames[0].stages[3].data,
            estm.frames[0].stages[3].data
        );
        assert_eq!(
            independent.frames[0].probability.data,
            estm.frames[0].probability.data
        );
        // Later frames use memory and differ.
        assert_ne!(
            independent.frames[2].stages[1].data,
            estm.frames[2].stages[1].data
        );
    }

    #[test]
    fn estm_bank_holds_two_most_recent_frames() {
        let cfg = test_config();
        let params = params_for(&cfg);
        let frames = sequence(6, 0.05);
        let (_, bank) = estimate_estm(&frames, &cfg, &params, MemoryBank::new(2)).unwrap();
        // Interior frames 1..=4 were pushed; capacity 2 keeps the last two.
        assert_eq!(bank.frame_indices(), vec![3, 4]);
    }

    #[test]
    fn memory_bank_eviction_is_oldest_first() {
        let cfg = test_config();
        let params = params_for(&cfg);
        let frames = sequence(3, 0.05);
        let pipeline = Pipeline::new(&cfg, &params).unwrap();
        let target = pipeline.build_target(&frames, 1).unwrap();
        let mut bank = MemoryBank::new(2);
        for index in 0..4 {
            bank.push(index, target.kv.clone());
        }
        assert_eq!(bank.frame_indices(), vec![2, 3]);
        assert_eq!(bank.len(), 2);
    }
}
