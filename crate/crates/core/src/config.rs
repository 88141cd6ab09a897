//! Run configuration shared by the inference modes and the CLI.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::LambdaExponent;
use crate::geometry::{DepthHypotheses, GeometryError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("plane count must be at least 2, got {0}")]
    BadPlaneCount(usize),
    #[error("feature channel count must be even and positive, got {0}")]
    BadChannels(usize),
    #[error("lambda must be in (0, 1], got {0}")]
    BadLambda(f64),
    #[error("score gain must be positive, got {0}")]
    BadScoreGain(f32),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// How retrieved memory values are fused with the query value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Concat,
    Adaptive,
}

/// Inference topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Per-frame estimation from the hybrid volume alone.
    Independent,
    /// 5-frame clips; each of the middle three targets attends to the other two.
    Joint,
    /// Sequential sliding window with a memory bank of past key/value pairs.
    Estm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub z_min: f64,
    pub z_max: f64,
    /// Number of depth hypotheses D.
    pub planes: usize,
    /// Feature channels C (the matching volume carries 2C before reduction).
    pub channels: usize,
    pub lambda: f64,
    pub lambda_exponent: LambdaExponent,
    pub memory_capacity: usize,
    pub fusion: FusionMode,
    pub mode: InferenceMode,
    /// Contrast of the matching-score softmax.
    pub score_gain: f32,
    pub seed: u64,
    pub threads: usize,
    /// Optional parameter-file sidecar overriding the seeded operator weights.
    pub params: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            z_min: 0.8,
            z_max: 5.0,
            planes: 64,
            channels: 32,
            lambda: 0.8,
            lambda_exponent: LambdaExponent::CoarseHeavy,
            memory_capacity: 2,
            fusion: FusionMode::Adaptive,
            mode: InferenceMode::Estm,
            score_gain: 600.0,
            seed: 0,
            threads: 1,
            params: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.planes < 2 {
            return Err(ConfigError::BadPlaneCount(self.planes));
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(ConfigError::BadChannels(self.channels));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(ConfigError::BadLambda(self.lambda));
        }
        if !(self.score_gain > 0.0) {
            return Err(ConfigError::BadScoreGain(self.score_gain));
        }
        DepthHypotheses::new(self.z_min, self.z_max, self.planes)?;
        Ok(())
    }

    pub fn hypotheses(&self) -> Result<DepthHypotheses, ConfigError> {
        Ok(DepthHypotheses::new(self.z_min, self.z_max, self.planes)?)
    }
}
