//! Finite-difference verification of the analytic gradients.
//!
//! Both differentiable heads (attention + retrieval, and soft-argmax over
//! scores) are checked on seeded random double-precision instances against
//! central differences. The check passes when the maximum relative error over
//! all instances and coordinates stays at or below [`GRAD_TOLERANCE`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::est::{attention_retrieve, grad_attention_retrieve, AttentionInstance};
use crate::depth::{grad_soft_argmax, soft_argmax_of_scores};
use crate::geometry::DepthHypotheses;

/// Maximum allowed relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-5;

/// Central-difference step.
const FD_STEP: f64 = 1e-6;

/// Outcome of one gradient suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn random_instance(rng: &mut ChaCha8Rng) -> AttentionInstance {
    let memories = rng.random_range(1..=3);
    let channels = rng.random_range(1..=3);
    let planes = rng.random_range(1..=2);
    let height = rng.random_range(2..=3);
    let width = rng.random_range(2..=3);
    let voxels = planes * height * width;
    let mut normal = |n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    };
    let query_key = normal(channels * voxels);
    let memory_keys = (0..memories).map(|_| normal(channels * voxels)).collect();
    let memory_values = (0..memories).map(|_| normal(channels * voxels)).collect();
    // Mostly-valid masks; keep at least one fully valid memory so every voxel
    // has a differentiable path.
    let mut masks: Vec<Vec<u8>> = vec![vec![1u8; voxels]];
    for _ in 1..memories {
        masks.push(
            (0..voxels)
                .map(|_| (rng.random_range(0.0..1.0) > 0.2) as u8)
                .collect(),
        );
    }
    AttentionInstance {
        memories,
        channels,
        voxels,
        query_key,
        memory_keys,
        memory_values,
        masks,
    }
}

/// Verify the attention/retrieval gradients against central differences on
/// `instances` seeded random cases. `corrupt` perturbs the analytic gradient
/// and must make the check fail (negative control).
pub fn check_attention_retrieve(seed: u64, instances: usize, corrupt: bool) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..instances {
        let inst = random_instance(&mut rng);
        let upstream: Vec<f64> = (0..inst.channels * inst.voxels)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let loss = |inst: &AttentionInstance| -> f64 {
            attention_retrieve(inst)
                .iter()
                .zip(upstream.iter())
                .map(|(y, g)| y * g)
                .sum()
        };
        let mut grads = grad_attention_retrieve(&inst, &upstream);
        if corrupt {
            grads.query_key[0] += 1e-3;
        }

        let mut probe = inst.clone();
        for i in 0..inst.query_key.len() {
            probe.query_key[i] = inst.query_key[i] + FD_STEP;
            let plus = loss(&probe);
            probe.query_key[i] = inst.query_key[i] - FD_STEP;
            let minus = loss(&probe);
            probe.query_key[i] = inst.query_key[i];
            max_rel = max_rel.max(rel_error(grads.query_key[i], (plus - minus) / (2.0 * FD_STEP)));
        }
        for m in 0..inst.memories {
            for i in 0..inst.memory_keys[m].len() {
                probe.memory_keys[m][i] = inst.memory_keys[m][i] + FD_STEP;
                let plus = loss(&probe);
                probe.memory_keys[m][i] = inst.memory_keys[m][i] - FD_STEP;
                let minus = loss(&probe);
                probe.memory_keys[m][i] = inst.memory_keys[m][i];
                max_rel = max_rel.max(rel_error(
                    grads.memory_keys[m][i],
                    (plus - minus) / (2.0 * FD_STEP),
                ));

                probe.memory_values[m][i] = inst.memory_values[m][i] + FD_STEP;
                let plus = loss(&probe);
                probe.memory_values[m][i] = inst.memory_values[m][i] - FD_STEP;
                let minus = loss(&probe);
                probe.memory_values[m][i] = inst.memory_values[m][i];
                max_rel = max_rel.max(rel_error(
                    grads.memory_values[m][i],
                    (plus - minus) / (2.0 * FD_STEP),
                ));
            }
        }
    }
    SuiteReport {
        name: "attention_retrieve",
        instances,
        max_rel_error: max_rel,
    }
}

/// Verify the soft-argmax score gradients against central differences.
pub fn check_soft_argmax(seed: u64, instances: usize, corrupt: bool) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut max_rel = 0.0f64;
    for _ in 0..instances {
        let planes = rng.random_range(2..=6);
        let pixels = rng.random_range(1..=6);
        let z_min = rng.random_range(0.5..2.0);
        let z_max = z_min + rng.random_range(0.5..3.0);
        let hyp = DepthHypotheses::new(z_min, z_max, planes).expect("valid range");
        let mut scores: Vec<f64> = (0..planes * pixels)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let upstream: Vec<f64> = (0..pixels).map(|_| StandardNormal.sample(&mut rng)).collect();
        let loss = |scores: &[f64]| -> f64 {
            soft_argmax_of_scores(scores, planes, pixels, &hyp)
                .iter()
                .zip(upstream.iter())
                .map(|(depth, g)| depth * g)
                .sum()
        };
        let mut grads = grad_soft_argmax(&scores, planes, pixels, &hyp, &upstream);
        if corrupt {
            grads[0] += 1e-3;
        }
        for i in 0..scores.len() {
            let original = scores[i];
            scores[i] = original + FD_STEP;
            let plus = loss(&scores);
            scores[i] = original - FD_STEP;
            let minus = loss(&scores);
            scores[i] = original;
            max_rel = max_rel.max(rel_error(grads[i], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    SuiteReport {
        name: "soft_argmax",
        instances,
        max_rel_error: max_rel,
    }
}
