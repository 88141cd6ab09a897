//! Fixed operator weights for the deterministic pipeline.
//!
//! Every learned operator of the original architecture is replaced here by a
//! fixed map: channel reduction, context projection, key/value encoders, the
//! fusion map, and the reliability volumes. Defaults are derived from the run
//! seed; every entry can be overridden from a parameter file (raw little-endian
//! f32 blob plus a JSON sidecar naming shapes).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of channels in the context descriptor (intensity pyramid + gradients).
pub const CONTEXT_DESCRIPTOR_CHANNELS: usize = 6;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("linear map expects {rows}x{cols} = {expected} values, got {got}")]
    BadMapSize {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("parameter entry {name}: expected shape {expected:?}, got {got:?}")]
    BadEntryShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unknown parameter entry {0}")]
    UnknownEntry(String),
    #[error("parameter blob too short: entry {name} needs {needed} bytes at offset {offset}")]
    BlobTooShort {
        name: String,
        offset: usize,
        needed: usize,
    },
    #[error("channel count must be even and positive, got {0}")]
    OddChannels(usize),
    #[error("failed to read parameter file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse parameter sidecar: {0}")]
    Json(#[from] serde_json::Error),
}

/// Dense row-major linear map applied per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl LinearMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, ParamsError> {
        if data.len() != rows * cols {
            return Err(ParamsError::BadMapSize {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Row selector `[I | 0]`: picks the first `rows` of `cols` inputs.
    pub fn selector(rows: usize, cols: usize) -> Self {
        let mut map = Self::zeros(rows, cols);
        for r in 0..rows {
            map.data[r * cols + r] = 1.0;
        }
        map
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// `out = M · input`, accumulated in f64.
    pub fn apply(&self, input: &[f32], out: &mut [f32]) {
        debug_assert_eq!(input.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, slot) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0f64;
            for (w, x) in row.iter().zip(input.iter()) {
                acc += *w as f64 * *x as f64;
            }
            *slot = acc as f32;
        }
    }
}

/// Complete set of fixed operator weights for one run.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    /// 2C -> C reduction applied to raw matching volumes.
    pub w_reduce: LinearMap,
    /// Descriptor -> D projection for the context channel.
    pub context_proj: LinearMap,
    /// (C+1) -> C/2 key encoder.
    pub p_k: LinearMap,
    /// (C+1) -> C/2 value encoder.
    pub p_v: LinearMap,
    /// Fusion map on concatenated (value, modulated retrieval) channels.
    pub g: LinearMap,
    /// Raw reliability volume, logistic-squashed before use. `None` means
    /// all zeros (squashed 0.5).
    pub w_raw: Option<Vec<f32>>,
    pub r_raw: Option<Vec<f32>>,
}

fn sub_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then splitmix64 with the run seed folded in.
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in label.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn gaussian_matrix(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Orthonormal n x n matrix from the QR decomposition of a seeded Gaussian.
fn seeded_orthonormal(seed: u64, n: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(seed, n, n).qr();
    qr.q()
}

fn to_map(m: &DMatrix<f64>) -> LinearMap {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)] as f32);
        }
    }
    LinearMap {
        rows: m.nrows(),
        cols: m.ncols(),
        data,
    }
}

/// Channel reduction for raw matching volumes.
///
/// Rows have the structure `[q | -q]/sqrt(2)` with `q` the rows of a seeded
/// orthonormal matrix, so the reduced vector is an isometric image of the
/// difference between the reference and warped halves. A per-voxel reduction
/// that mixed the halves arbitrarily would make the match/mismatch contrast
/// unrecoverable downstream.
pub fn default_w_reduce(seed: u64, channels: usize) -> LinearMap {
    let q = seeded_orthonormal(sub_seed(seed, "w_reduce"), channels);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut data = Vec::with_capacity(channels * 2 * channels);
    for r in 0..channels {
        for c in 0..channels {
            data.push((q[(r, c)] * inv_sqrt2) as f32);
        }
        for c in 0..channels {
            data.push((-q[(r, c)] * inv_sqrt2) as f32);
        }
    }
    LinearMap {
        rows: channels,
        cols: 2 * channels,
        data,
    }
}

/// Key encoder: orthonormal rows over all hybrid channels (matching +
/// context). Feature amplitudes are well below one, so key correlations are
/// small and the memory softmax stays smooth, which keeps retrieval an
/// average over memories rather than a hard per-voxel selection.
pub fn default_p_k(seed: u64, channels: usize) -> Result<LinearMap, ParamsError> {
    if channels == 0 || channels % 2 != 0 {
        return Err(ParamsError::OddChannels(channels));
    }
    let q = seeded_orthonormal(sub_seed(seed, "p_k"), channels + 1);
    Ok(to_map(&q.rows(0, channels / 2).into_owned()))
}

/// Value encoder: orthonormal rows over the matching channels, zero weight on
/// the context channel so the matching contrast survives into the value path.
pub fn default_p_v(seed: u64, channels: usize) -> Result<LinearMap, ParamsError> {
    if channels == 0 || channels % 2 != 0 {
        return Err(ParamsError::OddChannels(channels));
    }
    let q = seeded_orthonormal(sub_seed(seed, "p_v"), channels);
    let half = channels / 2;
    let mut data = Vec::with_capacity(half * (channels + 1));
    for r in 0..half {
        for c in 0..channels {
            data.push(q[(r, c)] as f32);
        }
        data.push(0.0);
    }
    Ok(LinearMap {
        rows: half,
        cols: channels + 1,
        data,
    })
}

/// Fusion map `g([a; b]) = a`, selecting the query value, so the default
/// adaptive blend is the reliability mixture `w⊙y + (1-w)⊙v_q`. With the
/// neutral volumes (w = 0.5) identical query and retrieval fuse back to the
/// query value exactly, keeping the memory-free paths consistent with the
/// transformer path on degenerate inputs.
pub fn default_g(half_channels: usize) -> LinearMap {
    LinearMap::selector(half_channels, 2 * half_channels)
}

/// Context projection: seeded Gaussian rows scaled by 1/sqrt(descriptor dim).
pub fn default_context_proj(seed: u64, planes: usize) -> LinearMap {
    let scale = 1.0 / (CONTEXT_DESCRIPTOR_CHANNELS as f64).sqrt();
    let m = gaussian_matrix(
        sub_seed(seed, "context_proj"),
        planes,
        CONTEXT_DESCRIPTOR_CHANNELS,
    ) * scale;
    to_map(&m)
}

/// Uniform positive score-reduction weights for an n-channel grid.
pub fn uniform_score_weights(channels: usize) -> Vec<f32> {
    vec![1.0 / channels as f32; channels]
}

impl PipelineParams {
    /// Seeded defaults for a pipeline with `channels` matching channels and
    /// `planes` depth hypotheses.
    pub fn seeded(seed: u64, channels: usize, planes: usize) -> Result<Self, ParamsError> {
        if channels == 0 || channels % 2 != 0 {
            return Err(ParamsError::OddChannels(channels));
        }
        Ok(Self {
            w_reduce: default_w_reduce(seed, channels),
            context_proj: default_context_proj(seed, planes),
            p_k: default_p_k(seed, channels)?,
            p_v: default_p_v(seed, channels)?,
            g: default_g(channels / 2),
            w_raw: None,
            r_raw: None,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamSidecar {
    blob: String,
    entries: Vec<ParamEntry>,
}

fn read_blob_slice(
    blob: &[u8],
    entry: &ParamEntry,
) -> Result<Vec<f32>, ParamsError> {
    let count: usize = entry.shape.iter().product();
    let needed = count * 4;
    let end = entry.offset.checked_add(needed);
    match end {
        Some(end) if end <= blob.len() => Ok(blob[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()),
        _ => Err(ParamsError::BlobTooShort {
            name: entry.name.clone(),
            offset: entry.offset,
            needed,
        }),
    }
}

/// Load parameter overrides from a JSON sidecar, merging over `defaults`.
///
/// Recognized entries: `w_reduce`, `context_proj`, `p_k`, `p_v`, `g` (2-d,
/// shapes must match the defaults) and `w_raw`, `r_raw` (3-d volumes,
/// planes x height x width, validated at use).
pub fn load_params(sidecar_path: &Path, defaults: PipelineParams) -> Result<PipelineParams, ParamsError> {
    let sidecar: ParamSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path)?)?;
    let blob_path = sidecar_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&sidecar.blob);
    let mut blob = Vec::new();
    fs::File::open(&blob_path)?.read_to_end(&mut blob)?;

    let mut params = defaults;
    for entry in &sidecar.entries {
        let values = read_blob_slice(&blob, entry)?;
        let expect_map = |target: &LinearMap| -> Result<LinearMap, ParamsError> {
            if entry.shape != [target.rows, target.cols] {
                return Err(ParamsError::BadEntryShape {
                    name: entry.name.clone(),
                    expected: vec![target.rows, target.cols],
                    got: entry.shape.clone(),
                });
            }
            LinearMap::new(target.rows, target.cols, values.clone())
        };
        match entry.name.as_str() {
            "w_reduce" => params.w_reduce = expect_map(&params.w_reduce)?,
            "context_proj" => params.context_proj = expect_map(&params.context_proj)?,
            "p_k" => params.p_k = expect_map(&params.p_k)?,
            "p_v" => params.p_v = expect_map(&params.p_v)?,
            "g" => params.g = expect_map(&params.g)?,
            "w_raw" => {
                if entry.shape.len() != 3 {
                    return Err(ParamsError::BadEntryShape {
                        name: entry.name.clone(),
                        expected: vec![0, 0, 0],
                        got: entry.shape.clone(),
                    });
                }
                params.w_raw = Some(values);
            }
            "r_raw" => {
                if entry.shape.len() != 3 {
                    return Err(ParamsError::BadEntryShape {
                        name: entry.name.clone(),
                        expected: vec![0, 0, 0],
                        got: entry.shape.clone(),
                    });
                }
                params.r_raw = Some(values);
            }
            other => return Err(ParamsError::UnknownEntry(other.to_string())),
        }
    }
    Ok(params)
}

/// Write a parameter file pair (sidecar + blob). Used by tests and to export
/// seeded defaults as a starting point for hand-tuned weights.
pub fn save_params(
    sidecar_path: &Path,
    blob_name: &str,
    entries: &[(&str, Vec<usize>, &[f32])],
) -> Result<(), ParamsError> {
    let mut blob = Vec::new();
    let mut sidecar = ParamSidecar {
        blob: blob_name.to_string(),
        entries: Vec::new(),
    };
    for (name, shape, values) in entries {
        sidecar.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.clone(),
            offset: blob.len(),
        });
        for v in *values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let dir = sidecar_path.parent().unwrap_or_else(|| Path::new("."));
    let mut blob_file = fs::File::create(dir.join(blob_name))?;
    blob_file.write_all(&blob)?;
    fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}
