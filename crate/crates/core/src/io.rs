//! File formats: PGM images, PFM float maps, pose/intrinsics text files,
//! dataset manifests, and raw volume dumps.
//!
//! - PGM: binary `P5`, maxval 255.
//! - PFM: grayscale `Pf`, scale -1.0 (little endian), rows bottom-to-top.
//! - Poses: one line per pose, 12 whitespace-separated numbers, row-major
//!   `[R|t]`, world-to-camera.
//! - Intrinsics: one line, `fx fy cx cy width height`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, GeometryError, Intrinsics, Pose};
use crate::grid::{ChannelVolume, Image};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad {format} data: {detail}")]
    Format {
        path: PathBuf,
        format: &'static str,
        detail: String,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("manifest references missing file {0}")]
    MissingFile(PathBuf),
    #[error("manifest has no frames")]
    EmptyManifest,
    #[error("manifest frame {frame} points past the pose list (index {index}, {count} poses)")]
    BadPoseIndex {
        frame: usize,
        index: usize,
        count: usize,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, format: &'static str, detail: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        format,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

/// Write a grayscale image as binary PGM, quantized to 8 bits.
pub fn write_pgm(path: &Path, image: &Image) -> Result<(), IoError> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(file_err(path))?);
    write!(out, "P5\n{} {}\n255\n", image.width, image.height).map_err(file_err(path))?;
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes).map_err(file_err(path))?;
    Ok(())
}

/// Read a binary PGM (maxval <= 255) into intensities in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Image, IoError> {
    let bytes = fs::read(path).map_err(file_err(path))?;
    let mut header_fields = Vec::new();
    let mut pos = 0usize;
    while header_fields.len() < 4 && pos < bytes.len() {
        // Skip whitespace and comments.
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        header_fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| format_err(path, "PGM", "non-ascii header"))?
                .to_string(),
        );
    }
    if header_fields.len() < 4 || header_fields[0] != "P5" {
        return Err(format_err(path, "PGM", "expected binary P5 header"));
    }
    let width: usize = header_fields[1]
        .parse()
        .map_err(|_| format_err(path, "PGM", "bad width"))?;
    let height: usize = header_fields[2]
        .parse()
        .map_err(|_| format_err(path, "PGM", "bad height"))?;
    let maxval: u32 = header_fields[3]
        .parse()
        .map_err(|_| format_err(path, "PGM", "bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, "PGM", format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let expected = width * height;
    if bytes.len() < pos + expected {
        return Err(format_err(path, "PGM", "truncated pixel data"));
    }
    let data = bytes[pos..pos + expected]
        .iter()
        .map(|b| *b as f32 / maxval as f32)
        .collect();
    Ok(Image {
        width,
        height,
        data,
    })
}

// ---------------------------------------------------------------------------
// PFM
// ---------------------------------------------------------------------------

/// Write a single-channel PFM, little endian, rows bottom-to-top.
pub fn write_pfm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<(), IoError> {
    assert_eq!(data.len(), width * height);
    let mut out = BufWriter::new(fs::File::create(path).map_err(file_err(path))?);
    write!(out, "Pf\n{width} {height}\n-1.0\n").map_err(file_err(path))?;
    for v in (0..height).rev() {
        let row = &data[v * width..(v + 1) * width];
        let mut bytes = Vec::with_capacity(width * 4);
        for value in row {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
        out.write_all(&bytes).map_err(file_err(path))?;
    }
    Ok(())
}

/// Read a single-channel PFM into top-to-bottom row order.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>), IoError> {
    let file = fs::File::open(path).map_err(file_err(path))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(file_err(path))?;
    if line.trim() != "Pf" {
        return Err(format_err(path, "PFM", "expected grayscale Pf header"));
    }
    line.clear();
    reader.read_line(&mut line).map_err(file_err(path))?;
    let dims: Vec<&str> = line.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(format_err(path, "PFM", "bad dimensions line"));
    }
    let width: usize = dims[0]
        .parse()
        .map_err(|_| format_err(path, "PFM", "bad width"))?;
    let height: usize = dims[1]
        .parse()
        .map_err(|_| format_err(path, "PFM", "bad height"))?;
    line.clear();
    reader.read_line(&mut line).map_err(file_err(path))?;
    let scale: f32 = line
        .trim()
        .parse()
        .map_err(|_| format_err(path, "PFM", "bad scale"))?;
    let little_endian = scale < 0.0;
    let mut buffer = vec![0u8; width * height * 4];
    reader.read_exact(&mut buffer).map_err(file_err(path))?;
    let mut data = vec![0.0f32; width * height];
    for (i, chunk) in buffer.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let value = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // Stored bottom-to-top.
        let v = height - 1 - i / width;
        data[v * width + i % width] = value;
    }
    Ok((width, height, data))
}

// ---------------------------------------------------------------------------
// Poses and intrinsics
// ---------------------------------------------------------------------------

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<(), IoError> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(file_err(path))?);
    for pose in poses {
        let mut fields = Vec::with_capacity(12);
        for r in 0..3 {
            for c in 0..3 {
                fields.push(format!("{:.17e}", pose.rotation[(r, c)]));
            }
            fields.push(format!("{:.17e}", pose.translation[r]));
        }
        writeln!(out, "{}", fields.join(" ")).map_err(file_err(path))?;
    }
    Ok(())
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>, IoError> {
    let content = fs::read_to_string(path).map_err(file_err(path))?;
    let mut poses = Vec::new();
    for (line_no, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let values =
            values.map_err(|_| format_err(path, "pose", format!("line {}", line_no + 1)))?;
        if values.len() != 12 {
            return Err(format_err(
                path,
                "pose",
                format!("line {} has {} fields, expected 12", line_no + 1, values.len()),
            ));
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        poses.push(Pose::new(rotation, translation)?);
    }
    Ok(poses)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<(), IoError> {
    fs::write(
        path,
        format!(
            "{:.17e} {:.17e} {:.17e} {:.17e} {} {}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        ),
    )
    .map_err(file_err(path))
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, IoError> {
    let content = fs::read_to_string(path).map_err(file_err(path))?;
    let fields: Vec<&str> = content.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(format_err(
            path,
            "intrinsics",
            format!("{} fields, expected 6", fields.len()),
        ));
    }
    let parse = |s: &str| -> Result<f64, IoError> {
        s.parse()
            .map_err(|_| format_err(path, "intrinsics", format!("bad number {s}")))
    };
    Ok(Intrinsics::new(
        parse(fields[0])?,
        parse(fields[1])?,
        parse(fields[2])?,
        parse(fields[3])?,
        parse(fields[4])?.round() as usize,
        parse(fields[5])?.round() as usize,
    )?)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image: String,
    #[serde(default)]
    pub depth_gt: Option<String>,
    pub pose_index: usize,
}

/// On-disk dataset description; all paths relative to the manifest directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub intrinsics: String,
    pub poses: String,
    pub frames: Vec<FrameEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let json = serde_json::to_string_pretty(self).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, json).map_err(file_err(path))
    }
}

/// Load and validate a manifest: every referenced file must exist and pose
/// indices must be in range. Returns the manifest and its base directory.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf), IoError> {
    let content = fs::read_to_string(path).map_err(file_err(path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&content).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
    if manifest.frames.is_empty() {
        return Err(IoError::EmptyManifest);
    }
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let check = |rel: &str| -> Result<PathBuf, IoError> {
        let p = base.join(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(IoError::MissingFile(p))
        }
    };
    check(&manifest.intrinsics)?;
    let poses = read_poses(&check(&manifest.poses)?)?;
    for (frame, entry) in manifest.frames.iter().enumerate() {
        check(&entry.image)?;
        if let Some(gt) = &entry.depth_gt {
            check(gt)?;
        }
        if entry.pose_index >= poses.len() {
            return Err(IoError::BadPoseIndex {
                frame,
                index: entry.pose_index,
                count: poses.len(),
            });
        }
    }
    Ok((manifest, base))
}

/// Load the images and cameras referenced by a manifest, in frame order.
pub fn load_frames(
    manifest: &DatasetManifest,
    base: &Path,
) -> Result<Vec<(Image, Camera)>, IoError> {
    let intrinsics = read_intrinsics(&base.join(&manifest.intrinsics))?;
    let poses = read_poses(&base.join(&manifest.poses))?;
    manifest
        .frames
        .iter()
        .map(|entry| {
            let image = read_pgm(&base.join(&entry.image))?;
            Ok((image, Camera::new(intrinsics, poses[entry.pose_index])))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Volume debug dump
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct VolumeSidecar<'a> {
    shape: [usize; 4],
    camera: &'a Camera,
    hypotheses: &'a crate::geometry::DepthHypotheses,
}

/// Dump a volume as raw little-endian f32 plus a JSON sidecar describing the
/// shape, camera, and hypothesis grid.
pub fn write_volume_dump(
    path_prefix: &Path,
    volume: &ChannelVolume,
    camera: &Camera,
    hypotheses: &crate::geometry::DepthHypotheses,
) -> Result<(), IoError> {
    let raw_path = path_prefix.with_extension("f32");
    let json_path = path_prefix.with_extension("json");
    let mut out = BufWriter::new(fs::File::create(&raw_path).map_err(file_err(&raw_path))?);
    for value in &volume.data {
        out.write_all(&value.to_le_bytes()).map_err(file_err(&raw_path))?;
    }
    let sidecar = VolumeSidecar {
        shape: [
            volume.shape.channels,
            volume.shape.planes,
            volume.shape.height,
            volume.shape.width,
        ],
        camera,
        hypotheses,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|source| IoError::Json {
        path: json_path.clone(),
        source,
    })?;
    fs::write(&json_path, json).map_err(file_err(&json_path))
}
