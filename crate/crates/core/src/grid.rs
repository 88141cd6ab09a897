//! Dense row-major storage for images, multi-channel voxel grids, and masks.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("data length {got} does not match shape ({expected})")]
    LengthMismatch { expected: usize, got: usize },
}

/// Grayscale image, row-major, intensities nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self, GridError> {
        if data.len() != width * height {
            return Err(GridError::LengthMismatch {
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f32) {
        self.data[v * self.width + u] = value;
    }

    /// Clamped-border lookup for filters.
    #[inline]
    pub fn get_clamped(&self, u: isize, v: isize) -> f32 {
        let u = u.clamp(0, self.width as isize - 1) as usize;
        let v = v.clamp(0, self.height as isize - 1) as usize;
        self.get(u, v)
    }
}

/// Shape of a channel-major volume: (channel, plane, row, column).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeShape {
    pub channels: usize,
    pub planes: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeShape {
    pub fn voxels(&self) -> usize {
        self.planes * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.voxels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Channel-major dense volume: index order (channel, plane, row, column) so a
/// fixed channel is contiguous and per-voxel channel reductions stride by the
/// voxel count.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVolume {
    pub shape: VolumeShape,
    pub data: Vec<f32>,
}

impl ChannelVolume {
    pub fn zeros(shape: VolumeShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_data(shape: VolumeShape, data: Vec<f32>) -> Result<Self, GridError> {
        if data.len() != shape.len() {
            return Err(GridError::LengthMismatch {
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Linear index of a voxel within one channel slab.
    #[inline]
    pub fn voxel_index(&self, d: usize, v: usize, u: usize) -> usize {
        (d * self.shape.height + v) * self.shape.width + u
    }

    #[inline]
    pub fn index(&self, c: usize, d: usize, v: usize, u: usize) -> usize {
        c * self.shape.voxels() + self.voxel_index(d, v, u)
    }

    #[inline]
    pub fn get(&self, c: usize, d: usize, v: usize, u: usize) -> f32 {
        self.data[self.index(c, d, v, u)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, d: usize, v: usize, u: usize, value: f32) {
        let i = self.index(c, d, v, u);
        self.data[i] = value;
    }

    /// Gather all channels of one voxel into `out`.
    #[inline]
    pub fn read_voxel(&self, voxel: usize, out: &mut [f32]) {
        let stride = self.shape.voxels();
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.data[c * stride + voxel];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Per-voxel validity mask over (plane, row, column), values in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl VoxelMask {
    pub fn zeros(planes: usize, height: usize, width: usize) -> Self {
        Self {
            planes,
            height,
            width,
            data: vec![0; planes * height * width],
        }
    }

    pub fn ones(planes: usize, height: usize, width: usize) -> Self {
        Self {
            planes,
            height,
            width,
            data: vec![1; planes * height * width],
        }
    }

    #[inline]
    pub fn index(&self, d: usize, v: usize, u: usize) -> usize {
        (d * self.height + v) * self.width + u
    }

    #[inline]
    pub fn get(&self, d: usize, v: usize, u: usize) -> bool {
        self.data[self.index(d, v, u)] != 0
    }

    #[inline]
    pub fn set(&mut self, d: usize, v: usize, u: usize, valid: bool) {
        let i = self.index(d, v, u);
        self.data[i] = valid as u8;
    }

    pub fn same_shape(&self, other: &VoxelMask) -> bool {
        self.planes == other.planes && self.height == other.height && self.width == other.width
    }
}
