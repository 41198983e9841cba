//! Voxel grids with physical geometry.
//!
//! Data is stored x-fastest: the linear index of voxel `(i, j, k)` is
//! `i + nx * (j + ny * k)`. The origin is the physical position (mm) of the
//! center of voxel `(0, 0, 0)`.

mod field;
mod nrrd;
mod preprocess;

pub use field::{gradient_magnitude_field, sample_trilinear, sample_trilinear_with_gradient, sample_vector};
pub use nrrd::{load_volume, read_nrrd, save_volume, write_nrrd};
pub use preprocess::{
    clip_normalize, crop_at, flip_axis, mask_background, random_crop_augment, resample_cubic, rotate_xy_90,
    PreprocessConfig,
};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("nrrd header: {0}")]
    Header(String),
    #[error("duplicate header field `{0}`")]
    DuplicateField(String),
    #[error("missing header field `{0}`")]
    MissingField(String),
    #[error("unsupported {field}: `{value}`")]
    Unsupported { field: String, value: String },
    #[error("data byte count {actual} does not match {expected} expected from header")]
    ByteCount { expected: usize, actual: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("grid geometries differ")]
    GeometryMismatch,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("crop {crop:?} larger than volume {dims:?}")]
    CropTooLarge { crop: [usize; 3], dims: [usize; 3] },
    #[error("resampled dimension {0} would be smaller than 2")]
    ResampleTooSmall(usize),
}

/// Dimensions, spacing and origin shared by scalar and vector grids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::Geometry(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::Geometry(format!("spacing {spacing:?} must be positive")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::Geometry(format!("origin {origin:?} must be finite")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Self {
        Self { dims, spacing: [spacing; 3], origin: [0.0; 3] }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position of a voxel center.
    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + self.spacing[0] * i as f64,
            self.origin[1] + self.spacing[1] * j as f64,
            self.origin[2] + self.spacing[2] * k as f64,
        )
    }

    /// Continuous voxel coordinates of a physical point.
    #[inline]
    pub fn to_voxel(&self, p: &Vec3) -> [f64; 3] {
        [
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical bounding box of the voxel centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let lo = Vec3::from(self.origin);
        let hi = self.world(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (lo, hi)
    }
}

/// Scalar field sampled at voxel centers.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub geometry: Geometry,
    pub data: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<Self, VolumeError> {
        if data.len() != geometry.len() {
            return Err(VolumeError::Geometry(format!(
                "data length {} != {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f64) -> Self {
        Self { data: vec![value; geometry.len()], geometry }
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self::filled(geometry, 0.0)
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(Vec3) -> f64) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(geometry.world(i, j, k)));
                }
            }
        }
        Self { geometry, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geometry.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.geometry.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { geometry: self.geometry, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn same_geometry(&self, other: &VoxelGrid) -> bool {
        self.geometry == other.geometry
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Binary grid of `value > threshold`.
    pub fn threshold(&self, threshold: f64) -> Self {
        self.map(|v| if v > threshold { 1.0 } else { 0.0 })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Three-component field sampled at voxel centers (e.g. gradients in mm⁻¹ units).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorGrid {
    pub geometry: Geometry,
    pub data: Vec<[f64; 3]>,
}

impl VectorGrid {
    pub fn new(geometry: Geometry, data: Vec<[f64; 3]>) -> Result<Self, VolumeError> {
        if data.len() != geometry.len() {
            return Err(VolumeError::Geometry(format!(
                "data length {} != {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self { data: vec![[0.0; 3]; geometry.len()], geometry }
    }
}
