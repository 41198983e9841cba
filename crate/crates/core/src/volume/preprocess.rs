use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Geometry, VolumeError, VoxelGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub resample_factor: f64,
    pub crop_dims: [usize; 3],
    /// Per-axis random flips.
    pub flip: [bool; 3],
    /// Random multiples of 90° in the xy plane (square crops only).
    pub rotate: bool,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_lo: 0.0,
            clip_hi: 500.0,
            resample_factor: 1.5,
            crop_dims: [64, 64, 64],
            flip: [true, true, true],
            rotate: true,
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), VolumeError> {
        if !(self.clip_lo < self.clip_hi) {
            return Err(VolumeError::Geometry(format!(
                "clip window [{}, {}] is empty",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(self.resample_factor > 0.0) {
            return Err(VolumeError::Geometry("resample factor must be positive".into()));
        }
        if self.crop_dims.iter().any(|&c| c == 0) {
            return Err(VolumeError::Geometry("crop dims must be positive".into()));
        }
        Ok(())
    }
}

/// Clamp to the clip window and divide by its upper bound.
pub fn clip_normalize(grid: &VoxelGrid, cfg: &PreprocessConfig) -> VoxelGrid {
    let (lo, hi) = (cfg.clip_lo, cfg.clip_hi);
    grid.map(|v| v.clamp(lo, hi) / hi)
}

pub fn mask_background(image: &VoxelGrid, label: &VoxelGrid) -> Result<VoxelGrid, VolumeError> {
    if !image.same_geometry(label) {
        return Err(VolumeError::GeometryMismatch);
    }
    let data = image
        .data
        .iter()
        .zip(&label.data)
        .map(|(&v, &l)| if l == 1.0 { v } else { 0.0 })
        .collect();
    Ok(VoxelGrid { geometry: image.geometry, data })
}

#[inline]
fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Separable Catmull-Rom resampling; the voxel-edge extent of the volume is kept.
pub fn resample_cubic(grid: &VoxelGrid, factor: f64) -> Result<VoxelGrid, VolumeError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(VolumeError::Geometry(format!("resample factor {factor} must be positive")));
    }
    let g = grid.geometry;
    let mut new_dims = [0usize; 3];
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        let n = (g.dims[a] as f64 * factor).round() as usize;
        if n < 2 {
            return Err(VolumeError::ResampleTooSmall(n));
        }
        new_dims[a] = n;
        spacing[a] = g.spacing[a] / factor;
        origin[a] = g.origin[a] - 0.5 * g.spacing[a] + 0.5 * spacing[a];
    }

    let mut data = grid.data.clone();
    let mut dims = g.dims;
    for axis in 0..3 {
        let n_in = dims[axis];
        let n_out = new_dims[axis];
        // Source position of each output sample along this axis.
        let taps: Vec<([usize; 4], [f64; 4])> = (0..n_out)
            .map(|j| {
                let u = ((origin[axis] + spacing[axis] * j as f64 - g.origin[axis]) / g.spacing[axis])
                    .clamp(0.0, (n_in - 1) as f64);
                let base = u.floor();
                let t = u - base;
                let b = base as isize;
                let idx = [b - 1, b, b + 1, b + 2].map(|i| i.clamp(0, n_in as isize - 1) as usize);
                (idx, catmull_rom(t))
            })
            .collect();

        let mut out_dims = dims;
        out_dims[axis] = n_out;
        let mut out = vec![0.0; out_dims[0] * out_dims[1] * out_dims[2]];
        let stride_in = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let stride_out = match axis {
            0 => 1,
            1 => out_dims[0],
            _ => out_dims[0] * out_dims[1],
        };
        // Iterate over all lines along `axis`.
        let (outer, inner) = match axis {
            0 => (dims[1] * dims[2], 1),
            1 => (dims[2], dims[0]),
            _ => (1, dims[0] * dims[1]),
        };
        for o in 0..outer {
            for i in 0..inner {
                let (base_in, base_out) = match axis {
                    0 => (o * dims[0], o * out_dims[0]),
                    1 => (o * dims[0] * dims[1] + i, o * out_dims[0] * out_dims[1] + i),
                    _ => (i, i),
                };
                for (j, (idx, w)) in taps.iter().enumerate() {
                    let mut acc = 0.0;
                    for t in 0..4 {
                        acc += w[t] * data[base_in + idx[t] * stride_in];
                    }
                    out[base_out + j * stride_out] = acc;
                }
            }
        }
        data = out;
        dims = out_dims;
    }
    VoxelGrid::new(Geometry::new(new_dims, spacing, origin)?, data)
}

/// Mirror the voxel order along one axis; geometry is unchanged.
pub fn flip_axis(grid: &VoxelGrid, axis: usize) -> VoxelGrid {
    let g = grid.geometry;
    let [nx, ny, nz] = g.dims;
    let mut out = grid.clone();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let src = match axis {
                    0 => g.index(nx - 1 - i, j, k),
                    1 => g.index(i, ny - 1 - j, k),
                    _ => g.index(i, j, nz - 1 - k),
                };
                out.data[g.index(i, j, k)] = grid.data[src];
            }
        }
    }
    out
}

/// Rotate by 90° in the xy plane. Requires `nx == ny`.
pub fn rotate_xy_90(grid: &VoxelGrid) -> VoxelGrid {
    let g = grid.geometry;
    let [n, ny, nz] = g.dims;
    assert_eq!(n, ny, "xy rotation needs a square cross-section");
    let mut out = grid.clone();
    for k in 0..nz {
        for j in 0..n {
            for i in 0..n {
                out.data[g.index(i, j, k)] = grid.data[g.index(j, n - 1 - i, k)];
            }
        }
    }
    out
}

fn crop(grid: &VoxelGrid, offset: [usize; 3], size: [usize; 3]) -> VoxelGrid {
    let g = grid.geometry;
    let origin = g.world(offset[0], offset[1], offset[2]);
    let geometry = Geometry { dims: size, spacing: g.spacing, origin: origin.into() };
    let mut data = Vec::with_capacity(geometry.len());
    for k in 0..size[2] {
        for j in 0..size[1] {
            let start = g.index(offset[0], offset[1] + j, offset[2] + k);
            data.extend_from_slice(&grid.data[start..start + size[0]]);
        }
    }
    VoxelGrid { geometry, data }
}

/// Extract a sub-block starting at `offset`.
pub fn crop_at(grid: &VoxelGrid, offset: [usize; 3], size: [usize; 3]) -> Result<VoxelGrid, VolumeError> {
    let d = grid.dims();
    if (0..3).any(|a| offset[a] + size[a] > d[a]) {
        return Err(VolumeError::CropTooLarge { crop: size, dims: d });
    }
    Ok(crop(grid, offset, size))
}

/// Paired random crop with identical flips and rotations applied to image and label.
pub fn random_crop_augment(
    image: &VoxelGrid,
    label: &VoxelGrid,
    cfg: &PreprocessConfig,
) -> Result<(VoxelGrid, VoxelGrid), VolumeError> {
    if !image.same_geometry(label) {
        return Err(VolumeError::GeometryMismatch);
    }
    let dims = image.dims();
    let size = cfg.crop_dims;
    if (0..3).any(|a| size[a] > dims[a]) {
        return Err(VolumeError::CropTooLarge { crop: size, dims });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let offset: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=dims[a] - size[a]));
    let mut img = crop(image, offset, size);
    let mut lab = crop(label, offset, size);
    for axis in 0..3 {
        if cfg.flip[axis] && rng.random_bool(0.5) {
            img = flip_axis(&img, axis);
            lab = flip_axis(&lab, axis);
        }
    }
    if cfg.rotate && size[0] == size[1] {
        for _ in 0..rng.random_range(0..4) {
            img = rotate_xy_90(&img);
            lab = rotate_xy_90(&lab);
        }
    }
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Vec3;

    fn ramp(dims: [usize; 3], spacing: f64) -> VoxelGrid {
        let g = Geometry::new(dims, [spacing; 3], [0.0; 3]).unwrap();
        VoxelGrid::from_fn(g, |p| p.x + 2.0 * p.y - 0.5 * p.z)
    }

    #[test]
    fn clip_endpoints_and_midpoint() {
        let g = Geometry::isotropic([3, 1, 1], 1.0);
        let grid = VoxelGrid::new(g, vec![600.0, -50.0, 250.0]).unwrap();
        let out = clip_normalize(&grid, &PreprocessConfig::default());
        assert_eq!(out.data, vec![1.0, 0.0, 0.5]);
        // Re-normalizing the rescaled output is a fixed point.
        let rescaled = out.map(|v| v * 500.0);
        assert_eq!(clip_normalize(&rescaled, &PreprocessConfig::default()), out);
        let zero = VoxelGrid::zeros(g);
        assert_eq!(clip_normalize(&zero, &PreprocessConfig::default()), zero);
    }

    #[test]
    fn resample_constant_and_dims() {
        let g = Geometry::isotropic([8, 6, 4], 1.0);
        let out = resample_cubic(&VoxelGrid::filled(g, 3.25), 1.5).unwrap();
        assert_eq!(out.dims(), [12, 9, 6]);
        assert!(out.data.iter().all(|&v| (v - 3.25).abs() < 1e-12));
        assert!((out.geometry.spacing[0] - 1.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn resample_64_cubed_to_96() {
        let g = Geometry::isotropic([64, 64, 64], 1.0);
        let out = resample_cubic(&VoxelGrid::zeros(g), 1.5).unwrap();
        assert_eq!(out.dims(), [96, 96, 96]);
    }

    #[test]
    fn resample_reproduces_linear_ramp() {
        let grid = ramp([10, 10, 10], 1.0);
        let out = resample_cubic(&grid, 1.5).unwrap();
        let og = out.geometry;
        let mut worst: f64 = 0.0;
        for k in 3..og.dims[2] - 3 {
            for j in 3..og.dims[1] - 3 {
                for i in 3..og.dims[0] - 3 {
                    let p = og.world(i, j, k);
                    worst = worst.max((out.get(i, j, k) - (p.x + 2.0 * p.y - 0.5 * p.z)).abs());
                }
            }
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn resample_factor_one_is_identity() {
        let grid = ramp([5, 6, 7], 0.8).map(|v| v.sin());
        let out = resample_cubic(&grid, 1.0).unwrap();
        assert_eq!(out.geometry.dims, grid.geometry.dims);
        for (a, b) in out.data.iter().zip(&grid.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_preserves_extent() {
        let grid = ramp([7, 9, 11], 1.3);
        let out = resample_cubic(&grid, 1.7).unwrap();
        for a in 0..3 {
            let ext_in = grid.geometry.dims[a] as f64 * grid.geometry.spacing[a];
            let ext_out = out.geometry.dims[a] as f64 * out.geometry.spacing[a];
            assert!((ext_in - ext_out).abs() <= out.geometry.spacing[a]);
        }
        assert!(matches!(resample_cubic(&grid, 0.1), Err(VolumeError::ResampleTooSmall(_))));
    }

    #[test]
    fn crop_is_deterministic_and_sized() {
        let image = ramp([20, 20, 20], 1.0);
        let label = image.threshold(20.0);
        let cfg = PreprocessConfig { crop_dims: [8, 8, 8], seed: 9, ..Default::default() };
        let (a, la) = random_crop_augment(&image, &label, &cfg).unwrap();
        let (b, lb) = random_crop_augment(&image, &label, &cfg).unwrap();
        assert_eq!(a.dims(), [8, 8, 8]);
        assert_eq!((&a, &la), (&b, &lb));
        // The same transform is applied to both grids.
        assert_eq!(la, a.threshold(20.0));
        let too_big = PreprocessConfig { crop_dims: [21, 8, 8], ..cfg };
        assert!(matches!(
            random_crop_augment(&image, &label, &too_big),
            Err(VolumeError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn default_crop_is_64() {
        let g = Geometry::isotropic([70, 64, 66], 1.0);
        let img = VoxelGrid::zeros(g);
        let (a, _) = random_crop_augment(&img, &img, &PreprocessConfig::default()).unwrap();
        assert_eq!(a.dims(), [64, 64, 64]);
    }

    #[test]
    fn flip_is_involution_and_rotation_has_order_four() {
        let grid = ramp([4, 4, 3], 1.0).map(|v| v * v);
        for axis in 0..3 {
            assert_eq!(flip_axis(&flip_axis(&grid, axis), axis), grid);
        }
        let r = (0..4).fold(grid.clone(), |g, _| rotate_xy_90(&g));
        assert_eq!(r, grid);
        assert_ne!(rotate_xy_90(&grid), grid);
    }

    #[test]
    fn masking() {
        let image = ramp([4, 4, 4], 1.0).map(|v| v + 1.0);
        let ones = VoxelGrid::filled(image.geometry, 1.0);
        assert_eq!(mask_background(&image, &ones).unwrap(), image);
        let zeros = VoxelGrid::zeros(image.geometry);
        assert_eq!(mask_background(&image, &zeros).unwrap(), zeros);
        let half = VoxelGrid::from_fn(image.geometry, |p: Vec3| if p.x < 2.0 { 1.0 } else { 0.0 });
        let masked = mask_background(&image, &half).unwrap();
        assert!(masked.count_nonzero() <= half.count_nonzero());
        let other = VoxelGrid::zeros(Geometry::isotropic([4, 4, 5], 1.0));
        assert!(mask_background(&image, &other).is_err());
    }
}
