use super::{Geometry, Vec3, VectorGrid, VolumeError, VoxelGrid};

/// Derivative along `axis` at every voxel: central differences inside,
/// one-sided differences on the border, divided by the physical spacing.
fn axis_derivative(g: &Geometry, data: &[f64], axis: usize, out: &mut [f64]) {
    let n = g.dims[axis];
    let h = g.spacing[axis];
    let stride = match axis {
        0 => 1,
        1 => g.dims[0],
        _ => g.dims[0] * g.dims[1],
    };
    for (idx, o) in out.iter_mut().enumerate() {
        let c = g.coords(idx)[axis];
        *o = if n < 2 {
            0.0
        } else if c == 0 {
            (data[idx + stride] - data[idx]) / h
        } else if c == n - 1 {
            (data[idx] - data[idx - stride]) / h
        } else {
            (data[idx + stride] - data[idx - stride]) / (2.0 * h)
        };
    }
}

fn gradient(g: &Geometry, data: &[f64]) -> Vec<[f64; 3]> {
    let mut comps = [vec![0.0; data.len()], vec![0.0; data.len()], vec![0.0; data.len()]];
    for (axis, c) in comps.iter_mut().enumerate() {
        axis_derivative(g, data, axis, c);
    }
    (0..data.len()).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect()
}

/// Gradient magnitude 𝒢 = |∇I| and its own gradient ∇𝒢, both in physical units.
pub fn gradient_magnitude_field(image: &VoxelGrid) -> Result<(VoxelGrid, VectorGrid), VolumeError> {
    let g = image.geometry;
    if g.dims.iter().any(|&d| d < 3) {
        return Err(VolumeError::Geometry(format!("gradient needs ≥ 3 voxels per axis, got {:?}", g.dims)));
    }
    let grad = gradient(&g, &image.data);
    let mag: Vec<f64> = grad.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).collect();
    let grad_mag = gradient(&g, &mag);
    Ok((VoxelGrid { geometry: g, data: mag }, VectorGrid { geometry: g, data: grad_mag }))
}

struct Cell {
    base: [usize; 3],
    t: [f64; 3],
    /// False when the coordinate was clamped on this axis.
    inside: [bool; 3],
}

fn locate(g: &Geometry, p: &Vec3) -> Cell {
    let u = g.to_voxel(p);
    let mut base = [0; 3];
    let mut t = [0.0; 3];
    let mut inside = [true; 3];
    for a in 0..3 {
        let n = g.dims[a];
        if n == 1 {
            inside[a] = false;
            continue;
        }
        let max = (n - 1) as f64;
        let ua = if u[a] < 0.0 {
            inside[a] = false;
            0.0
        } else if u[a] > max {
            inside[a] = false;
            max
        } else {
            u[a]
        };
        let b = (ua.floor() as usize).min(n - 2);
        base[a] = b;
        t[a] = ua - b as f64;
    }
    Cell { base, t, inside }
}

#[inline]
fn corner_index(g: &Geometry, c: &Cell, di: usize, dj: usize, dk: usize) -> usize {
    let i = (c.base[0] + di).min(g.dims[0] - 1);
    let j = (c.base[1] + dj).min(g.dims[1] - 1);
    let k = (c.base[2] + dk).min(g.dims[2] - 1);
    g.index(i, j, k)
}

/// Trilinear interpolation between the 8 surrounding voxel centers;
/// points outside the grid take the value at the clamped position.
pub fn sample_trilinear(field: &VoxelGrid, p: &Vec3) -> f64 {
    sample_trilinear_with_gradient(field, p).0
}

/// Value and exact spatial derivative (mm⁻¹) of the clamped trilinear interpolant.
/// The derivative component along a clamped axis is zero.
pub fn sample_trilinear_with_gradient(field: &VoxelGrid, p: &Vec3) -> (f64, Vec3) {
    let g = &field.geometry;
    let c = locate(g, p);
    let [tx, ty, tz] = c.t;
    let v = |di, dj, dk| field.data[corner_index(g, &c, di, dj, dk)];
    let (c000, c100, c010, c110) = (v(0, 0, 0), v(1, 0, 0), v(0, 1, 0), v(1, 1, 0));
    let (c001, c101, c011, c111) = (v(0, 0, 1), v(1, 0, 1), v(0, 1, 1), v(1, 1, 1));

    let x00 = c000 + tx * (c100 - c000);
    let x10 = c010 + tx * (c110 - c010);
    let x01 = c001 + tx * (c101 - c001);
    let x11 = c011 + tx * (c111 - c011);
    let y0 = x00 + ty * (x10 - x00);
    let y1 = x01 + ty * (x11 - x01);
    let value = y0 + tz * (y1 - y0);

    let mut grad = Vec3::zeros();
    if c.inside[0] {
        let d00 = c100 - c000;
        let d10 = c110 - c010;
        let d01 = c101 - c001;
        let d11 = c111 - c011;
        let e0 = d00 + ty * (d10 - d00);
        let e1 = d01 + ty * (d11 - d01);
        grad.x = (e0 + tz * (e1 - e0)) / g.spacing[0];
    }
    if c.inside[1] {
        grad.y = ((x10 - x00) + tz * ((x11 - x01) - (x10 - x00))) / g.spacing[1];
    }
    if c.inside[2] {
        grad.z = (y1 - y0) / g.spacing[2];
    }
    (value, grad)
}

/// Trilinear sample of a vector field; zero outside the grid.
pub fn sample_vector(field: &VectorGrid, p: &Vec3) -> Vec3 {
    let g = &field.geometry;
    let c = locate(g, p);
    if (0..3).any(|a| !c.inside[a] && g.dims[a] > 1) {
        return Vec3::zeros();
    }
    let [tx, ty, tz] = c.t;
    let mut out = Vec3::zeros();
    for (dk, wz) in [(0, 1.0 - tz), (1, tz)] {
        for (dj, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (di, wx) in [(0, 1.0 - tx), (1, tx)] {
                let w = wx * wy * wz;
                if w != 0.0 {
                    out += Vec3::from(field.data[corner_index(g, &c, di, dj, dk)]) * w;
                }
            }
        }
    }
    out
}
