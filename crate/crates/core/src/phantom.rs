//! Procedural tube and branching-vessel volumes with exact ground truth.
//!
//! A tube is the set of points whose distance to its centerline polyline is
//! at most the (linearly interpolated) radius, cut flat by the planes through
//! the two end samples perpendicular to the end tangents. The flat ends are
//! the inlet/outlet caps reported in [`InletOutletSpec`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{marching_cubes, MeshError, TriMesh};
use crate::volume::{Geometry, Vec3, VolumeError, VoxelGrid};

/// Upper clamp applied by [`corrupt`]; matches the preprocessing clip window.
pub const CLIP_HI: f64 = 500.0;
const MARGIN_VOXELS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("degenerate centerline: {0}")]
    Degenerate(String),
    #[error("invalid phantom spec: {0}")]
    Invalid(String),
    #[error("tube {tube} leaves the grid (needs a {margin}-voxel margin)")]
    OutsideGrid { tube: usize, margin: f64 },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Ordered centerline samples (mm) with a radius per sample (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Centerline {
    pub points: Vec<[f64; 3]>,
    pub radii: Vec<f64>,
}

impl Centerline {
    pub fn new(points: Vec<Vec3>, radii: Vec<f64>) -> Result<Self, PhantomError> {
        let c = Self { points: points.iter().map(|p| [p.x, p.y, p.z]).collect(), radii };
        c.validate()?;
        Ok(c)
    }

    /// Straight segment from `a` to `b` with constant radius.
    pub fn straight(a: Vec3, b: Vec3, radius: f64) -> Result<Self, PhantomError> {
        Self::new(vec![a, b], vec![radius; 2])
    }

    /// Circular arc of `angle` radians around `center`, starting at
    /// `center + bend_radius·u` and turning toward `v`.
    pub fn arc(
        center: Vec3,
        u: Vec3,
        v: Vec3,
        bend_radius: f64,
        angle: f64,
        radius: f64,
        samples: usize,
    ) -> Result<Self, PhantomError> {
        let (u, v) = (u.normalize(), v.normalize());
        let n = samples.max(2);
        let points = (0..n)
            .map(|i| {
                let t = angle * i as f64 / (n - 1) as f64;
                center + (u * t.cos() + v * t.sin()) * bend_radius
            })
            .collect();
        Self::new(points, vec![radius; n])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        Vec3::from(self.points[i])
    }

    /// Unit tangent at the first sample, pointing along the centerline.
    pub fn start_tangent(&self) -> Vec3 {
        (self.point(1) - self.point(0)).normalize()
    }

    /// Unit tangent at the last sample, pointing out of the tube.
    pub fn end_tangent(&self) -> Vec3 {
        let n = self.len();
        (self.point(n - 1) - self.point(n - 2)).normalize()
    }

    pub fn length(&self) -> f64 {
        (1..self.len()).map(|i| (self.point(i) - self.point(i - 1)).norm()).sum()
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let n = self.points.len();
        if n < 2 {
            return Err(PhantomError::Degenerate(format!("{n} samples, need at least 2")));
        }
        if self.radii.len() != n {
            return Err(PhantomError::Degenerate(format!("{} radii for {n} samples", self.radii.len())));
        }
        if let Some(r) = self.radii.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(PhantomError::Degenerate(format!("radius {r} must be positive")));
        }
        if self.points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(PhantomError::Degenerate("non-finite sample".into()));
        }
        for i in 1..n {
            if (self.point(i) - self.point(i - 1)).norm() <= 1e-9 {
                return Err(PhantomError::Degenerate(format!("samples {} and {i} coincide", i - 1)));
            }
        }
        // The end planes must not slice through the rest of the centerline.
        let (p0, t0) = (self.point(0), self.start_tangent());
        let (pn, tn) = (self.point(n - 1), self.end_tangent());
        for i in 1..n - 1 {
            let p = self.point(i);
            if (p - p0).dot(&t0) <= 0.0 || (p - pn).dot(&tn) >= 0.0 {
                return Err(PhantomError::Degenerate(format!("sample {i} lies beyond an end plane")));
            }
        }
        Ok(())
    }

    /// Implicit function of the tube: negative inside, zero on the wall and caps.
    /// On the tube body it is the exact distance to the wall.
    pub fn implicit(&self, x: &Vec3) -> f64 {
        let n = self.len();
        let mut body = f64::INFINITY;
        for i in 1..n {
            let (a, b) = (self.point(i - 1), self.point(i));
            let ab = b - a;
            let t = ((x - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            let r = self.radii[i - 1] + t * (self.radii[i] - self.radii[i - 1]);
            body = body.min((x - (a + ab * t)).norm() - r);
        }
        let start = -(x - self.point(0)).dot(&self.start_tangent());
        let end = (x - self.point(n - 1)).dot(&self.end_tangent());
        body.max(start).max(end)
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for (i, r) in self.radii.iter().enumerate() {
            let p = self.point(i);
            lo = lo.inf(&(p - Vec3::repeat(*r)));
            hi = hi.sup(&(p + Vec3::repeat(*r)));
        }
        (lo, hi)
    }
}

/// A circular vessel opening: center, radius and outward unit axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cap {
    pub center: [f64; 3],
    pub radius: f64,
    pub axis: [f64; 3],
}

/// Inlet/outlet caps plus the buffer width σ_b of the scaling gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InletOutletSpec {
    pub caps: Vec<Cap>,
    pub buffer: f64,
}

impl InletOutletSpec {
    pub fn validate(&self, geometry: &Geometry) -> Result<(), PhantomError> {
        if self.caps.len() < 2 {
            return Err(PhantomError::Invalid(format!("{} caps, need at least 2", self.caps.len())));
        }
        if !(self.buffer > 0.0) {
            return Err(PhantomError::Invalid(format!("cap buffer {} must be positive", self.buffer)));
        }
        let (lo, hi) = geometry.bounds();
        for (i, c) in self.caps.iter().enumerate() {
            let p = Vec3::from(c.center);
            if !(c.radius > 0.0) || (0..3).any(|a| p[a] < lo[a] || p[a] > hi[a]) {
                return Err(PhantomError::Invalid(format!("cap {i} has bad radius or lies outside the grid")));
            }
        }
        Ok(())
    }
}

fn default_foreground() -> f64 {
    400.0
}
fn default_background() -> f64 {
    50.0
}
fn default_spacing() -> [f64; 3] {
    [1.0; 3]
}
fn default_buffer() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    /// First entry is the trunk; any further entries are side branches.
    pub centerlines: Vec<Centerline>,
    #[serde(default = "default_foreground")]
    pub foreground: f64,
    #[serde(default = "default_background")]
    pub background: f64,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub blur_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Scaling-gate buffer σ_b (mm) recorded in the inlet/outlet spec.
    #[serde(default = "default_buffer")]
    pub cap_buffer: f64,
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3], spacing: f64, centerlines: Vec<Centerline>) -> Self {
        Self {
            dims,
            spacing: [spacing; 3],
            origin: [0.0; 3],
            centerlines,
            foreground: default_foreground(),
            background: default_background(),
            noise_sd: 0.0,
            blur_sigma: 0.0,
            seed: 0,
            cap_buffer: default_buffer(),
        }
    }

    pub fn geometry(&self) -> Result<Geometry, PhantomError> {
        Ok(Geometry::new(self.dims, self.spacing, self.origin)?)
    }

    /// Implicit function of the union of all tubes.
    pub fn implicit(&self, x: &Vec3) -> f64 {
        self.centerlines.iter().map(|c| c.implicit(x)).fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<Geometry, PhantomError> {
        let g = self.geometry()?;
        if self.centerlines.is_empty() {
            return Err(PhantomError::Invalid("no centerlines".into()));
        }
        for (name, v) in [("foreground", self.foreground), ("background", self.background)] {
            if !(0.0..=CLIP_HI).contains(&v) {
                return Err(PhantomError::Invalid(format!("{name} intensity {v} outside [0, {CLIP_HI}]")));
            }
        }
        if !(self.noise_sd >= 0.0 && self.blur_sigma >= 0.0) {
            return Err(PhantomError::Invalid("noise and blur must be non-negative".into()));
        }
        if !(self.cap_buffer > 0.0) {
            return Err(PhantomError::Invalid("cap buffer must be positive".into()));
        }
        let (glo, ghi) = g.bounds();
        let margin = Vec3::from(self.spacing) * MARGIN_VOXELS;
        for (i, c) in self.centerlines.iter().enumerate() {
            c.validate()?;
            let (lo, hi) = c.bounds();
            if (0..3).any(|a| lo[a] < glo[a] + margin[a] || hi[a] > ghi[a] - margin[a]) {
                return Err(PhantomError::OutsideGrid { tube: i, margin: MARGIN_VOXELS });
            }
        }
        Ok(g)
    }

    fn io(&self) -> InletOutletSpec {
        let cap = |p: Vec3, r: f64, axis: Vec3| Cap { center: p.into(), radius: r, axis: axis.into() };
        let trunk = &self.centerlines[0];
        let n = trunk.len();
        let mut caps = vec![
            cap(trunk.point(0), trunk.radii[0], -trunk.start_tangent()),
            cap(trunk.point(n - 1), trunk.radii[n - 1], trunk.end_tangent()),
        ];
        for b in &self.centerlines[1..] {
            let m = b.len();
            caps.push(cap(b.point(m - 1), b.radii[m - 1], b.end_tangent()));
        }
        InletOutletSpec { caps, buffer: self.cap_buffer }
    }
}

/// Generated volume with its ground truth.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: VoxelGrid,
    pub label: VoxelGrid,
    pub io: InletOutletSpec,
}

fn render(spec: &PhantomSpec, g: Geometry) -> Phantom {
    let label = VoxelGrid::from_fn(g, |p| if spec.implicit(&p) <= 0.0 { 1.0 } else { 0.0 });
    let clean = label.map(|l| spec.background + (spec.foreground - spec.background) * l);
    let image = corrupt(&clean, spec.noise_sd, spec.blur_sigma, spec.seed);
    Phantom { image, label, io: spec.io() }
}

/// Single tube along one straight or arc centerline.
pub fn make_tube_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    if spec.centerlines.len() != 1 {
        return Err(PhantomError::Invalid(format!(
            "tube phantom takes one centerline, got {}",
            spec.centerlines.len()
        )));
    }
    let g = spec.validate()?;
    Ok(render(spec, g))
}

/// Trunk (first centerline) plus side branches that start inside the trunk.
pub fn make_branching_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    let g = spec.validate()?;
    let trunk = &spec.centerlines[0];
    let trunk_r = trunk.radii.iter().copied().fold(f64::INFINITY, f64::min);
    for (i, b) in spec.centerlines.iter().enumerate().skip(1) {
        if b.radii.iter().any(|&r| r >= trunk_r) {
            return Err(PhantomError::Invalid(format!("branch {i} is not thinner than the trunk")));
        }
        if trunk.implicit(&b.point(0)) >= 0.0 {
            return Err(PhantomError::Invalid(format!("branch {i} does not start inside the trunk")));
        }
    }
    Ok(render(spec, g))
}

/// Separable Gaussian blur (clamped borders), then i.i.d. Gaussian noise,
/// then clamping to `[0, CLIP_HI]`.
pub fn corrupt(image: &VoxelGrid, noise_sd: f64, blur_sigma: f64, seed: u64) -> VoxelGrid {
    let mut out = if blur_sigma > 0.0 { gaussian_blur(image, blur_sigma) } else { image.clone() };
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).expect("finite noise sd");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut out.data {
            *v += normal.sample(&mut rng);
        }
    }
    out.map(|v| v.clamp(0.0, CLIP_HI))
}

/// Blur with a Gaussian of `sigma` voxels, truncated at 3σ and normalized.
pub fn gaussian_blur(image: &VoxelGrid, sigma: f64) -> VoxelGrid {
    let half = (3.0 * sigma).ceil() as isize;
    let mut w: Vec<f64> = (-half..=half).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    let g = image.geometry;
    let dims = g.dims;
    let mut cur = image.data.clone();
    for axis in 0..3 {
        let stride = [1, dims[0], dims[0] * dims[1]][axis];
        let n = dims[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = g.coords(idx)[axis] as isize;
            let base = idx as isize - pos * stride as isize;
            *out = w
                .iter()
                .enumerate()
                .map(|(t, wt)| {
                    let q = (pos + t as isize - half).clamp(0, n - 1);
                    wt * cur[(base + q * stride as isize) as usize]
                })
                .sum();
        }
        cur = next;
    }
    VoxelGrid { geometry: g, data: cur }
}

/// Peak signal-to-noise ratio (dB) of `test` against `reference` with peak `CLIP_HI`.
pub fn psnr(test: &VoxelGrid, reference: &VoxelGrid) -> Result<f64, PhantomError> {
    if !test.same_geometry(reference) {
        return Err(VolumeError::GeometryMismatch.into());
    }
    let mse = test.data.iter().zip(&reference.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / test.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (CLIP_HI * CLIP_HI / mse).log10() })
}

/// Watertight triangulation of the phantom's vessel boundary with every
/// vertex on the exact zero level of the implicit function.
pub fn analytic_surface(spec: &PhantomSpec) -> Result<TriMesh, PhantomError> {
    spec.validate()?;
    let h = spec.spacing.iter().copied().fold(f64::INFINITY, f64::min) / 2.0;
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for c in &spec.centerlines {
        let (a, b) = c.bounds();
        lo = lo.inf(&a);
        hi = hi.sup(&b);
    }
    hi += Vec3::repeat(2.0 * h);
    // Fallback lattices in case the welded surface still has slivers.
    let mut mesh = None;
    for shift in [0.0, 0.293, 0.617] {
        let start = lo - Vec3::repeat((2.0 + shift) * h);
        let dims: [usize; 3] = std::array::from_fn(|a| ((hi[a] - start[a]) / h).ceil() as usize + 1);
        let g = Geometry::new(dims, [h; 3], start.into())?;
        let field = VoxelGrid::from_fn(g, |p| -spec.implicit(&p));
        let mut m = marching_cubes(&field, 0.0)?;
        for v in &mut m.vertices {
            *v = project_to_zero(|p| spec.implicit(p), *v, h);
        }
        let degenerate = !m.is_watertight() || (0..m.faces.len()).any(|f| m.face_area(f) == 0.0);
        mesh = Some(m);
        if !degenerate {
            break;
        }
    }
    let mesh = mesh.expect("at least one sampling");
    mesh.validate()?;
    Ok(mesh)
}

/// Move `p` onto the zero level of `f` by bisection along the local gradient.
fn project_to_zero(f: impl Fn(&Vec3) -> f64, p: Vec3, scale: f64) -> Vec3 {
    let f0 = f(&p);
    if f0 == 0.0 {
        return p;
    }
    let eps = 1e-6 * scale;
    let grad = Vec3::from_fn(|a, _| {
        let mut e = Vec3::zeros();
        e[a] = eps;
        (f(&(p + e)) - f(&(p - e))) / (2.0 * eps)
    });
    let dir = if grad.norm() > 1e-12 { grad.normalize() } else { Vec3::x() };
    // Walk downhill when outside, uphill when inside, until the sign flips.
    let step = if f0 > 0.0 { -dir } else { dir };
    let (mut a, mut b) = (0.0, 0.25 * scale);
    let mut tries = 0;
    while f(&(p + step * b)).signum() == f0.signum() {
        a = b;
        b *= 2.0;
        tries += 1;
        if tries > 40 {
            return p;
        }
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(&(p + step * m));
        if fm == 0.0 {
            return p + step * m;
        }
        if fm.signum() == f0.signum() {
            a = m;
        } else {
            b = m;
        }
        if b - a < 1e-15 * scale.max(1.0) {
            break;
        }
    }
    p + step * (0.5 * (a + b))
}

/// A straight tube along x through the grid center, `radius` in voxels, ending
/// `margin` voxels plus one radius from each x border.
pub fn straight_tube_spec(dims: [usize; 3], radius: f64, margin: f64) -> PhantomSpec {
    let c = Vec3::from_fn(|a, _| (dims[a] as f64 - 1.0) / 2.0);
    let x0 = margin + radius;
    let x1 = dims[0] as f64 - 1.0 - margin - radius;
    let line = Centerline::straight(Vec3::new(x0, c.y, c.z), Vec3::new(x1, c.y, c.z), radius)
        .expect("straight tube centerline");
    PhantomSpec::new(dims, 1.0, vec![line])
}

/// Tube or branching phantom depending on the number of centerlines.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    if spec.centerlines.len() == 1 {
        make_tube_phantom(spec)
    } else {
        make_branching_phantom(spec)
    }
}

/// Random vessel on a unit-spacing grid: a slightly tilted trunk along a random
/// axis (radius 4–7 voxels) with up to `max_branches` thinner straight branches.
pub fn random_vessel_spec(dims: [usize; 3], max_branches: usize, seed: u64) -> Result<PhantomSpec, PhantomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = MARGIN_VOXELS + 1.0;
    for _ in 0..1000 {
        let axis = rng.random_range(0..3);
        let r = rng.random_range(4.0..7.0);
        let mut a = Vec3::zeros();
        let mut b = Vec3::zeros();
        for k in 0..3 {
            let n = dims[k] as f64 - 1.0;
            if k == axis {
                a[k] = lo + r;
                b[k] = n - lo - r;
            } else {
                a[k] = rng.random_range(0.35 * n..0.65 * n);
                b[k] = rng.random_range(0.35 * n..0.65 * n);
            }
        }
        let mut lines = vec![Centerline::straight(a, b, r)?];
        let branches = rng.random_range(0..=max_branches);
        for _ in 0..branches {
            let t = rng.random_range(0.3..0.7);
            let start = a + (b - a) * t;
            let br = rng.random_range(2.0..3.2f64.min(r - 0.5));
            let end = Vec3::from_fn(|k, _| rng.random_range(lo + br..dims[k] as f64 - 1.0 - lo - br));
            if (end - start).norm() < 2.0 * r + 8.0 {
                continue;
            }
            lines.push(Centerline::straight(start, end, br)?);
        }
        let spec = PhantomSpec::new(dims, 1.0, lines);
        if make_phantom_checks(&spec).is_ok() {
            return Ok(spec);
        }
    }
    Err(PhantomError::Invalid(format!("no valid random vessel fits in {dims:?}")))
}

fn make_phantom_checks(spec: &PhantomSpec) -> Result<(), PhantomError> {
    spec.validate()?;
    let trunk = &spec.centerlines[0];
    for b in &spec.centerlines[1..] {
        if trunk.implicit(&b.point(0)) >= 0.0 {
            return Err(PhantomError::Invalid("branch start outside trunk".into()));
        }
    }
    Ok(())
}
