//! Segmentation and surface metrics, ensemble uncertainty statistics and the
//! SNR–uncertainty regression.

use std::io::Write;

use thiserror::Error;

use crate::mesh::{TriMesh, TriangleBvh};
use crate::volume::{Vec3, VoxelGrid};

/// SNR reported where the local intensity spread vanishes.
pub const SNR_CAP: f64 = 1e6;
/// Floor applied to STD values before taking log₁₀.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("grid geometries differ")]
    GeometryMismatch,
    #[error("point set {0} is empty")]
    Empty(&'static str),
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("degenerate regression: all abscissae equal")]
    ConstantAbscissa,
    #[error("window size {0} must be odd and at least 3")]
    Window(usize),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// 2Σab / (Σa² + Σb²); two empty grids score 1.
pub fn dice_voxel(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64, MetricsError> {
    if !a.same_geometry(b) {
        return Err(MetricsError::GeometryMismatch);
    }
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    Ok(if aa + bb == 0.0 { 1.0 } else { 2.0 * ab / (aa + bb) })
}

#[inline]
fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

/// Exact nearest-neighbour queries over a static point set.
pub struct PointIndex {
    points: Vec<Vec3>,
    nodes: Vec<Node>,
}

struct Node {
    lo: usize,
    hi: usize,
    axis: usize,
    split: f64,
    left: usize,
    right: usize,
}

const LEAF: usize = 8;
const NONE: usize = usize::MAX;

impl PointIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let mut pts = points.to_vec();
        let mut nodes = Vec::new();
        if !pts.is_empty() {
            let n = pts.len();
            Self::build(&mut pts, &mut nodes, 0, n);
        }
        Self { points: pts, nodes }
    }

    fn build(pts: &mut [Vec3], nodes: &mut Vec<Node>, lo: usize, hi: usize) -> usize {
        let id = nodes.len();
        nodes.push(Node { lo, hi, axis: 0, split: 0.0, left: NONE, right: NONE });
        if hi - lo <= LEAF {
            return id;
        }
        let slice = &mut pts[lo..hi];
        let (mn, mx) = slice.iter().fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(a, b), p| {
            (a.inf(p), b.sup(p))
        });
        let axis = (mx - mn).imax();
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        let split = slice[mid][axis];
        let left = Self::build(pts, nodes, lo, lo + mid);
        let right = Self::build(pts, nodes, lo + mid, hi);
        nodes[id] = Node { lo, hi, axis, split, left, right };
        id
    }

    /// Squared distance from `q` to the closest indexed point.
    pub fn nearest_squared(&self, q: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        if !self.nodes.is_empty() {
            self.search(0, q, &mut best);
        }
        best
    }

    pub fn nearest_distance(&self, q: &Vec3) -> f64 {
        self.nearest_squared(q).sqrt()
    }

    fn search(&self, id: usize, q: &Vec3, best: &mut f64) {
        let node = &self.nodes[id];
        if node.left == NONE {
            for p in &self.points[node.lo..node.hi] {
                *best = best.min(dist2(p, q));
            }
            return;
        }
        let delta = q[node.axis] - node.split;
        let (near, far) = if delta < 0.0 { (node.left, node.right) } else { (node.right, node.left) };
        self.search(near, q, best);
        if delta * delta <= *best {
            self.search(far, q, best);
        }
    }
}

fn check_nonempty(a: &[Vec3], b: &[Vec3]) -> Result<(), MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::Empty("S1"));
    }
    if b.is_empty() {
        return Err(MetricsError::Empty("S2"));
    }
    Ok(())
}

fn directed_indexed<'a>(from: &'a [Vec3], to: &'a PointIndex) -> impl Iterator<Item = f64> + 'a {
    from.iter().map(move |p| to.nearest_distance(p))
}

fn directed_brute<'a>(from: &'a [Vec3], to: &'a [Vec3]) -> impl Iterator<Item = f64> + 'a {
    from.iter().map(move |p| to.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min).sqrt())
}

/// Average symmetric surface distance over both point sets.
pub fn asd(s1: &[Vec3], s2: &[Vec3]) -> Result<f64, MetricsError> {
    check_nonempty(s1, s2)?;
    let (i1, i2) = (PointIndex::new(s1), PointIndex::new(s2));
    let total: f64 = directed_indexed(s1, &i2).sum::<f64>() + directed_indexed(s2, &i1).sum::<f64>();
    Ok(total / (s1.len() + s2.len()) as f64)
}

/// Symmetric Hausdorff distance.
pub fn hausdorff(s1: &[Vec3], s2: &[Vec3]) -> Result<f64, MetricsError> {
    check_nonempty(s1, s2)?;
    let (i1, i2) = (PointIndex::new(s1), PointIndex::new(s2));
    Ok(directed_indexed(s1, &i2).fold(0.0, f64::max).max(directed_indexed(s2, &i1).fold(0.0, f64::max)))
}

/// O(n·m) reference for [`asd`].
pub fn asd_brute(s1: &[Vec3], s2: &[Vec3]) -> Result<f64, MetricsError> {
    check_nonempty(s1, s2)?;
    let total: f64 = directed_brute(s1, s2).sum::<f64>() + directed_brute(s2, s1).sum::<f64>();
    Ok(total / (s1.len() + s2.len()) as f64)
}

/// O(n·m) reference for [`hausdorff`].
pub fn hausdorff_brute(s1: &[Vec3], s2: &[Vec3]) -> Result<f64, MetricsError> {
    check_nonempty(s1, s2)?;
    Ok(directed_brute(s1, s2).fold(0.0, f64::max).max(directed_brute(s2, s1).fold(0.0, f64::max)))
}

/// Mean surface of an ensemble with per-vertex spread and local SNR.
#[derive(Clone, Debug)]
pub struct SurfaceEnsembleStats {
    pub mean: TriMesh,
    pub std: Vec<f64>,
    pub snr: Vec<f64>,
}

/// Pair each vertex of the first mesh with its closest surface point on every
/// other mesh; report the mean position and the RMS spread about it.
pub fn surface_ensemble_stats(meshes: &[TriMesh], image: &VoxelGrid) -> Result<SurfaceEnsembleStats, MetricsError> {
    if meshes.len() < 2 {
        return Err(MetricsError::TooFew { need: 2, got: meshes.len() });
    }
    let base = &meshes[0];
    let others: Vec<TriangleBvh> = meshes[1..].iter().map(TriangleBvh::new).collect();
    let k = meshes.len() as f64;
    let mut mean = Vec::with_capacity(base.vertices.len());
    let mut std = Vec::with_capacity(base.vertices.len());
    for v in &base.vertices {
        // Offsets from the base vertex keep identical surfaces exactly at zero spread.
        let mut offsets = vec![Vec3::zeros()];
        for bvh in &others {
            offsets.push(bvh.closest_point(v).map_or(Vec3::zeros(), |c| c.point - v));
        }
        let m = offsets.iter().fold(Vec3::zeros(), |a, p| a + p) / k;
        let var = offsets.iter().map(|p| dist2(p, &m)).sum::<f64>() / k;
        mean.push(v + m);
        std.push(var.sqrt());
    }
    let snr = local_snr(image, &mean, 5)?;
    Ok(SurfaceEnsembleStats { mean: TriMesh { vertices: mean, faces: base.faces.clone() }, std, snr })
}

/// Mean over standard deviation of raw intensities in the `window`³
/// neighbourhood of the voxel containing each point (clipped at the borders).
pub fn local_snr(image: &VoxelGrid, points: &[Vec3], window: usize) -> Result<Vec<f64>, MetricsError> {
    if window < 3 || window % 2 == 0 {
        return Err(MetricsError::Window(window));
    }
    let g = image.geometry;
    let half = (window / 2) as isize;
    Ok(points
        .iter()
        .map(|p| {
            let v = g.to_voxel(p);
            let c: [isize; 3] = std::array::from_fn(|a| (v[a].round() as isize).clamp(0, g.dims[a] as isize - 1));
            let range = |a: usize| (c[a] - half).max(0) as usize..=((c[a] + half).min(g.dims[a] as isize - 1)) as usize;
            let mut vals = Vec::with_capacity(window * window * window);
            for k in range(2) {
                for j in range(1) {
                    for i in range(0) {
                        vals.push(image.get(i, j, k));
                    }
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            if sd < 1e-12 {
                SNR_CAP
            } else {
                (mean / sd).min(SNR_CAP)
            }
        })
        .collect())
}

/// Ordinary least-squares slope of log₁₀(STD) against SNR.
pub fn snr_std_regression(snr: &[f64], std: &[f64]) -> Result<f64, MetricsError> {
    if snr.len() != std.len() {
        return Err(MetricsError::Length(snr.len(), std.len()));
    }
    if snr.len() < 3 {
        return Err(MetricsError::TooFew { need: 3, got: snr.len() });
    }
    let y: Vec<f64> = std.iter().map(|s| s.max(STD_FLOOR).log10()).collect();
    let n = snr.len() as f64;
    let mx = snr.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = snr.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 || snr.iter().all(|x| *x == snr[0]) {
        return Err(MetricsError::ConstantAbscissa);
    }
    let sxy: f64 = snr.iter().zip(&y).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// One row of a metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub case: String,
    pub metric: String,
    pub region: String,
    pub value: f64,
}

/// CSV with header `case,metric,region,value`.
pub fn write_metrics_csv(mut w: impl Write, rows: &[MetricRow]) -> Result<(), MetricsError> {
    writeln!(w, "case,metric,region,value")?;
    for r in rows {
        writeln!(w, "{},{},{},{:.10e}", r.case, r.metric, r.region, r.value)?;
    }
    Ok(())
}

/// Sidecar CSV `vertex_index,std_mm,snr` for the mean ensemble surface.
pub fn write_ensemble_csv(mut w: impl Write, stats: &SurfaceEnsembleStats) -> Result<(), MetricsError> {
    writeln!(w, "vertex_index,std_mm,snr")?;
    for (i, (s, q)) in stats.std.iter().zip(&stats.snr).enumerate() {
        writeln!(w, "{i},{s:.10e},{q:.10e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives::icosphere;
    use crate::volume::Geometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(vals: &[f64]) -> VoxelGrid {
        VoxelGrid::new(Geometry::isotropic([vals.len(), 1, 1], 1.0), vals.to_vec()).unwrap()
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect()
    }

    #[test]
    fn dice_examples() {
        let a = grid(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let b = grid(&[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(dice_voxel(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_voxel(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_voxel(&grid(&[1.0, 0.0]), &grid(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(dice_voxel(&grid(&[0.0, 0.0]), &grid(&[0.0, 0.0])).unwrap(), 1.0);
        assert!(matches!(dice_voxel(&a, &grid(&[1.0])), Err(MetricsError::GeometryMismatch)));
    }

    #[test]
    fn dice_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..200).map(|_| rng.random_range(0..2) as f64).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.random_range(0..2) as f64).collect();
        let mut perm: Vec<usize> = (0..200).collect();
        for i in (1..200).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pa: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
        let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        assert_eq!(dice_voxel(&grid(&a), &grid(&b)).unwrap(), dice_voxel(&grid(&pa), &grid(&pb)).unwrap());
    }

    #[test]
    fn worked_distance_examples() {
        let o = Vec3::zeros();
        assert_eq!(asd(&[o], &[Vec3::new(3.0, 0.0, 0.0)]).unwrap(), 3.0);
        assert_eq!(asd(&[o, Vec3::x()], &[o]).unwrap(), 1.0 / 3.0);
        assert_eq!(hausdorff(&[o, Vec3::new(10.0, 0.0, 0.0)], &[o]).unwrap(), 10.0);
        assert_eq!(hausdorff(&[o], &[Vec3::new(0.0, 5.0, 0.0)]).unwrap(), 5.0);
        assert_eq!(asd(&[o, Vec3::x()], &[o, Vec3::x()]).unwrap(), 0.0);
        assert!(matches!(asd(&[], &[o]), Err(MetricsError::Empty(_))));
        assert!(matches!(hausdorff(&[o], &[]), Err(MetricsError::Empty(_))));
    }

    #[test]
    fn fast_path_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(1..=500);
            let m = rng.random_range(1..=500);
            let (a, b) = (cloud(&mut rng, n), cloud(&mut rng, m));
            assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff_brute(&a, &b).unwrap());
            assert_eq!(asd(&a, &b).unwrap(), asd_brute(&a, &b).unwrap());
        }
    }

    proptest! {
        #[test]
        fn distances_are_symmetric_and_ordered(seed in 0u64..1000, n in 1usize..60, m in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (cloud(&mut rng, n), cloud(&mut rng, m));
            let (h, d) = (hausdorff(&a, &b).unwrap(), asd(&a, &b).unwrap());
            prop_assert_eq!(h, hausdorff(&b, &a).unwrap());
            prop_assert!((d - asd(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(h >= d && d >= 0.0);
        }
    }

    #[test]
    fn identical_ensemble_has_zero_std() {
        let s = icosphere(2, 5.0);
        let img = VoxelGrid::filled(Geometry::isotropic([8; 3], 2.0), 10.0);
        let stats = surface_ensemble_stats(&[s.clone(), s.clone(), s], &img).unwrap();
        assert!(stats.std.iter().all(|&x| x == 0.0));
        assert!(stats.snr.iter().all(|&x| x == SNR_CAP));
        assert!(surface_ensemble_stats(&[icosphere(1, 1.0)], &img).is_err());
    }

    #[test]
    fn concentric_spheres_spread_by_half_gap() {
        let (r, d) = (10.0, 1.0);
        let inner = icosphere(4, r);
        let outer = icosphere(3, r + d);
        let img = VoxelGrid::filled(Geometry::isotropic([4; 3], 1.0), 1.0);
        let stats = surface_ensemble_stats(&[inner, outer], &img).unwrap();
        for (s, v) in stats.std.iter().zip(&stats.mean.vertices) {
            assert!((s - d / 2.0).abs() < 0.03, "{s}");
            assert!((v.norm() - (r + d / 2.0)).abs() < 0.06, "{}", v.norm());
        }
    }

    #[test]
    fn snr_of_constructed_patch() {
        let g = Geometry::isotropic([5; 3], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = rand_distr::Normal::new(100.0, 10.0).unwrap();
        let img = VoxelGrid::from_fn(g, |_| rand_distr::Distribution::sample(&normal, &mut rng));
        let snr = local_snr(&img, &[Vec3::repeat(2.0)], 5).unwrap()[0];
        assert!((snr - 10.0).abs() < 2.5, "{snr}");
        assert!(local_snr(&img, &[Vec3::zeros()], 4).is_err());
        let flat = VoxelGrid::filled(g, 7.0);
        assert_eq!(local_snr(&flat, &[Vec3::repeat(9.0)], 3).unwrap()[0], SNR_CAP);
    }

    #[test]
    fn regression_slope() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.5];
        let s: Vec<f64> = x.iter().map(|x| 10f64.powf(-0.3 * x + 1.0)).collect();
        assert!((snr_std_regression(&x, &s).unwrap() + 0.3).abs() < 1e-12);
        assert!(matches!(snr_std_regression(&[2.0; 4], &[1.0, 2.0, 3.0, 4.0]), Err(MetricsError::ConstantAbscissa)));
        assert!(snr_std_regression(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn csv_layouts() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[MetricRow { case: "c".into(), metric: "dice".into(), region: "all".into(), value: 0.5 }])
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("case,metric,region,value\nc,dice,all,"));
    }
}
