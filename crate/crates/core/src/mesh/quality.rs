use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TriMesh, TriangleBvh};
use crate::volume::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshQualityReport {
    pub watertight: bool,
    pub euler_characteristic: i64,
    pub vertices: usize,
    pub faces: usize,
    pub min_angle_deg: f64,
    pub mean_angle_deg: f64,
    pub edge_length_mean: f64,
    pub edge_length_cv: f64,
    /// Intersecting non-adjacent face pairs among the sampled faces.
    pub self_intersections: usize,
    pub sampled_faces: usize,
}

const SAMPLED_FACES: usize = 2000;

pub fn quality_report(mesh: &TriMesh) -> MeshQualityReport {
    let mut min_angle = f64::INFINITY;
    let mut sum_angle = 0.0;
    let mut count = 0usize;
    for f in 0..mesh.faces.len() {
        let p = mesh.corners(f);
        for c in 0..3 {
            let u = p[(c + 1) % 3] - p[c];
            let w = p[(c + 2) % 3] - p[c];
            let denom = u.norm() * w.norm();
            if denom == 0.0 {
                continue;
            }
            let a = (u.dot(&w) / denom).clamp(-1.0, 1.0).acos().to_degrees();
            min_angle = min_angle.min(a);
            sum_angle += a;
            count += 1;
        }
    }
    let (self_intersections, sampled_faces) = count_self_intersections(mesh);
    MeshQualityReport {
        watertight: mesh.is_watertight(),
        euler_characteristic: mesh.euler_characteristic(),
        vertices: mesh.vertex_count(),
        faces: mesh.face_count(),
        min_angle_deg: if count > 0 { min_angle } else { 0.0 },
        mean_angle_deg: if count > 0 { sum_angle / count as f64 } else { 0.0 },
        edge_length_mean: mesh.mean_edge_length(),
        edge_length_cv: mesh.edge_length_cv(),
        self_intersections,
        sampled_faces,
    }
}

fn count_self_intersections(mesh: &TriMesh) -> (usize, usize) {
    let bvh = TriangleBvh::new(mesh);
    let n = mesh.faces.len();
    let sample: Vec<usize> = if n <= SAMPLED_FACES {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
        (0..SAMPLED_FACES).map(|_| rng.random_range(0..n)).collect()
    };
    let mut hits = 0;
    for &f in &sample {
        let p = mesh.corners(f);
        let lo = p[0].inf(&p[1]).inf(&p[2]);
        let hi = p[0].sup(&p[1]).sup(&p[2]);
        let fv = mesh.faces[f];
        for g in bvh.overlapping_faces(lo, hi) {
            if g == f || mesh.faces[g].iter().any(|v| fv.contains(v)) {
                continue;
            }
            if triangles_intersect(&p, &mesh.corners(g)) {
                hits += 1;
                break;
            }
        }
    }
    (hits, sample.len())
}

fn segment_hits_triangle(p: &Vec3, q: &Vec3, t: &[Vec3; 3]) -> bool {
    // Möller–Trumbore restricted to the segment.
    let dir = q - p;
    let e1 = t[1] - t[0];
    let e2 = t[2] - t[0];
    let h = dir.cross(&e2);
    let a = e1.dot(&h);
    if a.abs() < 1e-14 {
        return false;
    }
    let f = 1.0 / a;
    let s = p - t[0];
    let u = f * s.dot(&h);
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let qv = s.cross(&e1);
    let v = f * dir.dot(&qv);
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    let t_hit = f * e2.dot(&qv);
    (0.0..=1.0).contains(&t_hit)
}

fn triangles_intersect(a: &[Vec3; 3], b: &[Vec3; 3]) -> bool {
    (0..3).any(|i| segment_hits_triangle(&a[i], &a[(i + 1) % 3], b))
        || (0..3).any(|i| segment_hits_triangle(&b[i], &b[(i + 1) % 3], a))
}
