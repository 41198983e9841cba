//! Indexed triangle surfaces and the operations that turn voxel predictions
//! into smooth, uniform, watertight meshes.

mod bvh;
mod io;
pub mod losses;
mod marching_cubes;
pub mod primitives;
mod quality;
mod remesh;
mod smooth;
mod voxelize;

pub use bvh::{ClosestPoint, Feature, TriangleBvh};
pub use io::{read_obj, save_obj, load_obj, write_obj};
pub use losses::{laplacian_residuals, mesh_losses, mesh_losses_with_gradient, MeshLosses, RegularizerWeights};
pub use marching_cubes::marching_cubes;
pub use quality::{quality_report, MeshQualityReport};
pub use remesh::remesh_uniform;
pub use smooth::smooth_minimize;
pub use voxelize::voxelize_by_normal;

use std::collections::HashMap;

use thiserror::Error;

use crate::volume::Vec3;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("obj line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("obj line {line}: face with {count} vertices, only triangles are supported")]
    NonTriangle { line: usize, count: usize },
    #[error("face {face} references vertex {index} out of range")]
    IndexOutOfRange { face: usize, index: usize },
    #[error("face {0} repeats a vertex")]
    RepeatedVertex(usize),
    #[error("iso value {iso} outside data range [{min}, {max}]: empty surface")]
    EmptySurface { iso: f64, min: f64, max: f64 },
    #[error("mesh is not watertight")]
    NotWatertight,
    #[error("mesh is inconsistently oriented")]
    Inconsistent,
    #[error("face {0} has zero area")]
    DegenerateFace(usize),
    #[error("mesh has no internal edge")]
    NoInternalEdge,
    #[error("non-finite loss")]
    NonFinite,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    /// Counter-clockwise when seen from outside.
    pub faces: Vec<[usize; 3]>,
}

/// Undirected edge with its incident faces.
#[derive(Clone, Debug)]
pub struct EdgeInfo {
    pub verts: [usize; 2],
    pub faces: Vec<usize>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if let Some(&index) = f.iter().find(|&&i| i >= n) {
                return Err(MeshError::IndexOutOfRange { face: fi, index });
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::RepeatedVertex(fi));
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    #[inline]
    pub fn corners(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Cross product of the two edges leaving the first corner (twice the area vector).
    #[inline]
    pub fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.corners(f);
        (b - a).cross(&(c - a))
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let c = self.face_cross(f);
        let n = c.norm();
        if n > 0.0 {
            c / n
        } else {
            Vec3::zeros()
        }
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * self.face_cross(f).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Volume enclosed by a closed, outward-oriented surface (negative if inverted).
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b, c]| self.vertices[a].dot(&self.vertices[b].cross(&self.vertices[c])) / 6.0)
            .sum()
    }

    /// All undirected edges, sorted by vertex pair, with incident faces.
    pub fn edge_infos(&self) -> Vec<EdgeInfo> {
        let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::with_capacity(self.faces.len() * 2);
        for (fi, f) in self.faces.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                map.entry((a.min(b), a.max(b))).or_default().push(fi);
            }
        }
        let mut edges: Vec<EdgeInfo> =
            map.into_iter().map(|((a, b), faces)| EdgeInfo { verts: [a, b], faces }).collect();
        edges.sort_unstable_by_key(|e| e.verts);
        edges
    }

    pub fn edges(&self) -> Vec<[usize; 2]> {
        self.edge_infos().into_iter().map(|e| e.verts).collect()
    }

    /// Edges shared by exactly two faces, with those faces.
    pub fn internal_edges(&self) -> Vec<([usize; 2], [usize; 2])> {
        self.edge_infos()
            .into_iter()
            .filter(|e| e.faces.len() == 2)
            .map(|e| (e.verts, [e.faces[0], e.faces[1]]))
            .collect()
    }

    /// Sorted one-ring neighbor lists.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                nb[a].push(b);
                nb[b].push(a);
            }
        }
        for list in &mut nb {
            list.sort_unstable();
            list.dedup();
        }
        nb
    }

    pub fn vertex_faces(&self) -> Vec<Vec<usize>> {
        let mut vf = vec![Vec::new(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                vf[v].push(fi);
            }
        }
        vf
    }

    /// Angle-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = vec![Vec3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let n = self.face_normal(fi);
            for c in 0..3 {
                let p = self.vertices[f[c]];
                let u = self.vertices[f[(c + 1) % 3]] - p;
                let w = self.vertices[f[(c + 2) % 3]] - p;
                let denom = u.norm() * w.norm();
                if denom > 0.0 {
                    let angle = (u.dot(&w) / denom).clamp(-1.0, 1.0).acos();
                    normals[f[c]] += n * angle;
                }
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }

    /// Every edge borders exactly two faces and every directed edge occurs once.
    pub fn is_watertight(&self) -> bool {
        if self.faces.is_empty() {
            return false;
        }
        let mut directed: HashMap<(usize, usize), u32> = HashMap::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for e in 0..3 {
                *directed.entry((f[e], f[(e + 1) % 3])).or_default() += 1;
            }
        }
        directed.iter().all(|(&(a, b), &count)| count == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn euler_characteristic(&self) -> i64 {
        let used = self.referenced_vertex_count();
        used as i64 - self.edge_infos().len() as i64 + self.faces.len() as i64
    }

    fn referenced_vertex_count(&self) -> usize {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &v in f {
                used[v] = true;
            }
        }
        used.iter().filter(|&&u| u).count()
    }

    pub fn edge_lengths(&self) -> Vec<f64> {
        self.edges().iter().map(|&[a, b]| (self.vertices[a] - self.vertices[b]).norm()).collect()
    }

    pub fn mean_edge_length(&self) -> f64 {
        let l = self.edge_lengths();
        if l.is_empty() {
            0.0
        } else {
            l.iter().sum::<f64>() / l.len() as f64
        }
    }

    /// Coefficient of variation of edge lengths.
    pub fn edge_length_cv(&self) -> f64 {
        let l = self.edge_lengths();
        if l.is_empty() {
            return 0.0;
        }
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        let var = l.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / l.len() as f64;
        var.sqrt() / mean
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Drop vertices not referenced by any face and renumber.
    pub fn compact(&self) -> TriMesh {
        let mut map = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let faces = self
            .faces
            .iter()
            .map(|f| {
                f.map(|v| {
                    if map[v] == usize::MAX {
                        map[v] = vertices.len();
                        vertices.push(self.vertices[v]);
                    }
                    map[v]
                })
            })
            .collect();
        TriMesh { vertices, faces }
    }

    /// Graph of vertices connected by edges has a single component.
    pub fn is_connected(&self) -> bool {
        if self.vertices.is_empty() {
            return false;
        }
        let nb = self.vertex_neighbors();
        let mut seen = vec![false; nb.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &nb[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// The connected component (through shared face vertices) with the most
    /// faces; ties go to the component containing the lowest face index.
    pub fn largest_component(&self) -> TriMesh {
        let nf = self.faces.len();
        let mut by_vertex = vec![Vec::new(); self.vertices.len()];
        for (f, face) in self.faces.iter().enumerate() {
            for &v in face {
                by_vertex[v].push(f);
            }
        }
        let mut label = vec![usize::MAX; nf];
        let mut sizes = Vec::new();
        for start in 0..nf {
            if label[start] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            label[start] = id;
            let mut stack = vec![start];
            let mut size = 0;
            while let Some(f) = stack.pop() {
                size += 1;
                for &v in &self.faces[f] {
                    for &g in &by_vertex[v] {
                        if label[g] == usize::MAX {
                            label[g] = id;
                            stack.push(g);
                        }
                    }
                }
            }
            sizes.push(size);
        }
        let best = (0..sizes.len()).fold(0, |b, i| if sizes[i] > sizes[b] { i } else { b });
        let faces = self.faces.iter().zip(&label).filter(|(_, &l)| l == best).map(|(f, _)| *f).collect();
        TriMesh { vertices: self.vertices.clone(), faces }.compact()
    }
}

#[cfg(test)]
mod tests {
    use super::primitives::{icosphere, plane_grid};
    use super::*;

    #[test]
    fn largest_component_keeps_the_bigger_sphere() {
        let big = icosphere(2, 3.0);
        let small = icosphere(1, 1.0);
        let mut both = small.clone();
        let n = both.vertices.len();
        both.vertices.extend(big.vertices.iter().map(|v| v + Vec3::repeat(10.0)));
        both.faces.extend(big.faces.iter().map(|f| f.map(|v| v + n)));
        let kept = both.largest_component();
        assert_eq!(kept.faces.len(), big.faces.len());
        assert_eq!(kept.vertices.len(), big.vertices.len());
        assert!(kept.is_watertight());
    }

    #[test]
    fn icosphere_topology() {
        let m = icosphere(2, 1.0);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
        assert!(m.is_connected());
    }

    #[test]
    fn plane_is_open() {
        let m = plane_grid(4, 3, 1.0);
        assert!(!m.is_watertight());
        assert_eq!(m.euler_characteristic(), 1);
    }

    #[test]
    fn validation() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(matches!(TriMesh::new(v.clone(), vec![[0, 1, 3]]), Err(MeshError::IndexOutOfRange { .. })));
        assert!(matches!(TriMesh::new(v, vec![[0, 1, 1]]), Err(MeshError::RepeatedVertex(0))));
    }
}
