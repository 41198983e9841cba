//! Surface regularizers: normal consistency, edge-length uniformity and
//! uniform Laplacian smoothness, with analytic gradients in vertex positions.

use serde::{Deserialize, Serialize};

use super::{MeshError, TriMesh};
use crate::volume::Vec3;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeshLosses {
    pub normal: f64,
    pub edge: f64,
    pub laplacian: f64,
}

impl MeshLosses {
    pub fn weighted(&self, w: &RegularizerWeights) -> f64 {
        w.normal * self.normal + w.edge * self.edge + w.laplacian * self.laplacian
    }
}

/// Weights of the normal, edge and Laplacian terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerWeights {
    pub normal: f64,
    pub edge: f64,
    pub laplacian: f64,
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        Self { normal: 0.2, edge: 0.01, laplacian: 0.1 }
    }
}

/// Connectivity needed by the regularizers; fixed while vertices move.
#[derive(Clone, Debug)]
pub struct Topology {
    pub faces: Vec<[usize; 3]>,
    pub edges: Vec<[usize; 2]>,
    /// Faces on either side of each internal edge.
    pub internal: Vec<[usize; 2]>,
    pub neighbors: Vec<Vec<usize>>,
    /// Vertices on an edge with a single incident face; excluded from the Laplacian term.
    pub boundary: Vec<bool>,
}

impl Topology {
    pub fn new(mesh: &TriMesh) -> Self {
        let infos = mesh.edge_infos();
        let internal = infos.iter().filter(|e| e.faces.len() == 2).map(|e| [e.faces[0], e.faces[1]]).collect();
        let mut boundary = vec![false; mesh.vertices.len()];
        for e in infos.iter().filter(|e| e.faces.len() == 1) {
            boundary[e.verts[0]] = true;
            boundary[e.verts[1]] = true;
        }
        Self {
            boundary,
            faces: mesh.faces.clone(),
            edges: infos.into_iter().map(|e| e.verts).collect(),
            internal,
            neighbors: mesh.vertex_neighbors(),
        }
    }

    /// Loss values and, when `grad` is given, accumulate `weights`-scaled gradients into it.
    pub fn evaluate(
        &self,
        pos: &[Vec3],
        weights: &RegularizerWeights,
        mut grad: Option<&mut [Vec3]>,
    ) -> Result<MeshLosses, MeshError> {
        if self.internal.is_empty() {
            return Err(MeshError::NoInternalEdge);
        }
        // Face normals from unnormalized cross products.
        let mut cross = Vec::with_capacity(self.faces.len());
        for (fi, &[a, b, c]) in self.faces.iter().enumerate() {
            let cr = (pos[b] - pos[a]).cross(&(pos[c] - pos[a]));
            let len = cr.norm();
            if !(len > 0.0) {
                return Err(MeshError::DegenerateFace(fi));
            }
            cross.push((cr, len));
        }
        let normal_of = |f: usize| cross[f].0 / cross[f].1;

        let n_ie = self.internal.len() as f64;
        let mut normal = 0.0;
        for &[f1, f2] in &self.internal {
            normal += 1.0 - normal_of(f1).dot(&normal_of(f2));
        }
        normal /= n_ie;

        let lengths: Vec<f64> = self.edges.iter().map(|&[a, b]| (pos[a] - pos[b]).norm()).collect();
        let n_e = lengths.len() as f64;
        let mean_len = lengths.iter().sum::<f64>() / n_e;
        let edge = lengths.iter().map(|l| (l - mean_len).powi(2)).sum::<f64>() / n_e;

        let n_v = pos.len() as f64;
        let residual: Vec<Vec3> = laplacian_of(pos, &self.neighbors, &self.boundary);
        let laplacian = residual.iter().map(|d| d.norm_squared()).sum::<f64>() / n_v;

        let losses = MeshLosses { normal, edge, laplacian };
        if !(normal.is_finite() && edge.is_finite() && laplacian.is_finite()) {
            return Err(MeshError::NonFinite);
        }

        if let Some(g) = grad.as_deref_mut() {
            if weights.normal != 0.0 {
                // d/dn of (1 - n1·n2), pushed through normalization and the cross product.
                let mut dn = vec![Vec3::zeros(); self.faces.len()];
                let s = weights.normal / n_ie;
                for &[f1, f2] in &self.internal {
                    dn[f1] -= normal_of(f2) * s;
                    dn[f2] -= normal_of(f1) * s;
                }
                for (fi, &[a, b, c]) in self.faces.iter().enumerate() {
                    if dn[fi] == Vec3::zeros() {
                        continue;
                    }
                    let n = normal_of(fi);
                    let dc = (dn[fi] - n * n.dot(&dn[fi])) / cross[fi].1;
                    let e1 = pos[b] - pos[a];
                    let e2 = pos[c] - pos[a];
                    let g1 = e2.cross(&dc);
                    let g2 = dc.cross(&e1);
                    g[b] += g1;
                    g[c] += g2;
                    g[a] -= g1 + g2;
                }
            }
            if weights.edge != 0.0 {
                // The mean-length dependence cancels because Σ(l - l̄) = 0.
                for (&[a, b], &l) in self.edges.iter().zip(&lengths) {
                    if l > 0.0 {
                        let d = (pos[a] - pos[b]) * (weights.edge * 2.0 * (l - mean_len) / (n_e * l));
                        g[a] += d;
                        g[b] -= d;
                    }
                }
            }
            if weights.laplacian != 0.0 {
                let s = weights.laplacian * 2.0 / n_v;
                for (i, nb) in self.neighbors.iter().enumerate() {
                    if nb.is_empty() || self.boundary[i] {
                        continue;
                    }
                    let d = residual[i] * s;
                    g[i] += d;
                    let share = d / nb.len() as f64;
                    for &j in nb {
                        g[j] -= share;
                    }
                }
            }
        }
        Ok(losses)
    }
}

fn laplacian_of(pos: &[Vec3], neighbors: &[Vec<usize>], boundary: &[bool]) -> Vec<Vec3> {
    neighbors
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            if nb.is_empty() || boundary[i] {
                Vec3::zeros()
            } else {
                let mean = nb.iter().fold(Vec3::zeros(), |acc, &j| acc + pos[j]) / nb.len() as f64;
                pos[i] - mean
            }
        })
        .collect()
}

/// Per-vertex uniform Laplacian residual `sᵢ − mean(neighbors)`; zero on open boundaries.
pub fn laplacian_residuals(mesh: &TriMesh) -> Vec<Vec3> {
    let topo = Topology::new(mesh);
    laplacian_of(&mesh.vertices, &topo.neighbors, &topo.boundary)
}

pub fn mesh_losses(mesh: &TriMesh) -> Result<MeshLosses, MeshError> {
    Topology::new(mesh).evaluate(&mesh.vertices, &RegularizerWeights::default(), None)
}

/// Loss terms and the gradient of their weighted sum with respect to each vertex.
pub fn mesh_losses_with_gradient(
    mesh: &TriMesh,
    weights: &RegularizerWeights,
) -> Result<(MeshLosses, Vec<Vec3>), MeshError> {
    let mut grad = vec![Vec3::zeros(); mesh.vertices.len()];
    let l = Topology::new(mesh).evaluate(&mesh.vertices, weights, Some(&mut grad))?;
    Ok((l, grad))
}
