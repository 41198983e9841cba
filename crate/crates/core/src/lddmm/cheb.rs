//! Spectral graph-convolution momentum predictor on the mesh graph.
//!
//! Each layer computes `Σₖ Tₖ(L̃) X Wₖ + b` with Chebyshev polynomials of the
//! scaled Laplacian `L̃ = −D^{-1/2} A D^{-1/2}` (normalized Laplacian with
//! λ_max = 2, spectrum in [−1, 1]). Two residual blocks of two layers map
//! vertex coordinates to a per-vertex field; momenta are read at the control
//! vertices.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LddmmError;
use crate::mesh::TriMesh;
use crate::volume::Vec3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChebActivation {
    Identity,
    #[default]
    Relu,
}

fn default_order() -> usize {
    3
}
fn default_hidden() -> usize {
    16
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChebPredictorConfig {
    /// Number of Chebyshev terms K_cheb.
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub activation: ChebActivation,
}

impl Default for ChebPredictorConfig {
    fn default() -> Self {
        Self { order: default_order(), hidden: default_hidden(), activation: ChebActivation::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChebLayer {
    /// One `in × out` matrix per Chebyshev term.
    pub terms: Vec<DMatrix<f64>>,
    pub bias: Vec<f64>,
}

/// Four layers: (3→h, h→3) for each of the two residual blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebWeights {
    pub layers: Vec<ChebLayer>,
}

impl ChebWeights {
    fn shapes(cfg: &ChebPredictorConfig) -> [(usize, usize); 4] {
        [(3, cfg.hidden), (cfg.hidden, 3), (3, cfg.hidden), (cfg.hidden, 3)]
    }

    pub fn zeros(cfg: &ChebPredictorConfig) -> Self {
        let layers = Self::shapes(cfg)
            .iter()
            .map(|&(i, o)| ChebLayer { terms: vec![DMatrix::zeros(i, o); cfg.order], bias: vec![0.0; o] })
            .collect();
        Self { layers }
    }

    /// Uniform weights in `±scale/√(in·K)`, zero biases.
    pub fn random(cfg: &ChebPredictorConfig, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = Self::shapes(cfg)
            .iter()
            .map(|&(i, o)| {
                let bound = scale / ((i * cfg.order.max(1)) as f64).sqrt();
                let terms = (0..cfg.order).map(|_| DMatrix::from_fn(i, o, |_, _| rng.random_range(-bound..=bound))).collect();
                ChebLayer { terms, bias: vec![0.0; o] }
            })
            .collect();
        Self { layers }
    }
}

/// Sparse `L̃` as per-row `(column, value)` lists.
pub fn scaled_laplacian(mesh: &TriMesh) -> Result<Vec<Vec<(usize, f64)>>, LddmmError> {
    let nb = mesh.vertex_neighbors();
    let components = count_components(&nb);
    if components != 1 {
        return Err(LddmmError::Disconnected(components));
    }
    let inv_sqrt: Vec<f64> = nb.iter().map(|n| 1.0 / (n.len() as f64).sqrt()).collect();
    Ok(nb
        .iter()
        .enumerate()
        .map(|(i, n)| n.iter().map(|&j| (j, -inv_sqrt[i] * inv_sqrt[j])).collect())
        .collect())
}

fn count_components(nb: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; nb.len()];
    let mut count = 0;
    for s in 0..nb.len() {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(v) = stack.pop() {
            for &w in &nb[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
    }
    count
}

fn apply(l: &[Vec<(usize, f64)>], x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (i, row) in l.iter().enumerate() {
        for &(j, w) in row {
            for c in 0..x.ncols() {
                out[(i, c)] += w * x[(j, c)];
            }
        }
    }
    out
}

fn cheb_layer(l: &[Vec<(usize, f64)>], x: &DMatrix<f64>, layer: &ChebLayer) -> DMatrix<f64> {
    let mut out = DMatrix::from_fn(x.nrows(), layer.bias.len(), |_, c| layer.bias[c]);
    let mut prev: Option<DMatrix<f64>> = None;
    let mut cur = x.clone();
    for (k, w) in layer.terms.iter().enumerate() {
        if k == 1 {
            prev = Some(cur.clone());
            cur = apply(l, x);
        } else if k > 1 {
            let next = apply(l, &cur) * 2.0 - prev.as_ref().expect("previous term");
            prev = Some(std::mem::replace(&mut cur, next));
        }
        out += &cur * w;
    }
    out
}

/// Per-vertex field from vertex coordinates, read at `control_indices`.
pub fn cheb_predict_momenta(
    mesh: &TriMesh,
    cfg: &ChebPredictorConfig,
    weights: &ChebWeights,
    control_indices: &[usize],
) -> Result<Vec<Vec3>, LddmmError> {
    if cfg.order == 0 {
        return Err(LddmmError::Invalid("Chebyshev order must be at least 1".into()));
    }
    let shapes = ChebWeights::shapes(cfg);
    let ok = weights.layers.len() == 4
        && weights.layers.iter().zip(&shapes).all(|(l, &(i, o))| {
            l.terms.len() == cfg.order && l.bias.len() == o && l.terms.iter().all(|w| w.shape() == (i, o))
        });
    if !ok {
        return Err(LddmmError::Invalid("predictor weights do not match the configuration".into()));
    }
    if let Some(&bad) = control_indices.iter().find(|&&i| i >= mesh.vertices.len()) {
        return Err(LddmmError::Invalid(format!("control index {bad} out of range")));
    }
    let l = scaled_laplacian(mesh)?;
    let x0 = DMatrix::from_fn(mesh.vertices.len(), 3, |i, c| mesh.vertices[i][c]);
    let act = |m: DMatrix<f64>| match cfg.activation {
        ChebActivation::Identity => m,
        ChebActivation::Relu => m.map(|v| v.max(0.0)),
    };
    let mut x = x0.clone();
    for block in weights.layers.chunks(2) {
        let z = act(cheb_layer(&l, &x, &block[0]));
        x += cheb_layer(&l, &z, &block[1]);
    }
    let field = x - x0;
    Ok(control_indices.iter().map(|&i| Vec3::new(field[(i, 0)], field[(i, 1)], field[(i, 2)])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives::icosphere;

    fn all(mesh: &TriMesh) -> Vec<usize> {
        (0..mesh.vertices.len()).collect()
    }

    #[test]
    fn spectrum_bound_holds() {
        let mesh = icosphere(2, 1.0);
        let l = scaled_laplacian(&mesh).unwrap();
        // Power iteration: spectral radius at most 1.
        let mut v = DMatrix::from_fn(mesh.vertices.len(), 1, |i, _| ((i * 37 % 11) as f64) - 5.0);
        let mut rho = 0.0;
        for _ in 0..200 {
            let w = apply(&l, &v);
            rho = w.norm() / v.norm();
            v = w / rho;
        }
        assert!(rho <= 1.0 + 1e-9, "{rho}");
        // D^{1/2}·1 is an eigenvector with eigenvalue −1 on any connected graph.
        let x = DMatrix::from_fn(mesh.vertices.len(), 1, |i, _| (mesh.vertex_neighbors()[i].len() as f64).sqrt());
        let y = apply(&l, &x);
        assert!((y + &x).norm() < 1e-12);
    }

    #[test]
    fn order_one_is_pointwise_linear() {
        let cfg = ChebPredictorConfig { order: 1, hidden: 5, activation: ChebActivation::Identity };
        let w = ChebWeights::random(&cfg, 1.0, 3);
        let mesh = icosphere(1, 2.0);
        let out = cheb_predict_momenta(&mesh, &cfg, &w, &all(&mesh)).unwrap();
        let mut moved = mesh.clone();
        moved.vertices[4] *= 3.0;
        let out2 = cheb_predict_momenta(&moved, &cfg, &w, &all(&mesh)).unwrap();
        for i in 0..mesh.vertices.len() {
            if i == 4 {
                assert!((out2[i] - out[i] * 3.0).norm() < 1e-12);
            } else {
                assert!((out2[i] - out[i]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn relabeling_permutes_output() {
        let cfg = ChebPredictorConfig::default();
        let w = ChebWeights::random(&cfg, 1.0, 5);
        let mesh = icosphere(2, 3.0);
        let n = mesh.vertices.len();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // New vertex perm[i] is old vertex i.
        let mut verts = vec![Vec3::zeros(); n];
        for (old, &new) in perm.iter().enumerate() {
            verts[new] = mesh.vertices[old];
        }
        let relabeled = TriMesh { vertices: verts, faces: mesh.faces.iter().map(|f| f.map(|v| perm[v])).collect() };
        let a = cheb_predict_momenta(&mesh, &cfg, &w, &all(&mesh)).unwrap();
        let b = cheb_predict_momenta(&relabeled, &cfg, &w, &all(&mesh)).unwrap();
        for old in 0..n {
            assert!((a[old] - b[perm[old]]).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_weights_give_zero_momenta() {
        let cfg = ChebPredictorConfig::default();
        let mesh = icosphere(1, 2.0);
        let out = cheb_predict_momenta(&mesh, &cfg, &ChebWeights::zeros(&cfg), &[0, 5, 7]).unwrap();
        assert!(out.iter().all(|v| *v == Vec3::zeros()));
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let a = icosphere(0, 1.0);
        let b = icosphere(0, 1.0);
        let n = a.vertices.len();
        let mut two = a.clone();
        two.vertices.extend(b.vertices.iter().map(|v| v + Vec3::repeat(5.0)));
        two.faces.extend(b.faces.iter().map(|f| f.map(|v| v + n)));
        let cfg = ChebPredictorConfig::default();
        let r = cheb_predict_momenta(&two, &cfg, &ChebWeights::zeros(&cfg), &[0]);
        assert!(matches!(r, Err(LddmmError::Disconnected(2))));
    }
}
