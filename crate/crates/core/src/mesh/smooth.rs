use super::losses::Topology;
use super::{MeshError, RegularizerWeights, TriMesh};
use crate::volume::Vec3;

/// Gradient descent on vertex positions for the weighted regularizer sum.
/// The step halves whenever a trial step would raise the loss; connectivity
/// never changes.
pub fn smooth_minimize(
    mesh: &TriMesh,
    weights: &RegularizerWeights,
    steps: usize,
    lr: f64,
) -> Result<TriMesh, MeshError> {
    let topo = Topology::new(mesh);
    let mut pos = mesh.vertices.clone();
    let mut grad = vec![Vec3::zeros(); pos.len()];
    let mut loss = topo.evaluate(&pos, weights, Some(&mut grad))?.weighted(weights);
    if !loss.is_finite() {
        return Err(MeshError::NonFinite);
    }
    let mut step = lr;
    for _ in 0..steps {
        if grad.iter().all(|g| *g == Vec3::zeros()) {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<Vec3> = pos.iter().zip(&grad).map(|(p, g)| p - g * step).collect();
            match topo.evaluate(&trial, weights, None) {
                Ok(l) if l.weighted(weights) <= loss => {
                    pos = trial;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
        grad.iter_mut().for_each(|g| *g = Vec3::zeros());
        loss = topo.evaluate(&pos, weights, Some(&mut grad))?.weighted(weights);
        step *= 1.5;
    }
    Ok(TriMesh { vertices: pos, faces: mesh.faces.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::mesh_losses;
    use crate::mesh::primitives::{icosphere, plane_grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_plane_is_fixed_point() {
        let m = plane_grid(7, 7, 1.0);
        let out = smooth_minimize(&m, &RegularizerWeights::default(), 50, 0.1).unwrap();
        for (a, b) in out.vertices.iter().zip(&m.vertices) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn loss_never_increases_and_counts_are_kept() {
        let mut m = icosphere(2, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in &mut m.vertices {
            *v += Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        }
        let w = RegularizerWeights::default();
        let before = mesh_losses(&m).unwrap();
        let out = smooth_minimize(&m, &w, 100, 1.0).unwrap();
        let after = mesh_losses(&out).unwrap();
        assert!(after.weighted(&w) <= before.weighted(&w));
        assert!(after.normal < before.normal);
        assert_eq!(out.faces, m.faces);
        assert_eq!(out.vertices.len(), m.vertices.len());
    }
}
