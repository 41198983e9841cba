use super::{Feature, MeshError, TriMesh, TriangleBvh};
use crate::volume::{Geometry, Vec3, VoxelGrid};

/// Binary label of voxels lying on the inner side of a closed, outward-oriented
/// surface. For each voxel center the exact closest surface point is found; the
/// voxel is inside when the displacement from the surface point to the voxel
/// makes an obtuse angle with the surface normal there (`n·d < 0`).
///
/// The normal at the closest point is the pseudo-normal of the feature hit:
/// the face normal on a face interior, the sum of the two face normals on an
/// edge and the angle-weighted vertex normal on a vertex. Voxel centers lying
/// on the surface (within a nanometre-scale tolerance) count as inside.
pub fn voxelize_by_normal(mesh: &TriMesh, geometry: &Geometry) -> Result<VoxelGrid, MeshError> {
    if !mesh.is_watertight() {
        return Err(MeshError::NotWatertight);
    }
    if mesh.signed_volume() <= 0.0 {
        return Err(MeshError::Inconsistent);
    }
    let face_normals: Vec<Vec3> = (0..mesh.faces.len()).map(|f| mesh.face_normal(f)).collect();
    let vertex_normals = mesh.vertex_normals();
    let vertex_faces = mesh.vertex_faces();
    let bvh = TriangleBvh::new(mesh);
    let on_surface = 1e-9 * geometry.spacing.iter().copied().fold(0.0, f64::max);
    let [nx, ny, nz] = geometry.dims;
    let mut data = Vec::with_capacity(geometry.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = geometry.world(i, j, k);
                let cp = bvh.closest_point(&p).expect("non-empty mesh");
                let n = match cp.feature {
                    Feature::Face => face_normals[cp.face],
                    Feature::Vertex(v) => vertex_normals[v],
                    Feature::Edge(a, b) => vertex_faces[a]
                        .iter()
                        .filter(|f| mesh.faces[**f].contains(&b))
                        .fold(Vec3::zeros(), |acc, &f| acc + face_normals[f]),
                };
                let d = p - cp.point;
                data.push(if d.norm() <= on_surface || n.dot(&d) < 0.0 { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(VoxelGrid { geometry: *geometry, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives::{icosphere, plane_grid};

    #[test]
    fn sphere_center_inside_far_outside() {
        let mut m = icosphere(3, 5.0);
        for v in &mut m.vertices {
            *v += Vec3::repeat(10.0);
        }
        let g = Geometry::isotropic([21, 21, 21], 1.0);
        let lab = voxelize_by_normal(&m, &g).unwrap();
        assert_eq!(lab.get(10, 10, 10), 1.0);
        assert_eq!(lab.get(20, 10, 10), 0.0);
        assert_eq!(lab.get(0, 0, 0), 0.0);
        // Volume close to the analytic ball.
        let vol = lab.data.iter().sum::<f64>();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 125.0;
        assert!((vol - exact).abs() / exact < 0.08, "{vol} vs {exact}");
    }

    #[test]
    fn open_mesh_is_rejected() {
        let g = Geometry::isotropic([4, 4, 4], 1.0);
        assert!(matches!(voxelize_by_normal(&plane_grid(3, 3, 1.0), &g), Err(MeshError::NotWatertight)));
        let mut inverted = icosphere(1, 1.0);
        inverted.faces.iter_mut().for_each(|f| f.swap(1, 2));
        assert!(matches!(voxelize_by_normal(&inverted, &g), Err(MeshError::Inconsistent)));
    }
}
