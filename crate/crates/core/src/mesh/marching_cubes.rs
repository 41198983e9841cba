//! Table-driven isosurface extraction.
//!
//! The 256-entry case table is generated once from the cube's face structure:
//! on every face the sign pattern of the four corners fixes the surface
//! crossings, ambiguous faces always separate the inside corners, and the
//! face segments are chained into closed polygons. Polygons are fan-triangulated
//! from a vertex whose diagonals stay off the cube faces, or around an added
//! centroid vertex when no such vertex exists. Because the face rule depends
//! only on the face's own corners, neighboring cells agree on every shared face
//! and the output is crack-free and manifold.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::{MeshError, TriMesh};
use crate::volume::{Vec3, VoxelGrid};

const CORNERS: usize = 8;

fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as (low corner, high corner, axis).
fn cube_edges() -> [(usize, usize, usize); 12] {
    let mut edges = [(0, 0, 0); 12];
    let mut n = 0;
    for axis in 0..3 {
        for c in 0..CORNERS {
            if c & (1 << axis) == 0 {
                edges[n] = (c, c | (1 << axis), axis);
                n += 1;
            }
        }
    }
    edges
}

fn edge_index(edges: &[(usize, usize, usize); 12], a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    edges.iter().position(|&(p, q, _)| p == lo && q == hi).expect("cube edge")
}

/// Marker for the centroid of the current polygon in a triangle entry.
const CENTROID: u8 = 12;
/// Cache key axis for a vertex placed on a grid node.
const NODE: usize = 3;

/// Triangle fans of one surface polygon; `CENTROID` refers to its mean point.
struct Polygon {
    edges: Vec<u8>,
    tris: Vec<[u8; 3]>,
}

fn share_face(edges: &[(usize, usize, usize); 12], a: usize, b: usize) -> bool {
    let (a0, a1, _) = edges[a];
    let (b0, b1, _) = edges[b];
    (0..3).any(|axis| {
        let bit = 1 << axis;
        let side = a0 & bit;
        a1 & bit == side && b0 & bit == side && b1 & bit == side
    })
}

fn triangulate(edges: &[(usize, usize, usize); 12], poly: &[usize]) -> Vec<[u8; 3]> {
    let n = poly.len();
    let as_u8 = |e: usize| e as u8;
    if n == 3 {
        return vec![[as_u8(poly[0]), as_u8(poly[1]), as_u8(poly[2])]];
    }
    for s in 0..n {
        let clean = (2..n - 1).all(|d| !share_face(edges, poly[s], poly[(s + d) % n]));
        if clean {
            return (1..n - 1)
                .map(|i| [as_u8(poly[s]), as_u8(poly[(s + i) % n]), as_u8(poly[(s + i + 1) % n])])
                .collect();
        }
    }
    (0..n).map(|i| [CENTROID, as_u8(poly[i]), as_u8(poly[(i + 1) % n])]).collect()
}

/// Surface polygons for every corner configuration.
fn case_table() -> &'static Vec<Vec<Polygon>> {
    static TABLE: OnceLock<Vec<Vec<Polygon>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let edges = cube_edges();
        let pos = |c: usize| {
            let o = corner_offset(c);
            Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64)
        };
        let edge_mid = |e: usize| (pos(edges[e].0) + pos(edges[e].1)) * 0.5;
        // Faces as cyclic corner lists with outward normals.
        let mut faces = Vec::new();
        for axis in 0..3 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            for side in 0..2 {
                let corner = |du: usize, dv: usize| (side << axis) | (du << u) | (dv << v);
                let cyc = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
                let mut n = Vec3::zeros();
                n[axis] = if side == 1 { 1.0 } else { -1.0 };
                faces.push((cyc, n));
            }
        }

        (0..256usize)
            .map(|case| {
                let inside = |c: usize| case & (1 << c) != 0;
                let mut next: HashMap<usize, usize> = HashMap::new();
                for (cyc, normal) in &faces {
                    let crossings: Vec<usize> = (0..4).filter(|&k| inside(cyc[k]) != inside(cyc[(k + 1) % 4])).collect();
                    let mut segs: Vec<(usize, usize, Vec3)> = Vec::new();
                    match crossings.len() {
                        0 => {}
                        2 => {
                            let ea = edge_index(&edges, cyc[crossings[0]], cyc[(crossings[0] + 1) % 4]);
                            let eb = edge_index(&edges, cyc[crossings[1]], cyc[(crossings[1] + 1) % 4]);
                            let ins: Vec<Vec3> = cyc.iter().filter(|&&c| inside(c)).map(|&c| pos(c)).collect();
                            let centroid = ins.iter().fold(Vec3::zeros(), |a, p| a + p) / ins.len() as f64;
                            segs.push((ea, eb, centroid));
                        }
                        4 => {
                            for k in 0..4 {
                                if inside(cyc[k]) {
                                    let prev = cyc[(k + 3) % 4];
                                    let nxt = cyc[(k + 1) % 4];
                                    segs.push((
                                        edge_index(&edges, prev, cyc[k]),
                                        edge_index(&edges, cyc[k], nxt),
                                        pos(cyc[k]),
                                    ));
                                }
                            }
                        }
                        _ => unreachable!("odd crossing count on a face"),
                    }
                    for (ea, eb, p_in) in segs {
                        let a = edge_mid(ea);
                        let b = edge_mid(eb);
                        // Inside region on the right when seen from outside the cube.
                        let s = (b - a).cross(&(p_in - a)).dot(normal);
                        let (from, to) = if s < 0.0 { (ea, eb) } else { (eb, ea) };
                        let prev = next.insert(from, to);
                        debug_assert!(prev.is_none());
                    }
                }
                let mut polys = Vec::new();
                let mut starts: Vec<usize> = next.keys().copied().collect();
                starts.sort_unstable();
                let mut used = [false; 12];
                for s in starts {
                    if used[s] {
                        continue;
                    }
                    let mut poly = vec![s];
                    used[s] = true;
                    let mut cur = next[&s];
                    while cur != s {
                        used[cur] = true;
                        poly.push(cur);
                        cur = next[&cur];
                    }
                    polys.push(Polygon {
                        tris: triangulate(&edges, &poly),
                        edges: poly.iter().map(|&e| e as u8).collect(),
                    });
                }
                polys
            })
            .collect()
    })
}

/// Isosurface of `grid` at `iso` in physical coordinates. Values above `iso`
/// are inside; faces are oriented with normals toward lower values.
pub fn marching_cubes(grid: &VoxelGrid, iso: f64) -> Result<TriMesh, MeshError> {
    let g = grid.geometry;
    if g.dims.iter().any(|&d| d < 2) {
        return Err(MeshError::Invalid(format!("grid {:?} needs ≥ 2 voxels per axis", g.dims)));
    }
    let (min, max) = grid.min_max();
    if !(min <= iso && iso < max) {
        return Err(MeshError::EmptySurface { iso, min, max });
    }
    let table = case_table();
    let edges = cube_edges();
    let [nx, ny, nz] = g.dims;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut cache: HashMap<(usize, usize), usize> = HashMap::new();

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corner_idx = |c: usize| {
                    let o = corner_offset(c);
                    g.index(i + o[0], j + o[1], k + o[2])
                };
                let mut case = 0usize;
                for c in 0..CORNERS {
                    if grid.data[corner_idx(c)] > iso {
                        case |= 1 << c;
                    }
                }
                let polys = &table[case];
                if polys.is_empty() {
                    continue;
                }
                let mut vid = [usize::MAX; 13];
                for poly in polys {
                    for &e in &poly.edges {
                        let e = e as usize;
                        if vid[e] == usize::MAX {
                            let (ca, cb, axis) = edges[e];
                            let ia = corner_idx(ca);
                            let va = grid.data[ia];
                            let vb = grid.data[corner_idx(cb)];
                            // A node sitting exactly on the level set is one shared vertex.
                            let key = if va == iso {
                                (ia, NODE)
                            } else if vb == iso {
                                (corner_idx(cb), NODE)
                            } else {
                                (ia, axis)
                            };
                            vid[e] = *cache.entry(key).or_insert_with(|| {
                                let t = (iso - va) / (vb - va);
                                let oa = corner_offset(ca);
                                let ob = corner_offset(cb);
                                let pa = g.world(i + oa[0], j + oa[1], k + oa[2]);
                                let pb = g.world(i + ob[0], j + ob[1], k + ob[2]);
                                vertices.push(pa + (pb - pa) * t);
                                vertices.len() - 1
                            });
                        }
                    }
                    vid[CENTROID as usize] = usize::MAX;
                    for tri in &poly.tris {
                        if tri.contains(&CENTROID) && vid[CENTROID as usize] == usize::MAX {
                            let c = poly.edges.iter().fold(Vec3::zeros(), |acc, &e| acc + vertices[vid[e as usize]])
                                / poly.edges.len() as f64;
                            vertices.push(c);
                            vid[CENTROID as usize] = vertices.len() - 1;
                        }
                        faces.push(tri.map(|e| vid[e as usize]));
                    }
                }
            }
        }
    }
    if faces.is_empty() {
        return Err(MeshError::EmptySurface { iso, min, max });
    }
    let faces = drop_collapsed(faces);
    if faces.is_empty() {
        return Err(MeshError::EmptySurface { iso, min, max });
    }
    // Welded edge vertices are left unreferenced; keep the rest in order.
    let mut used = vec![false; vertices.len()];
    faces.iter().flatten().for_each(|&v| used[v] = true);
    let mut map = vec![usize::MAX; vertices.len()];
    let mut kept = Vec::with_capacity(vertices.len());
    for (i, v) in vertices.into_iter().enumerate() {
        if used[i] {
            map[i] = kept.len();
            kept.push(v);
        }
    }
    let faces = faces.into_iter().map(|f| f.map(|v| map[v])).collect();
    Ok(TriMesh { vertices: kept, faces })
}

/// Removes faces that lost a vertex to welding, and back-to-back pairs on the same triangle.
fn drop_collapsed(faces: Vec<[usize; 3]>) -> Vec<[usize; 3]> {
    let faces: Vec<[usize; 3]> = faces.into_iter().filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2]).collect();
    let mut count: HashMap<[usize; 3], usize> = HashMap::new();
    for f in &faces {
        let mut k = *f;
        k.sort_unstable();
        *count.entry(k).or_default() += 1;
    }
    faces
        .into_iter()
        .filter(|f| {
            let mut k = *f;
            k.sort_unstable();
            count[&k] % 2 == 1
        })
        .collect()
}
