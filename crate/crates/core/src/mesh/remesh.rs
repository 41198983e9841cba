//! Uniform remeshing by contract: isotropic split / collapse / flip /
//! tangential relaxation, with every vertex projected back onto the input
//! surface after each relaxation sweep.

use std::collections::HashMap;

use super::{MeshError, TriMesh, TriangleBvh};
use crate::volume::Vec3;

const MAX_ROUNDS: usize = 6;
const ITERATIONS: usize = 5;

/// Remesh a watertight surface to roughly `target_vertex_count` vertices with
/// near-uniform edge lengths.
pub fn remesh_uniform(mesh: &TriMesh, target_vertex_count: usize) -> Result<TriMesh, MeshError> {
    if target_vertex_count < 100 {
        return Err(MeshError::Invalid(format!("target vertex count {target_vertex_count} < 100")));
    }
    if !mesh.is_watertight() {
        return Err(MeshError::NotWatertight);
    }
    let reference = mesh.compact();
    let bvh = TriangleBvh::new(&reference);
    let area = reference.area();
    let target = target_vertex_count as f64;
    let mut length = (2.0 * area / (3f64.sqrt() * target)).sqrt();

    let mut work = Work::from_mesh(&reference);
    let mut best: Option<(f64, TriMesh)> = None;
    for _ in 0..MAX_ROUNDS {
        for _ in 0..ITERATIONS {
            work.split_long(4.0 / 3.0 * length);
            work.collapse_short(4.0 / 5.0 * length, 4.0 / 3.0 * length);
            work.equalize_valence();
            work.relax(&bvh);
        }
        let out = work.to_mesh();
        let n = out.vertex_count() as f64;
        let miss = (n - target).abs() / target;
        if best.as_ref().map_or(true, |(m, _)| miss < *m) {
            best = Some((miss, out));
        }
        if miss < 0.04 {
            break;
        }
        length *= (n / target).sqrt();
    }
    let (_, out) = best.expect("at least one round");
    Ok(out)
}

struct Work {
    pos: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    alive: Vec<bool>,
}

type EdgeMap = HashMap<(usize, usize), Vec<usize>>;

impl Work {
    fn from_mesh(m: &TriMesh) -> Self {
        Self { pos: m.vertices.clone(), faces: m.faces.clone(), alive: vec![true; m.faces.len()] }
    }

    fn to_mesh(&self) -> TriMesh {
        let faces = self.faces.iter().zip(&self.alive).filter(|(_, &a)| a).map(|(f, _)| *f).collect();
        TriMesh { vertices: self.pos.clone(), faces }.compact()
    }

    fn edge_map(&self) -> EdgeMap {
        let mut map: EdgeMap = HashMap::with_capacity(self.faces.len() * 2);
        for (fi, f) in self.faces.iter().enumerate() {
            if !self.alive[fi] {
                continue;
            }
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                map.entry((a.min(b), a.max(b))).or_default().push(fi);
            }
        }
        map
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.pos.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            if !self.alive[fi] {
                continue;
            }
            for e in 0..3 {
                nb[f[e]].push(f[(e + 1) % 3]);
                nb[f[(e + 1) % 3]].push(f[e]);
            }
        }
        for l in &mut nb {
            l.sort_unstable();
            l.dedup();
        }
        nb
    }

    fn vertex_faces(&self) -> Vec<Vec<usize>> {
        let mut vf = vec![Vec::new(); self.pos.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            if self.alive[fi] {
                for &v in f {
                    vf[v].push(fi);
                }
            }
        }
        vf
    }

    fn len(&self, a: usize, b: usize) -> f64 {
        (self.pos[a] - self.pos[b]).norm()
    }

    fn normal(&self, f: &[usize; 3]) -> Vec3 {
        (self.pos[f[1]] - self.pos[f[0]]).cross(&(self.pos[f[2]] - self.pos[f[0]]))
    }

    /// Rotate face so that the directed edge `a → b` comes first; returns the third vertex.
    fn opposite(f: &[usize; 3], a: usize, b: usize) -> Option<usize> {
        (0..3).find(|&e| f[e] == a && f[(e + 1) % 3] == b).map(|e| f[(e + 2) % 3])
    }

    fn split_long(&mut self, high: f64) {
        loop {
            let map = self.edge_map();
            let mut long: Vec<((usize, usize), f64)> = map
                .keys()
                .map(|&(a, b)| ((a, b), self.len(a, b)))
                .filter(|&(_, l)| l > high)
                .collect();
            if long.is_empty() {
                return;
            }
            long.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            let mut touched = vec![false; self.faces.len()];
            let mut any = false;
            for ((a, b), _) in long {
                let fs = &map[&(a, b)];
                if fs.len() != 2 || fs.iter().any(|&f| touched[f]) {
                    continue;
                }
                let (mut f_ab, mut f_ba) = (fs[0], fs[1]);
                if Self::opposite(&self.faces[f_ab], a, b).is_none() {
                    std::mem::swap(&mut f_ab, &mut f_ba);
                }
                let (Some(c), Some(d)) =
                    (Self::opposite(&self.faces[f_ab], a, b), Self::opposite(&self.faces[f_ba], b, a))
                else {
                    continue;
                };
                let m = self.pos.len();
                self.pos.push((self.pos[a] + self.pos[b]) * 0.5);
                self.faces[f_ab] = [a, m, c];
                self.faces[f_ba] = [b, m, d];
                self.faces.push([m, b, c]);
                self.faces.push([m, a, d]);
                self.alive.extend_from_slice(&[true, true]);
                touched[f_ab] = true;
                touched[f_ba] = true;
                any = true;
            }
            if !any {
                return;
            }
        }
    }

    fn collapse_short(&mut self, low: f64, high: f64) {
        for _ in 0..10 {
            let map = self.edge_map();
            let nb = self.neighbors();
            let vf = self.vertex_faces();
            let mut short: Vec<((usize, usize), f64)> = map
                .keys()
                .map(|&(a, b)| ((a, b), self.len(a, b)))
                .filter(|&(_, l)| l < low)
                .collect();
            if short.is_empty() {
                return;
            }
            short.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
            let mut touched = vec![false; self.pos.len()];
            let mut any = false;
            for ((a, b), _) in short {
                if touched[a] || touched[b] {
                    continue;
                }
                let fs = &map[&(a, b)];
                if fs.len() != 2 {
                    continue;
                }
                let common: Vec<usize> = nb[a].iter().filter(|v| nb[b].binary_search(v).is_ok()).copied().collect();
                if common.len() != 2 || common.iter().any(|&c| nb[c].len() <= 3) {
                    continue;
                }
                if nb[a].len() + nb[b].len() < 8 {
                    continue;
                }
                let target = (self.pos[a] + self.pos[b]) * 0.5;
                let ring_ok = nb[a].iter().chain(&nb[b]).filter(|&&v| v != a && v != b).all(|&v| (self.pos[v] - target).norm() < high);
                if !ring_ok {
                    continue;
                }
                // Reject collapses that flip a surviving face.
                let flips = vf[a].iter().chain(&vf[b]).any(|&fi| {
                    let f = self.faces[fi];
                    if f.contains(&a) && f.contains(&b) {
                        return false;
                    }
                    let before = self.normal(&f);
                    let moved = f.map(|v| if v == a || v == b { usize::MAX } else { v });
                    let p = |v: usize| if v == usize::MAX { target } else { self.pos[v] };
                    let after = (p(moved[1]) - p(moved[0])).cross(&(p(moved[2]) - p(moved[0])));
                    after.dot(&before) <= 0.2 * before.norm() * after.norm()
                });
                if flips {
                    continue;
                }
                for &fi in fs {
                    self.alive[fi] = false;
                }
                for &fi in &vf[b] {
                    if self.alive[fi] {
                        for v in self.faces[fi].iter_mut() {
                            if *v == b {
                                *v = a;
                            }
                        }
                    }
                }
                self.pos[a] = target;
                for &v in nb[a].iter().chain(&nb[b]) {
                    touched[v] = true;
                }
                touched[a] = true;
                touched[b] = true;
                any = true;
            }
            if !any {
                return;
            }
        }
    }

    fn equalize_valence(&mut self) {
        for _ in 0..3 {
            let map = self.edge_map();
            let nb = self.neighbors();
            let mut valence: Vec<i64> = nb.iter().map(|l| l.len() as i64).collect();
            let mut touched = vec![false; self.faces.len()];
            let mut keys: Vec<(usize, usize)> = map.keys().copied().collect();
            keys.sort_unstable();
            let mut any = false;
            for (a, b) in keys {
                let fs = &map[&(a, b)];
                if fs.len() != 2 || touched[fs[0]] || touched[fs[1]] {
                    continue;
                }
                let (mut f_ab, mut f_ba) = (fs[0], fs[1]);
                if Self::opposite(&self.faces[f_ab], a, b).is_none() {
                    std::mem::swap(&mut f_ab, &mut f_ba);
                }
                let (Some(c), Some(d)) =
                    (Self::opposite(&self.faces[f_ab], a, b), Self::opposite(&self.faces[f_ba], b, a))
                else {
                    continue;
                };
                if c == d || nb[c].binary_search(&d).is_ok() || valence[a] <= 3 || valence[b] <= 3 {
                    continue;
                }
                let dev = |v: [i64; 4]| v.iter().map(|x| (x - 6).abs()).sum::<i64>();
                let before = dev([valence[a], valence[b], valence[c], valence[d]]);
                let after = dev([valence[a] - 1, valence[b] - 1, valence[c] + 1, valence[d] + 1]);
                if after >= before {
                    continue;
                }
                let n1 = [a, d, c];
                let n2 = [d, b, c];
                let old = self.normal(&self.faces[f_ab]) + self.normal(&self.faces[f_ba]);
                let (m1, m2) = (self.normal(&n1), self.normal(&n2));
                if m1.dot(&old) <= 0.0 || m2.dot(&old) <= 0.0 || m1.dot(&m2) <= 0.5 * m1.norm() * m2.norm() {
                    continue;
                }
                self.faces[f_ab] = n1;
                self.faces[f_ba] = n2;
                valence[a] -= 1;
                valence[b] -= 1;
                valence[c] += 1;
                valence[d] += 1;
                touched[f_ab] = true;
                touched[f_ba] = true;
                any = true;
            }
            if !any {
                return;
            }
        }
    }

    fn relax(&mut self, reference: &TriangleBvh) {
        let nb = self.neighbors();
        let vf = self.vertex_faces();
        let mut next = self.pos.clone();
        for (v, ring) in nb.iter().enumerate() {
            if ring.is_empty() {
                continue;
            }
            let centroid = ring.iter().fold(Vec3::zeros(), |acc, &w| acc + self.pos[w]) / ring.len() as f64;
            let n = vf[v].iter().fold(Vec3::zeros(), |acc, &f| acc + self.normal(&self.faces[f]));
            let len = n.norm();
            let moved = if len > 0.0 {
                let n = n / len;
                centroid + n * n.dot(&(self.pos[v] - centroid))
            } else {
                centroid
            };
            next[v] = reference.closest_point(&moved).map_or(moved, |c| c.point);
        }
        // Keep the previous position where the move would flip an incident face.
        for (v, faces) in vf.iter().enumerate() {
            let flips = faces.iter().any(|&fi| {
                let f = self.faces[fi];
                let before = self.normal(&f);
                let p = |w: usize| if w == v { next[v] } else { self.pos[w] };
                let after = (p(f[1]) - p(f[0])).cross(&(p(f[2]) - p(f[0])));
                after.dot(&before) <= 0.0
            });
            if !flips {
                self.pos[v] = next[v];
            }
        }
    }
}
