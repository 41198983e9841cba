//! Wavefront OBJ with `v` and triangular `f` records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{MeshError, TriMesh};
use crate::volume::Vec3;

pub fn write_obj(mesh: &TriMesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 48 + mesh.faces.len() * 24);
    for v in &mesh.vertices {
        // 9 significant digits.
        let _ = writeln!(s, "v {:.8e} {:.8e} {:.8e}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn read_obj(text: &str) -> Result<TriMesh, MeshError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut face_lines = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<f64> = toks
                    .take(3)
                    .map(|t| t.parse().map_err(|_| MeshError::Parse { line, msg: format!("bad number `{t}`") }))
                    .collect::<Result<_, _>>()?;
                if c.len() != 3 {
                    return Err(MeshError::Parse { line, msg: "vertex needs 3 coordinates".into() });
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<i64> = toks
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        head.parse().map_err(|_| MeshError::Parse { line, msg: format!("bad index `{t}`") })
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(MeshError::NonTriangle { line, count: idx.len() });
                }
                faces.push([idx[0], idx[1], idx[2]]);
                face_lines.push(line);
            }
            _ => {}
        }
    }
    let n = vertices.len() as i64;
    let faces = faces
        .into_iter()
        .zip(face_lines)
        .map(|(f, line)| {
            let mut out = [0usize; 3];
            for (o, &i) in out.iter_mut().zip(&f) {
                if i < 1 || i > n {
                    return Err(MeshError::Parse { line, msg: format!("index {i} out of range 1..={n}") });
                }
                *o = (i - 1) as usize;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    TriMesh::new(vertices, faces)
}

pub fn save_obj(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    fs::write(path, write_obj(mesh))?;
    Ok(())
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriMesh, MeshError> {
    read_obj(&fs::read_to_string(path)?)
}
