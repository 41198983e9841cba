//! Minimal NRRD subset: 3-D `double` volumes, raw little-endian encoding,
//! axis-aligned space directions.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Geometry, VolumeError, VoxelGrid};

const MAGIC: &str = "NRRD0004";
const FIELDS: [&str; 7] =
    ["type", "dimension", "sizes", "space directions", "space origin", "encoding", "endian"];

pub fn save_volume(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let bytes = write_nrrd(grid);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<VoxelGrid, VolumeError> {
    let bytes = fs::read(path)?;
    read_nrrd(&bytes)
}

pub fn write_nrrd(grid: &VoxelGrid) -> Vec<u8> {
    let g = &grid.geometry;
    let [nx, ny, nz] = g.dims;
    let [sx, sy, sz] = g.spacing;
    let [ox, oy, oz] = g.origin;
    let header = format!(
        "{MAGIC}\ntype: double\ndimension: 3\nsizes: {nx} {ny} {nz}\n\
         space directions: ({sx},0,0) (0,{sy},0) (0,0,{sz})\n\
         space origin: ({ox},{oy},{oz})\nencoding: raw\nendian: little\n\n"
    );
    let mut out = Vec::with_capacity(header.len() + 8 * grid.data.len());
    out.extend_from_slice(header.as_bytes());
    for v in &grid.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_nrrd(bytes: &[u8]) -> Result<VoxelGrid, VolumeError> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<String, VolumeError> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| VolumeError::Header("unterminated header".into()))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| VolumeError::Header("header is not utf-8".into()))?
            .trim_end_matches('\r')
            .to_string();
        *pos += end + 1;
        Ok(line)
    };

    let magic = next_line(&mut pos)?;
    if magic != MAGIC {
        return Err(VolumeError::Header(format!("bad magic `{magic}`")));
    }
    let mut fields: HashMap<String, String> = HashMap::new();
    loop {
        let line = next_line(&mut pos)?;
        if line.is_empty() {
            break;
        }
        if line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| VolumeError::Header(format!("malformed line `{line}`")))?;
        let key = key.trim().to_string();
        if fields.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(VolumeError::DuplicateField(key));
        }
    }
    for f in FIELDS {
        if !fields.contains_key(f) {
            return Err(VolumeError::MissingField(f.into()));
        }
    }
    expect_value(&fields, "type", &["double"])?;
    expect_value(&fields, "dimension", &["3"])?;
    expect_value(&fields, "encoding", &["raw"])?;
    expect_value(&fields, "endian", &["little"])?;

    let dims = parse_sizes(&fields["sizes"])?;
    let dirs = parse_vectors(&fields["space directions"], 3)?;
    let mut spacing = [0.0; 3];
    for (a, dir) in dirs.iter().enumerate() {
        for (b, &c) in dir.iter().enumerate() {
            if a != b && c != 0.0 {
                return Err(VolumeError::Unsupported {
                    field: "space directions".into(),
                    value: fields["space directions"].clone(),
                });
            }
        }
        spacing[a] = dir[a];
    }
    let origin = parse_vectors(&fields["space origin"], 1)?[0];
    let geometry = Geometry::new(dims, spacing, origin)?;

    let payload = &bytes[pos..];
    let expected = geometry.len() * 8;
    if payload.len() != expected {
        return Err(VolumeError::ByteCount { expected, actual: payload.len() });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    VoxelGrid::new(geometry, data)
}

fn expect_value(
    fields: &HashMap<String, String>,
    key: &str,
    allowed: &[&str],
) -> Result<(), VolumeError> {
    let v = &fields[key];
    if allowed.contains(&v.as_str()) {
        Ok(())
    } else {
        Err(VolumeError::Unsupported { field: key.into(), value: v.clone() })
    }
}

fn parse_sizes(s: &str) -> Result<[usize; 3], VolumeError> {
    let parts: Vec<usize> = s
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| VolumeError::Header(format!("bad size `{t}`"))))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| VolumeError::Header(format!("sizes must have 3 entries: `{s}`")))
}

fn parse_vectors(s: &str, count: usize) -> Result<Vec<[f64; 3]>, VolumeError> {
    let vecs: Vec<[f64; 3]> = s
        .split_whitespace()
        .map(|tok| {
            let inner = tok
                .strip_prefix('(')
                .and_then(|t| t.strip_suffix(')'))
                .ok_or_else(|| VolumeError::Header(format!("bad vector `{tok}`")))?;
            let comps: Vec<f64> = inner
                .split(',')
                .map(|c| c.trim().parse().map_err(|_| VolumeError::Header(format!("bad number `{c}`"))))
                .collect::<Result<_, _>>()?;
            comps
                .try_into()
                .map_err(|_| VolumeError::Header(format!("vector `{tok}` needs 3 components")))
        })
        .collect::<Result<_, _>>()?;
    if vecs.len() != count {
        return Err(VolumeError::Header(format!("expected {count} vectors in `{s}`")));
    }
    Ok(vecs)
}
