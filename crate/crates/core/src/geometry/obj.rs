//! Minimal ASCII Wavefront OBJ: `v x y z` and `f i j k` (1-based) records.

use std::fmt::Write as _;
use std::path::Path;

use super::Mesh;
use crate::error::{Error, Result};

/// Serializes positions with full round-trip precision.
pub fn to_obj_string(mesh: &Mesh) -> String {
    let mut out = String::new();
    for p in mesh.positions() {
        let _ = writeln!(out, "v {:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

/// Parses vertices and triangular faces. Face entries may carry `/vt/vn`
/// suffixes, which are ignored; other record types are skipped.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut pos = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let bad = |what: &str| Error::Geometry(format!("obj line {}: {what}", lineno + 1));
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>().map_err(|_| bad("bad vertex coordinate")))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                pos.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|s| {
                        let head = s.split('/').next().unwrap_or("");
                        match head.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(bad("face indices must be positive integers")),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(bad("only triangular faces are supported"));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Mesh::from_positions(&pos, faces)
}

pub fn write_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(&path, to_obj_string(mesh)).map_err(|e| Error::io(&path, e))
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_obj(&text)
}
