//! Triangle meshes, the icosphere template, camera model, mesh-quality
//! regularizers and voxelization.

mod camera;
pub mod obj;
mod regularizers;
mod voxel;

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

pub use camera::{
    project, view_transform, view_transform_angles, view_transform_trig, CameraPose, Projection, ViewTrig,
};
pub use regularizers::{flatten_loss, laplacian_loss};
pub use voxel::{voxel_iou, voxelize, VoxelGrid};

use crate::error::{Error, Result};
use crate::tensor::{SparseMatrix, Tensor};

/// Face list plus lazily derived adjacency, shared between meshes with the
/// same connectivity.
#[derive(Debug)]
pub struct Connectivity {
    faces: Arc<Vec<[usize; 3]>>,
    num_vertices: usize,
    topology: OnceLock<std::result::Result<Topology, String>>,
}

/// Adjacency derived from a closed 2-manifold face list.
#[derive(Debug, Clone)]
pub struct Topology {
    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub edges: Vec<[usize; 2]>,
    /// The two faces sharing each edge.
    pub edge_faces: Vec<[usize; 2]>,
    /// Sorted neighbor lists.
    pub neighbors: Vec<Vec<usize>>,
    /// `I - A` with `A` the uniform neighbor-averaging operator.
    pub laplacian: Arc<SparseMatrix>,
}

impl Connectivity {
    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Shared handle to the face list.
    pub fn faces_arc(&self) -> Arc<Vec<[usize; 3]>> {
        self.faces.clone()
    }

    /// Adjacency of a closed manifold; fails on boundary or non-manifold
    /// edges and on isolated vertices.
    pub fn topology(&self) -> Result<&Topology> {
        self.topology
            .get_or_init(|| build_topology(&self.faces, self.num_vertices))
            .as_ref()
            .map_err(|e| Error::Geometry(e.clone()))
    }
}

fn build_topology(faces: &[[usize; 3]], n: usize) -> std::result::Result<Topology, String> {
    let mut by_edge: BTreeMap<[usize; 2], Vec<usize>> = BTreeMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            by_edge.entry([a.min(b), a.max(b)]).or_default().push(fi);
        }
    }
    let mut edges = Vec::with_capacity(by_edge.len());
    let mut edge_faces = Vec::with_capacity(by_edge.len());
    let mut neighbors = vec![Vec::new(); n];
    for (e, fs) in by_edge {
        if fs.len() != 2 {
            return Err(format!(
                "edge ({}, {}) has {} adjacent faces; a closed manifold needs 2",
                e[0],
                e[1],
                fs.len()
            ));
        }
        neighbors[e[0]].push(e[1]);
        neighbors[e[1]].push(e[0]);
        edges.push(e);
        edge_faces.push([fs[0], fs[1]]);
    }
    if let Some(v) = neighbors.iter().position(|nb| nb.is_empty()) {
        return Err(format!("vertex {v} is isolated"));
    }
    let mut triplets = Vec::new();
    for (i, nb) in neighbors.iter_mut().enumerate() {
        nb.sort_unstable();
        triplets.push((i, i, 1.0));
        let w = 1.0 / nb.len() as f64;
        triplets.extend(nb.iter().map(|&j| (i, j, -w)));
    }
    let laplacian = Arc::new(SparseMatrix::from_triplets(n, n, triplets).map_err(|e| e.to_string())?);
    Ok(Topology { edges, edge_faces, neighbors, laplacian })
}

/// Vertex positions (`[V, 3]` tensor) over a fixed triangle list with
/// counter-clockwise winding seen from outside.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Tensor,
    connectivity: Arc<Connectivity>,
}

impl Mesh {
    /// Validates indices and rejects degenerate faces.
    pub fn new(vertices: Tensor, faces: Vec<[usize; 3]>) -> Result<Mesh> {
        let n = match *vertices.shape() {
            [n, 3] => n,
            _ => {
                return Err(Error::Geometry(format!(
                    "vertices must be [V, 3], got {:?}",
                    vertices.shape()
                )))
            }
        };
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::Geometry(format!("face {i} {f:?} indexes past {n} vertices")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Geometry(format!("face {i} {f:?} is degenerate")));
            }
        }
        let connectivity =
            Arc::new(Connectivity { faces: Arc::new(faces), num_vertices: n, topology: OnceLock::new() });
        Ok(Mesh { vertices, connectivity })
    }

    pub fn from_positions(positions: &[[f64; 3]], faces: Vec<[usize; 3]>) -> Result<Mesh> {
        let data: Vec<f64> = positions.iter().flatten().copied().collect();
        let n = positions.len();
        if n == 0 {
            return Err(Error::Geometry("mesh without vertices".into()));
        }
        Mesh::new(Tensor::new(data, &[n, 3])?, faces)
    }

    /// Same connectivity, new vertex tensor of identical shape.
    pub fn with_vertices(&self, vertices: Tensor) -> Result<Mesh> {
        if vertices.shape() != self.vertices.shape() {
            return Err(Error::Shape(format!(
                "replacement vertices {:?} differ from {:?}",
                vertices.shape(),
                self.vertices.shape()
            )));
        }
        Ok(Mesh { vertices, connectivity: self.connectivity.clone() })
    }

    pub fn vertices(&self) -> &Tensor {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        self.connectivity.faces()
    }

    pub fn connectivity(&self) -> &Arc<Connectivity> {
        &self.connectivity
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.shape()[0]
    }

    pub fn num_faces(&self) -> usize {
        self.faces().len()
    }

    pub fn topology(&self) -> Result<&Topology> {
        self.connectivity.topology()
    }

    /// Watertight and 2-manifold: every edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        self.num_faces() > 0 && self.topology().is_ok()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.vertices.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    /// A constant copy of this mesh cut off from the graph.
    pub fn detach(&self) -> Mesh {
        Mesh { vertices: self.vertices.detach(), connectivity: self.connectivity.clone() }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let p = self.positions();
        let n = p.len() as f64;
        let mut c = [0.0; 3];
        for v in &p {
            for k in 0..3 {
                c[k] += v[k] / n;
            }
        }
        c
    }

    /// Translates and uniformly scales so the bounding-box center sits at
    /// the origin and the farthest vertex lies at distance `radius`.
    pub fn normalized(&self, radius: f64) -> Result<Mesh> {
        let p = self.positions();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &p {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        let c = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
        let r = p
            .iter()
            .map(|v| ((v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2) + (v[2] - c[2]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        if r <= 0.0 {
            return Err(Error::Geometry("cannot normalize a zero-extent mesh".into()));
        }
        let s = radius / r;
        let moved: Vec<[f64; 3]> = p.iter().map(|v| [0, 1, 2].map(|k| (v[k] - c[k]) * s)).collect();
        Mesh::from_positions(&moved, self.faces().to_vec())
    }

    /// Concatenates vertex and face lists (no boolean union).
    pub fn merge(parts: &[Mesh]) -> Result<Mesh> {
        let mut pos = Vec::new();
        let mut faces = Vec::new();
        for m in parts {
            let base = pos.len();
            pos.extend(m.positions());
            faces.extend(m.faces().iter().map(|f| f.map(|v| v + base)));
        }
        Mesh::from_positions(&pos, faces)
    }
}

/// Deforms `template` by per-vertex offsets; differentiable in `offsets`.
pub fn apply_offsets(template: &Mesh, offsets: &Tensor) -> Result<Mesh> {
    if offsets.shape() != template.vertices().shape() {
        return Err(Error::Shape(format!(
            "offsets {:?} do not match template vertices {:?}",
            offsets.shape(),
            template.vertices().shape()
        )));
    }
    template.with_vertices(template.vertices().add(offsets)?)
}

/// Unit icosphere: the icosahedron subdivided `subdivisions` times with
/// every vertex projected back onto the unit sphere.
pub fn icosphere(subdivisions: u32) -> Result<Mesh> {
    if subdivisions > 5 {
        return Err(Error::Geometry(format!("icosphere subdivisions {subdivisions} exceeds 5")));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut pos: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let unit = |p: [f64; 3]| {
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        [p[0] / n, p[1] / n, p[2] / n]
    };
    for p in pos.iter_mut() {
        *p = unit(*p);
    }
    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: usize, b: usize, pos: &mut Vec<[f64; 3]>| -> usize {
            *midpoint.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let (p, q) = (pos[a], pos[b]);
                pos.push(unit([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0]));
                pos.len() - 1
            })
        };
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut pos);
            let bc = mid(b, c, &mut pos);
            let ca = mid(c, a, &mut pos);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    Mesh::from_positions(&pos, faces)
}

/// Closed axis-aligned box with outward counter-clockwise faces.
pub fn box_mesh(center: [f64; 3], half: [f64; 3]) -> Result<Mesh> {
    let mut pos = Vec::with_capacity(8);
    for i in 0..8 {
        let s = |bit: usize| if i & bit != 0 { 1.0 } else { -1.0 };
        pos.push([
            center[0] + s(1) * half[0],
            center[1] + s(2) * half[1],
            center[2] + s(4) * half[2],
        ]);
    }
    // Vertex i has x bit 1, y bit 2, z bit 4.
    let faces = vec![
        [0, 4, 6], [0, 6, 2], // -x
        [1, 3, 7], [1, 7, 5], // +x
        [0, 1, 5], [0, 5, 4], // -y
        [2, 6, 7], [2, 7, 3], // +y
        [0, 2, 3], [0, 3, 1], // -z
        [4, 5, 7], [4, 7, 6], // +z
    ];
    Mesh::from_positions(&pos, faces)
}

/// Signed volume by the divergence theorem; positive for outward winding.
pub fn signed_volume(mesh: &Mesh) -> f64 {
    let p = mesh.positions();
    mesh.faces()
        .iter()
        .map(|&[a, b, c]| {
            let (x, y, z) = (p[a], p[b], p[c]);
            (x[0] * (y[1] * z[2] - y[2] * z[1]) - x[1] * (y[0] * z[2] - y[2] * z[0])
                + x[2] * (y[0] * z[1] - y[1] * z[0]))
                / 6.0
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        for n in 0..=3u32 {
            let m = icosphere(n).unwrap();
            assert_eq!(m.num_vertices(), 10 * 4usize.pow(n) + 2);
            assert_eq!(m.num_faces(), 20 * 4usize.pow(n));
            let topo = m.topology().unwrap();
            let euler = m.num_vertices() as i64 - topo.edges.len() as i64 + m.num_faces() as i64;
            assert_eq!(euler, 2);
        }
        assert_eq!(icosphere(2).unwrap().num_vertices(), 162);
        assert_eq!(icosphere(2).unwrap().num_faces(), 320);
        assert!(icosphere(6).is_err());
    }

    #[test]
    fn icosphere_vertices_on_unit_sphere_and_outward() {
        let m = icosphere(3).unwrap();
        for p in m.positions() {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
        assert!(signed_volume(&m) > 4.0);
        assert!(m.is_watertight());
    }

    #[test]
    fn box_is_closed_and_outward() {
        let b = box_mesh([0.0; 3], [0.5; 3]).unwrap();
        assert!(b.is_watertight());
        assert!((signed_volume(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_faces_rejected() {
        let p = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(Mesh::from_positions(&p, vec![[0, 1, 3]]).is_err());
        assert!(Mesh::from_positions(&p, vec![[0, 1, 1]]).is_err());
        let open = Mesh::from_positions(&p, vec![[0, 1, 2]]).unwrap();
        assert!(!open.is_watertight());
    }

    #[test]
    fn offsets_identity_and_translation() {
        let m = icosphere(1).unwrap();
        let zero = Tensor::zeros(m.vertices().shape());
        assert_eq!(apply_offsets(&m, &zero).unwrap().positions(), m.positions());
        let mut shift = vec![0.0; m.num_vertices() * 3];
        for v in shift.chunks_mut(3) {
            v[0] = 0.1;
        }
        let moved = apply_offsets(&m, &Tensor::new(shift, m.vertices().shape()).unwrap()).unwrap();
        let (c0, c1) = (m.centroid(), moved.centroid());
        assert!((c1[0] - c0[0] - 0.1).abs() < 1e-12);
        assert!((c1[1] - c0[1]).abs() < 1e-12 && (c1[2] - c0[2]).abs() < 1e-12);
        assert!(apply_offsets(&m, &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn normalization_hits_unit_radius() {
        let b = box_mesh([0.3, -0.2, 0.1], [0.2, 0.5, 0.1]).unwrap().normalized(1.0).unwrap();
        let rmax = b
            .positions()
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        assert!((rmax - 1.0).abs() < 1e-12);
    }
}
