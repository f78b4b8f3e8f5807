//! Occupancy grids over the canonical `[-1, 1]^3` cube.

use serde::{Deserialize, Serialize};

use super::Mesh;
use crate::error::{Error, Result};

/// `resolution^3` occupancy grid; voxel `(x, y, z)` is stored at
/// `(z * R + y) * R + x` and centered at `-1 + (i + 0.5) * 2 / R`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelGrid {
    resolution: usize,
    occupancy: Vec<bool>,
}

impl VoxelGrid {
    pub fn empty(resolution: usize) -> VoxelGrid {
        VoxelGrid { resolution, occupancy: vec![false; resolution.pow(3)] }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn center(&self, i: usize) -> f64 {
        -1.0 + (i as f64 + 0.5) * 2.0 / self.resolution as f64
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        let r = self.resolution;
        self.occupancy[(z * r + y) * r + x]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let r = self.resolution;
        self.occupancy[(z * r + y) * r + x] = value;
    }

    /// Occupancy of an arbitrary point; false outside the cube.
    pub fn query(&self, p: [f64; 3]) -> bool {
        let r = self.resolution as f64;
        let idx = p.map(|c| ((c + 1.0) * 0.5 * r).floor());
        if idx.iter().any(|&i| i < 0.0 || i >= r) {
            return false;
        }
        self.get(idx[0] as usize, idx[1] as usize, idx[2] as usize)
    }

    pub fn count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.occupancy.len() as f64
    }
}

/// Relative perturbation budget for re-casting rays that graze an edge or
/// vertex.
const JITTERS: [(f64, f64); 5] =
    [(0.0, 0.0), (1.3e-7, 0.7e-7), (-0.9e-7, 1.1e-7), (0.5e-7, -1.7e-7), (-1.9e-7, -0.3e-7)];

/// Barycentric margin below which a hit counts as grazing an edge.
const GRAZE: f64 = 1e-12;

enum Hit {
    Miss,
    At(f64),
    Grazing,
}

/// Intersection of the +x ray through `(y, z)` with a triangle, as the x
/// coordinate of the hit.
fn ray_x(tri: &[[f64; 3]; 3], y: f64, z: f64) -> Hit {
    let [a, b, c] = tri;
    // Edge functions in the yz plane.
    let e = |p: &[f64; 3], q: &[f64; 3]| (q[1] - p[1]) * (z - p[2]) - (q[2] - p[2]) * (y - p[1]);
    let area = (b[1] - a[1]) * (c[2] - a[2]) - (b[2] - a[2]) * (c[1] - a[1]);
    if area.abs() < 1e-300 {
        // Face parallel to the ray; its neighbors carry the crossing.
        return Hit::Miss;
    }
    let (w0, w1, w2) = (e(b, c) / area, e(c, a) / area, e(a, b) / area);
    let tol = GRAZE;
    if w0 < -tol || w1 < -tol || w2 < -tol {
        return Hit::Miss;
    }
    if w0 <= tol || w1 <= tol || w2 <= tol {
        return Hit::Grazing;
    }
    Hit::At(w0 * a[0] + w1 * b[0] + w2 * c[0])
}

/// Marks every voxel whose center is inside the closed mesh, by parity of
/// crossings along +x rays. Rays that graze an edge are re-cast with a
/// small deterministic offset. Geometry outside the cube is ignored.
pub fn voxelize(mesh: &Mesh, resolution: usize) -> Result<VoxelGrid> {
    if resolution == 0 {
        return Err(Error::Geometry("voxel resolution must be positive".into()));
    }
    if !mesh.is_watertight() {
        return Err(Error::Geometry("voxelize requires a watertight mesh".into()));
    }
    let pos = mesh.positions();
    let tris: Vec<[[f64; 3]; 3]> =
        mesh.faces().iter().map(|&[a, b, c]| [pos[a], pos[b], pos[c]]).collect();
    let bounds: Vec<[f64; 4]> = tris
        .iter()
        .map(|t| {
            let (ys, zs) = (t.map(|p| p[1]), t.map(|p| p[2]));
            [
                ys.iter().copied().fold(f64::INFINITY, f64::min),
                ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                zs.iter().copied().fold(f64::INFINITY, f64::min),
                zs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ]
        })
        .collect();

    let mut grid = VoxelGrid::empty(resolution);
    let cell = 2.0 / resolution as f64;
    let mut hits: Vec<f64> = Vec::new();
    for iz in 0..resolution {
        for iy in 0..resolution {
            let (y0, z0) = (grid.center(iy), grid.center(iz));
            let mut resolved = false;
            for &(jy, jz) in &JITTERS {
                let (y, z) = (y0 + jy * cell, z0 + jz * cell);
                hits.clear();
                let mut grazed = false;
                for (t, bb) in tris.iter().zip(&bounds) {
                    if y < bb[0] - 1e-9 || y > bb[1] + 1e-9 || z < bb[2] - 1e-9 || z > bb[3] + 1e-9 {
                        continue;
                    }
                    match ray_x(t, y, z) {
                        Hit::Miss => {}
                        Hit::At(x) => hits.push(x),
                        Hit::Grazing => {
                            grazed = true;
                            break;
                        }
                    }
                }
                if !grazed {
                    resolved = true;
                    break;
                }
            }
            if !resolved {
                log::warn!("voxel ray at ({iy}, {iz}) grazes geometry after all jitters");
            }
            hits.sort_by(f64::total_cmp);
            for ix in 0..resolution {
                let x = grid.center(ix);
                let crossings = hits.partition_point(|&h| h < x);
                if crossings % 2 == 1 {
                    grid.set(ix, iy, iz, true);
                }
            }
        }
    }
    Ok(grid)
}

/// Intersection over union; two empty grids match perfectly.
pub fn voxel_iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.resolution != b.resolution {
        return Err(Error::Geometry(format!(
            "voxel_iou resolution mismatch: {} vs {}",
            a.resolution, b.resolution
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.occupancy.iter().zip(&b.occupancy) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_mesh, icosphere};
    use proptest::prelude::*;

    #[test]
    fn unit_cube_occupies_sixteen_cubed() {
        let g = voxelize(&box_mesh([0.0; 3], [0.5; 3]).unwrap(), 32).unwrap();
        assert_eq!(g.count(), 16 * 16 * 16);
        assert!(g.query([0.0, 0.0, 0.0]));
        assert!(!g.query([0.9, 0.9, 0.9]));
        assert!(!g.query([1.5, 0.0, 0.0]));
    }

    #[test]
    fn sphere_fraction_matches_volume() {
        let g = voxelize(&icosphere(3).unwrap(), 32).unwrap();
        let expected = 4.0 / 3.0 * std::f64::consts::PI / 8.0;
        assert!((g.fraction() - expected).abs() < 0.02, "{}", g.fraction());
    }

    #[test]
    fn shifted_cubes_overlap_one_third() {
        let a = voxelize(&box_mesh([0.0; 3], [0.5; 3]).unwrap(), 32).unwrap();
        let b = voxelize(&box_mesh([0.5, 0.0, 0.0], [0.5; 3]).unwrap(), 32).unwrap();
        let iou = voxel_iou(&a, &b).unwrap();
        assert!((iou - 1.0 / 3.0).abs() <= 2.0 / 32.0, "{iou}");
    }

    #[test]
    fn iou_edge_cases() {
        let e = VoxelGrid::empty(4);
        assert_eq!(voxel_iou(&e, &e).unwrap(), 1.0);
        let mut a = VoxelGrid::empty(4);
        a.set(0, 0, 0, true);
        let mut b = VoxelGrid::empty(4);
        b.set(3, 3, 3, true);
        assert_eq!(voxel_iou(&a, &b).unwrap(), 0.0);
        assert_eq!(voxel_iou(&a, &a).unwrap(), 1.0);
        assert!(voxel_iou(&a, &VoxelGrid::empty(5)).is_err());
    }

    #[test]
    fn open_mesh_rejected() {
        let p = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let open = Mesh::from_positions(&p, vec![[0, 1, 2]]).unwrap();
        assert!(voxelize(&open, 8).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn iou_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 64),
                                     b in prop::collection::vec(any::<bool>(), 64)) {
            let ga = VoxelGrid { resolution: 4, occupancy: a };
            let gb = VoxelGrid { resolution: 4, occupancy: b };
            let ab = voxel_iou(&ga, &gb).unwrap();
            prop_assert_eq!(ab, voxel_iou(&gb, &ga).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(voxel_iou(&ga, &ga).unwrap(), 1.0);
        }
    }
}
