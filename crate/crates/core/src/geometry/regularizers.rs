//! Laplacian smoothness and dihedral flatness penalties.

use super::Mesh;
use crate::error::Result;
use crate::tensor::Tensor;

/// Mean over vertices of `|v_i - mean(neighbors(v_i))|^2`.
pub fn laplacian_loss(mesh: &Mesh) -> Result<Tensor> {
    let topo = mesh.topology()?;
    let delta = mesh.vertices().sparse_left_matmul(&topo.laplacian)?;
    Ok(delta.square().sum().scale(1.0 / mesh.num_vertices() as f64))
}

/// Mean over edges of `(cos θ + 1)^2`, θ the dihedral angle between the two
/// faces meeting at the edge (π for coplanar faces).
pub fn flatten_loss(mesh: &Mesh) -> Result<Tensor> {
    let topo = mesh.topology()?;
    let faces = mesh.faces();
    let col = |k: usize| faces.iter().map(|f| f[k]).collect::<Vec<_>>();
    let v = mesh.vertices();
    let a = v.gather_rows(&col(0))?;
    let b = v.gather_rows(&col(1))?;
    let c = v.gather_rows(&col(2))?;
    let normals = b.sub(&a)?.cross_rows(&c.sub(&a)?)?;

    let first: Vec<usize> = topo.edge_faces.iter().map(|e| e[0]).collect();
    let second: Vec<usize> = topo.edge_faces.iter().map(|e| e[1]).collect();
    let n1 = normals.gather_rows(&first)?;
    let n2 = normals.gather_rows(&second)?;
    let dot = n1.mul(&n2)?.row_sum()?;
    let norms = n1.square().row_sum()?.mul(&n2.square().row_sum()?)?.add_scalar(1e-24).sqrt()?;
    // cos θ = -cos(angle between outward normals).
    let cos_dihedral = dot.div(&norms)?.neg();
    Ok(cos_dihedral.add_scalar(1.0).square().mean())
}
