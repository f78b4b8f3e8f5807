//! Procedural shape categories built from primitives with disjoint
//! interiors, so every result is a closed mesh whose inside is well defined.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_mesh, icosphere, Mesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    BoxStack,
    EllipsoidBlend,
    TableLike,
    ChairLike,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::BoxStack, Category::EllipsoidBlend, Category::TableLike, Category::ChairLike];

    pub fn name(self) -> &'static str {
        match self {
            Category::BoxStack => "box_stack",
            Category::EllipsoidBlend => "ellipsoid_blend",
            Category::TableLike => "table_like",
            Category::ChairLike => "chair_like",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Category> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category `{s}`")))
    }
}

/// Axis-aligned ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|k| ((p[k] - self.center[k]) / self.axes[k]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Distance from the origin to the surface along unit direction `u`.
    /// The origin must lie inside.
    fn radial(&self, u: [f64; 3]) -> f64 {
        // |(t·u − c) / axes|² = 1 as a quadratic in t.
        let (mut a, mut b, mut c) = (0.0, 0.0, -1.0);
        for k in 0..3 {
            let (uk, ck) = (u[k] / self.axes[k], self.center[k] / self.axes[k]);
            a += uk * uk;
            b -= 2.0 * uk * ck;
            c += ck * ck;
        }
        (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
    }
}

/// Surface of a union of ellipsoids that all contain the origin: each
/// icosphere vertex moves to the farthest ellipsoid surface along its ray.
pub fn ellipsoid_union_mesh(parts: &[Ellipsoid], subdivisions: u32) -> Result<Mesh> {
    if parts.is_empty() || parts.iter().any(|e| !e.contains([0.0; 3])) {
        return Err(Error::Geometry("every ellipsoid must contain the origin".into()));
    }
    let sphere = icosphere(subdivisions)?;
    let pos: Vec<[f64; 3]> = sphere
        .positions()
        .into_iter()
        .map(|u| {
            let r = parts.iter().map(|e| e.radial(u)).fold(0.0, f64::max);
            u.map(|x| x * r)
        })
        .collect();
    Mesh::from_positions(&pos, sphere.faces().to_vec())
}

/// The two ellipsoids of an `ellipsoid_blend` shape before normalization.
pub fn blend_ellipsoids(rng: &mut impl Rng, jitter: f64) -> [Ellipsoid; 2] {
    let mut j = |x: f64| x * (1.0 + rng.gen_range(-jitter..=jitter));
    let body = Ellipsoid { center: [0.0; 3], axes: [j(0.6), j(0.35), j(0.4)] };
    let head = Ellipsoid { center: [j(0.15), j(0.25), 0.0], axes: [j(0.3), j(0.55), j(0.3)] };
    [body, head]
}

/// A random shape of `category`, normalized to the unit bounding sphere.
/// Extents are scaled by independent factors in `1 ± jitter`.
pub fn gen_shape(category: Category, rng: &mut impl Rng, jitter: f64) -> Result<Mesh> {
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::Config(format!("jitter {jitter} outside [0, 1)")));
    }
    let mesh = match category {
        Category::BoxStack => {
            let mut j = |x: f64| x * (1.0 + rng.gen_range(-jitter..=jitter));
            let base = [j(0.6), j(0.25), j(0.5)];
            let top = [j(0.35), j(0.25), j(0.3)];
            let shift = j(0.15);
            Mesh::merge(&[
                box_mesh([0.0, 0.0, 0.0], base)?,
                box_mesh([shift, base[1] + top[1], 0.0], top)?,
            ])?
        }
        Category::EllipsoidBlend => ellipsoid_union_mesh(&blend_ellipsoids(rng, jitter), 3)?,
        Category::TableLike => {
            let mut j = |x: f64| x * (1.0 + rng.gen_range(-jitter..=jitter));
            let top = [j(0.7), j(0.06), j(0.45)];
            let leg = [j(0.06), j(0.4), j(0.06)];
            let inset = j(0.08);
            let mut parts = vec![box_mesh([0.0, leg[1] + top[1], 0.0], top)?];
            parts.extend(legs(top, leg, inset)?);
            Mesh::merge(&parts)?
        }
        Category::ChairLike => {
            let mut j = |x: f64| x * (1.0 + rng.gen_range(-jitter..=jitter));
            let seat = [j(0.35), j(0.05), j(0.35)];
            let leg = [j(0.05), j(0.3), j(0.05)];
            let back = [seat[0], j(0.35), j(0.05)];
            let inset = j(0.04);
            let seat_y = leg[1] + seat[1];
            let mut parts = vec![
                box_mesh([0.0, seat_y, 0.0], seat)?,
                box_mesh([0.0, seat_y + seat[1] + back[1], back[2] - seat[2]], back)?,
            ];
            parts.extend(legs(seat, leg, inset)?);
            Mesh::merge(&parts)?
        }
    };
    mesh.normalized(1.0)
}

/// Four legs standing on y = 0 under the corners of a slab.
fn legs(slab: [f64; 3], leg: [f64; 3], inset: f64) -> Result<Vec<Mesh>> {
    let (x, z) = (slab[0] - leg[0] - inset, slab[2] - leg[2] - inset);
    [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
        .into_iter()
        .map(|(sx, sz)| box_mesh([sx * x, 0.0, sz * z], leg))
        .collect()
}
