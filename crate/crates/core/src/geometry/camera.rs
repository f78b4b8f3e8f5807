//! Euler-angle camera and perspective projection.
//!
//! Object space is y-up. Camera space has x to the right, y up and z along
//! the viewing direction, so visible points have positive depth.

use serde::{Deserialize, Serialize};

use super::Mesh;
use crate::error::{Error, Result};
use crate::tensor::{Backward, Tensor};

/// Viewpoint as elevation and azimuth in degrees at a fixed distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    #[serde(rename = "elevation_deg")]
    pub elevation: f64,
    #[serde(rename = "azimuth_deg")]
    pub azimuth: f64,
    pub distance: f64,
}

impl CameraPose {
    pub const DEFAULT_DISTANCE: f64 = 2.732;

    /// Validated pose; azimuth is wrapped into `[0, 360)`.
    pub fn new(elevation: f64, azimuth: f64, distance: f64) -> Result<CameraPose> {
        let pose = CameraPose { elevation, azimuth: azimuth.rem_euclid(360.0), distance };
        pose.validate()?;
        Ok(pose)
    }

    /// Elevation 0, azimuth 0 at the default distance.
    pub fn canonical() -> CameraPose {
        CameraPose { elevation: 0.0, azimuth: 0.0, distance: Self::DEFAULT_DISTANCE }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.elevation) {
            return Err(Error::Geometry(format!("elevation {} outside [-90, 90]", self.elevation)));
        }
        if !(0.0..360.0).contains(&self.azimuth) {
            return Err(Error::Geometry(format!("azimuth {} outside [0, 360)", self.azimuth)));
        }
        if !(self.distance > 0.0) || !self.distance.is_finite() {
            return Err(Error::Geometry(format!("camera distance {} must be positive", self.distance)));
        }
        Ok(())
    }

    /// `(sin az, cos az, sin el, cos el)`, the periodic pose embedding.
    pub fn embedding(&self) -> [f64; 4] {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        [az.sin(), az.cos(), el.sin(), el.cos()]
    }

    /// Angle in degrees between the viewing directions of two poses.
    pub fn angular_distance(&self, other: &CameraPose) -> f64 {
        let dir = |p: &CameraPose| {
            let (az, el) = (p.azimuth.to_radians(), p.elevation.to_radians());
            [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()]
        };
        let (a, b) = (dir(self), dir(other));
        let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
        dot.acos().to_degrees()
    }
}

/// Rigid object-to-camera transform for angles given as scalar tensors in
/// radians; differentiable in the vertices and both angles.
///
/// Rotates by azimuth about the vertical axis (object +x turns toward +z),
/// then by elevation about the camera-right axis, then shifts by `distance`
/// along the view axis.
pub fn view_transform_angles(
    mesh: &Mesh,
    elevation: &Tensor,
    azimuth: &Tensor,
    distance: f64,
) -> Result<Mesh> {
    let trig = ViewTrig {
        sin_el: elevation.sin(),
        cos_el: elevation.cos(),
        sin_az: azimuth.sin(),
        cos_az: azimuth.cos(),
    };
    view_transform_trig(mesh, &trig, distance)
}

/// Sines and cosines of a view, as scalar tensors.
#[derive(Debug, Clone)]
pub struct ViewTrig {
    pub sin_el: Tensor,
    pub cos_el: Tensor,
    pub sin_az: Tensor,
    pub cos_az: Tensor,
}

/// [`view_transform_angles`] parameterized by the sines and cosines of the
/// angles, which need not come from an explicit angle.
pub fn view_transform_trig(mesh: &Mesh, trig: &ViewTrig, distance: f64) -> Result<Mesh> {
    let ViewTrig { sin_el: se, cos_el: ce, sin_az: sa, cos_az: ca } = trig;
    let zero = Tensor::scalar(0.0);
    // Row-vector convention: p_cam = p_obj · Mᵀ with M = R_el · R_az.
    // R_az = [[ca, 0, -sa], [0, 1, 0], [sa, 0, ca]]
    // R_el = [[1, 0, 0], [0, ce, se], [0, -se, ce]]
    let m = [
        ca.clone(),
        zero.clone(),
        sa.neg(),
        se.mul(sa)?,
        ce.clone(),
        se.mul(ca)?,
        ce.mul(sa)?,
        se.neg(),
        ce.mul(ca)?,
    ];
    let refs: Vec<&Tensor> = m.iter().collect();
    let rot = Tensor::concat(&refs)?.reshape(&[3, 3])?;
    let rotated = mesh.vertices().matmul(&rot.transpose()?)?;
    let n = mesh.num_vertices();
    let mut shift = vec![0.0; n * 3];
    for row in shift.chunks_mut(3) {
        row[2] = distance;
    }
    mesh.with_vertices(rotated.add(&Tensor::new(shift, &[n, 3])?)?)
}

/// [`view_transform_angles`] with constant angles taken from `pose`.
pub fn view_transform(mesh: &Mesh, pose: &CameraPose) -> Result<Mesh> {
    view_transform_angles(
        mesh,
        &Tensor::scalar(pose.elevation.to_radians()),
        &Tensor::scalar(pose.azimuth.to_radians()),
        pose.distance,
    )
}

/// Pinhole projection to normalized device coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// Half of the viewing angle, in degrees. NDC ±1 corresponds to
    /// `tan(view_angle)` at unit depth.
    pub view_angle_deg: f64,
}

impl Default for Projection {
    fn default() -> Self {
        Projection { view_angle_deg: 30.0 }
    }
}

impl Projection {
    pub fn scale(&self) -> f64 {
        1.0 / self.view_angle_deg.to_radians().tan()
    }
}

struct PerspectiveDivide {
    scale: f64,
}

impl Backward for PerspectiveDivide {
    fn name(&self) -> &'static str {
        "perspective_divide"
    }

    fn backward(&self, inputs: &[Tensor], grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let p = inputs[0].data();
        let g = grad.data();
        let n = p.len() / 3;
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            let (x, y, z) = (p[3 * i], p[3 * i + 1], p[3 * i + 2]);
            let (gx, gy) = (g[2 * i], g[2 * i + 1]);
            out[3 * i] = self.scale * gx / z;
            out[3 * i + 1] = self.scale * gy / z;
            out[3 * i + 2] = -self.scale * (gx * x + gy * y) / (z * z);
        }
        Ok(vec![Some(Tensor::new(out, &[n, 3])?)])
    }

    fn differentiable_backward(&self) -> bool {
        false
    }
}

/// Projects camera-space vertices to `[V, 2]` NDC coordinates (x right,
/// y up). Every vertex must have positive depth.
pub fn project(camera_space: &Mesh, projection: &Projection) -> Result<Tensor> {
    let v = camera_space.vertices();
    let p = v.data();
    let n = camera_space.num_vertices();
    let scale = projection.scale();
    let mut out = vec![0.0; n * 2];
    for i in 0..n {
        let z = p[3 * i + 2];
        if !(z > 0.0) {
            return Err(Error::Geometry(format!("vertex {i} has non-positive depth {z}")));
        }
        out[2 * i] = scale * p[3 * i] / z;
        out[2 * i + 1] = scale * p[3 * i + 1] / z;
    }
    drop(p);
    Ok(Tensor::from_op(out, vec![n, 2], &[v], PerspectiveDivide { scale }))
}
