//! Soft silhouette rasterization with analytic gradients to the projected
//! vertices.

use std::sync::Arc;

use super::pixel_center;
use crate::error::{Error, Result};
use crate::tensor::ops::{sigmoid, softplus};
use crate::tensor::{Backward, Tensor};

/// Faces with `δ·d²/σ` below this are skipped in the forward pass; their
/// influence is below `e^-50`.
const FORWARD_CUTOFF: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftSettings {
    pub resolution: usize,
    pub sigma: f64,
    /// Face influences below this are ignored in the backward pass.
    pub grad_cutoff: f64,
}

impl SoftSettings {
    pub fn new(resolution: usize, sigma: f64) -> SoftSettings {
        SoftSettings { resolution, sigma, grad_cutoff: 1e-7 }
    }
}

/// Squared distance from `p` to segment `ab`, with the segment parameter of
/// the closest point.
fn segment_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (p[0] - a[0] - t * ex, p[1] - a[1] - t * ey);
    (dx * dx + dy * dy, t)
}

/// Signed squared distance of `p` to a triangle boundary (positive inside)
/// plus the closest edge and its parameter.
fn signed_dist2(p: [f64; 2], tri: &[[f64; 2]; 3]) -> (f64, usize, f64) {
    let mut best = (f64::INFINITY, 0, 0.0);
    for e in 0..3 {
        let (d2, t) = segment_dist2(p, tri[e], tri[(e + 1) % 3]);
        if d2 < best.0 {
            best = (d2, e, t);
        }
    }
    let cross = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let (c0, c1, c2) = (cross(tri[0], tri[1]), cross(tri[1], tri[2]), cross(tri[2], tri[0]));
    let inside = (c0 > 0.0 && c1 > 0.0 && c2 > 0.0) || (c0 < 0.0 && c1 < 0.0 && c2 < 0.0);
    (if inside { best.0 } else { -best.0 }, best.1, best.2)
}

/// Where a pixel sits relative to a triangle, from its edge lines.
enum Zone {
    /// Outside one edge line by more than the reach.
    Far,
    /// Inside, at this squared distance from the boundary.
    Inside(f64),
    /// Outside but close; needs exact segment distances.
    Near,
}

/// Inward unit normals and offsets of the three edge lines, or `None` for
/// a degenerate triangle.
fn edge_lines(tri: &[[f64; 2]; 3]) -> Option<[[f64; 3]; 3]> {
    let [a, b, c] = tri;
    let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    if area2 == 0.0 || !area2.is_finite() {
        return None;
    }
    let s = area2.signum();
    let mut lines = [[0.0; 3]; 3];
    for e in 0..3 {
        let (p, q) = (tri[e], tri[(e + 1) % 3]);
        let (ex, ey) = (q[0] - p[0], q[1] - p[1]);
        let len = ex.hypot(ey);
        if len == 0.0 {
            return None;
        }
        let (nx, ny) = (-s * ey / len, s * ex / len);
        lines[e] = [nx, ny, -(nx * p[0] + ny * p[1])];
    }
    Some(lines)
}

/// For a point inside a triangle the nearest boundary point lies on the
/// nearest edge line, so the smallest line distance is exact there.
fn zone(lines: &Option<[[f64; 3]; 3]>, p: [f64; 2], reach: f64) -> Zone {
    let Some(lines) = lines else { return Zone::Near };
    let m = lines.iter().map(|l| l[0] * p[0] + l[1] * p[1] + l[2]).fold(f64::INFINITY, f64::min);
    if m < -reach {
        Zone::Far
    } else if m > 0.0 {
        Zone::Inside(m * m)
    } else {
        Zone::Near
    }
}

/// `softplus(x)`, which rounds to `x` itself once `x > 37`.
fn softplus_fast(x: f64) -> f64 {
    if x > 37.0 {
        x
    } else {
        softplus(x)
    }
}

struct Layout {
    faces: Arc<Vec<[usize; 3]>>,
    settings: SoftSettings,
}

impl Layout {
    fn triangle(&self, ndc: &[f64], f: usize) -> [[f64; 2]; 3] {
        self.faces[f].map(|v| [ndc[2 * v], ndc[2 * v + 1]])
    }

    /// Pixel rows and columns a face can influence above `reach²/σ`.
    fn window(&self, tri: &[[f64; 2]; 3], reach: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let r = self.settings.resolution as f64;
        let xs = tri.map(|p| p[0]);
        let ys = tri.map(|p| p[1]);
        let (x0, x1) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let (y0, y1) = (ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        // Column j has center 2(j+.5)/R - 1; row i has center 1 - 2(i+.5)/R.
        let col = |x: f64| (x + 1.0) * 0.5 * r - 0.5;
        let row = |y: f64| (1.0 - y) * 0.5 * r - 0.5;
        let clip = |lo: f64, hi: f64| {
            let lo = lo.ceil().max(0.0);
            let hi = (hi.floor() + 1.0).min(r);
            if hi <= lo { 0..0 } else { lo as usize..hi as usize }
        };
        (clip(row(y1 + reach), row(y0 - reach)), clip(col(x0 - reach), col(x1 + reach)))
    }

    /// Per-pixel `Σ_j log(1 - D_j)`.
    fn log_transmittance(&self, ndc: &[f64]) -> Vec<f64> {
        let res = self.settings.resolution;
        let sigma = self.settings.sigma;
        let reach = (FORWARD_CUTOFF * sigma).sqrt();
        let mut acc = vec![0.0; res * res];
        for f in 0..self.faces.len() {
            let tri = self.triangle(ndc, f);
            let lines = edge_lines(&tri);
            let (rows, cols) = self.window(&tri, reach);
            for i in rows {
                for j in cols.clone() {
                    let p = pixel_center(i, j, res);
                    let sd2 = match zone(&lines, p, reach) {
                        Zone::Far => continue,
                        Zone::Inside(d2) => d2,
                        Zone::Near => signed_dist2(p, &tri).0,
                    };
                    let x = sd2 / sigma;
                    if x < -FORWARD_CUTOFF {
                        continue;
                    }
                    acc[i * res + j] -= softplus_fast(x);
                }
            }
        }
        acc
    }
}

struct SoftRaster {
    layout: Layout,
    log_t: Vec<f64>,
}

impl Backward for SoftRaster {
    fn name(&self) -> &'static str {
        "soft_rasterize"
    }

    fn backward(&self, inputs: &[Tensor], grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let lay = &self.layout;
        let SoftSettings { resolution: res, sigma, grad_cutoff } = lay.settings;
        let ndc = inputs[0].data();
        let g = grad.data();
        let mut out = vec![0.0; ndc.len()];
        // D ≥ cutoff requires x ≥ logit(cutoff).
        let x_min = (grad_cutoff / (1.0 - grad_cutoff)).ln();
        let reach = (-x_min * sigma).sqrt();
        for f in 0..lay.faces.len() {
            let tri = lay.triangle(&ndc, f);
            let lines = edge_lines(&tri);
            let (rows, cols) = lay.window(&tri, reach);
            let mut acc = [[0.0f64; 2]; 3];
            for i in rows {
                for j in cols.clone() {
                    let gp = g[i * res + j];
                    if gp == 0.0 {
                        continue;
                    }
                    let p = pixel_center(i, j, res);
                    match zone(&lines, p, reach) {
                        Zone::Far => continue,
                        // Deep inside, D(1 - D) is as small as it is at the cutoff outside.
                        Zone::Inside(d2) if d2 / sigma > -x_min => continue,
                        _ => {}
                    }
                    let (sd2, e, t) = signed_dist2(p, &tri);
                    let x = sd2 / sigma;
                    if x < x_min || x > -x_min {
                        continue;
                    }
                    let d = sigmoid(x);
                    // ∂S/∂D_j = Π_{k≠j}(1 - D_k) = exp(log T + softplus(x)).
                    let others = (self.log_t[i * res + j] + softplus(x)).exp();
                    let dx = gp * others * d * (1.0 - d) / sigma;
                    let sign = if sd2 >= 0.0 { 1.0 } else { -1.0 };
                    // d² = |p - q|², q = a + t(b - a): ∂/∂a = -2(p-q)(1-t), ∂/∂b = -2(p-q)t.
                    let (a, b) = (tri[e], tri[(e + 1) % 3]);
                    let q = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                    let r = [p[0] - q[0], p[1] - q[1]];
                    let s = dx * sign * -2.0;
                    for k in 0..2 {
                        acc[e][k] += s * r[k] * (1.0 - t);
                        acc[(e + 1) % 3][k] += s * r[k] * t;
                    }
                }
            }
            for (c, &v) in lay.faces[f].iter().enumerate() {
                out[2 * v] += acc[c][0];
                out[2 * v + 1] += acc[c][1];
            }
        }
        let shape = inputs[0].shape().to_vec();
        Ok(vec![Some(Tensor::new(out, &shape)?)])
    }

    fn differentiable_backward(&self) -> bool {
        false
    }
}

/// Soft silhouette `[R, R]` of triangles over projected `[V, 2]` NDC
/// vertices: `S = 1 - Π_j (1 - sigmoid(δ_j d_j² / σ))`.
pub fn soft_rasterize_ndc(ndc: &Tensor, faces: Arc<Vec<[usize; 3]>>, settings: SoftSettings) -> Result<Tensor> {
    let n = match *ndc.shape() {
        [n, 2] => n,
        _ => return Err(Error::Render(format!("projected vertices must be [V, 2], got {:?}", ndc.shape()))),
    };
    if !(settings.sigma > 0.0) || !settings.sigma.is_finite() {
        return Err(Error::Render(format!("sigma must be positive, got {}", settings.sigma)));
    }
    if settings.resolution == 0 {
        return Err(Error::Render("resolution must be positive".into()));
    }
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&v| v >= n)) {
        return Err(Error::Render(format!("face {f:?} indexes past {n} vertices")));
    }
    let layout = Layout { faces, settings };
    let log_t = {
        let data = ndc.data();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Render("projected vertices are not finite".into()));
        }
        layout.log_transmittance(&data)
    };
    let values: Vec<f64> = log_t.iter().map(|&l| -l.exp_m1()).collect();
    let r = settings.resolution;
    Ok(Tensor::from_op(values, vec![r, r], &[ndc], SoftRaster { layout, log_t }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ndc_tensor(points: &[[f64; 2]]) -> Tensor {
        Tensor::param(points.iter().flatten().copied().collect(), &[points.len(), 2]).unwrap()
    }

    #[test]
    fn point_segment_distance() {
        let (d2, t) = segment_dist2([0.5, 1.0], [0.0, 0.0], [1.0, 0.0]);
        assert_eq!((d2, t), (1.0, 0.5));
        let (d2, t) = segment_dist2([2.0, 0.0], [0.0, 0.0], [1.0, 0.0]);
        assert_eq!((d2, t), (1.0, 1.0));
    }

    #[test]
    fn signed_distance_is_orientation_free() {
        let ccw = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let cw = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        for tri in [ccw, cw] {
            assert!(signed_dist2([0.2, 0.2], &tri).0 > 0.0);
            assert!(signed_dist2([0.8, 0.8], &tri).0 < 0.0);
        }
    }

    #[test]
    fn single_triangle_extremes() {
        // Large triangle covering the centre; corner pixels are far outside.
        let v = ndc_tensor(&[[-0.5, -0.5], [0.5, -0.5], [0.0, 0.5]]);
        let s = soft_rasterize_ndc(&v, Arc::new(vec![[0, 1, 2]]), SoftSettings::new(16, 1e-4)).unwrap();
        let d = s.to_vec();
        assert!(d[8 * 16 + 8] > 1.0 - 1e-12);
        assert_eq!(d[0], 0.0);
        assert!(d.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let v = ndc_tensor(&[[-0.5, -0.5], [0.5, -0.5], [0.0, 0.5]]);
        for sigma in [0.0, -1.0, f64::NAN] {
            assert!(soft_rasterize_ndc(&v, Arc::new(vec![[0, 1, 2]]), SoftSettings::new(8, sigma)).is_err());
        }
    }
}
