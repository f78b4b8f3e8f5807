//! Binary reference rasterizer: edge functions with a top-left fill rule.

/// Raster coordinates: u to the right, v downward, pixel `(i, j)` centered
/// at `(j + 0.5, i + 0.5)`.
fn to_raster(p: [f64; 2], res: usize) -> [f64; 2] {
    let r = res as f64;
    [(p[0] + 1.0) * 0.5 * r, (1.0 - p[1]) * 0.5 * r]
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// With the interior on the positive side, an edge owns its exact-zero
/// pixels when it is a top edge (horizontal, interior below) or a left edge
/// (interior to the right).
fn owns_ties(a: [f64; 2], b: [f64; 2]) -> bool {
    let (du, dv) = (b[0] - a[0], b[1] - a[1]);
    (dv == 0.0 && du > 0.0) || dv < 0.0
}

/// Fills `mask` (`res * res`, row-major, row 0 at the top) with every pixel
/// whose center lies inside a projected triangle.
pub(super) fn fill(ndc: &[f64], faces: &[[usize; 3]], res: usize, mask: &mut [bool]) {
    for f in faces {
        let mut t = f.map(|v| to_raster([ndc[2 * v], ndc[2 * v + 1]], res));
        let area = edge(t[0], t[1], t[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            t.swap(1, 2);
        }
        let us = t.map(|p| p[0]);
        let vs = t.map(|p| p[1]);
        let lo = |xs: [f64; 3]| (xs.iter().copied().fold(f64::INFINITY, f64::min) - 0.5).ceil().max(0.0) as usize;
        let hi = |xs: [f64; 3]| {
            let h = (xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 0.5).floor() + 1.0;
            h.clamp(0.0, res as f64) as usize
        };
        let owns = [owns_ties(t[0], t[1]), owns_ties(t[1], t[2]), owns_ties(t[2], t[0])];
        for i in lo(vs)..hi(vs) {
            for j in lo(us)..hi(us) {
                let p = [j as f64 + 0.5, i as f64 + 0.5];
                let w = [edge(t[0], t[1], p), edge(t[1], t[2], p), edge(t[2], t[0], p)];
                if (0..3).all(|k| w[k] > 0.0 || (w[k] == 0.0 && owns[k])) {
                    mask[i * res + j] = true;
                }
            }
        }
    }
}
