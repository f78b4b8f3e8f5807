//! Central finite-difference checks of analytic gradients.
//!
//! The oracle only evaluates the forward function; it never touches the
//! backward rules it is checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Central difference step.
    pub step: f64,
    /// Denominator floor: errors on gradients smaller than this are
    /// measured absolutely.
    pub floor: f64,
    /// When set, only this many randomly chosen coordinates per input are
    /// perturbed.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-4, max_coords: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    /// (input index, flat coordinate, analytic, numeric) at the worst error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

impl GradCheck {
    /// Compares `grad(f)` with central differences of `f` at the given
    /// points. `f` must return a scalar.
    pub fn run<F>(&self, inits: &[Vec<f64>], shapes: &[&[usize]], f: F) -> Result<GradReport>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let params: Vec<Tensor> = inits
            .iter()
            .zip(shapes)
            .map(|(v, s)| Tensor::param(v.clone(), s))
            .collect::<Result<_>>()?;
        let out = f(&params)?;
        let refs: Vec<&Tensor> = params.iter().collect();
        let analytic = grad(&out, &refs, false)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report =
            GradReport { max_rel_error: 0.0, max_abs_error: 0.0, coords_checked: 0, worst: None };
        for (i, init) in inits.iter().enumerate() {
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < init.len() => sample(&mut rng, init.len(), k).into_vec(),
                _ => (0..init.len()).collect(),
            };
            let a = analytic[i].to_vec();
            for c in coords {
                let eval = |delta: f64| -> Result<f64> {
                    let inputs: Vec<Tensor> = inits
                        .iter()
                        .zip(shapes)
                        .enumerate()
                        .map(|(j, (v, s))| {
                            let mut v = v.clone();
                            if j == i {
                                v[c] += delta;
                            }
                            Tensor::new(v, s)
                        })
                        .collect::<Result<_>>()?;
                    f(&inputs).map(|t| t.item())
                };
                let numeric = (eval(self.step)? - eval(-self.step)?) / (2.0 * self.step);
                let rel = relative_error(a[c], numeric, self.floor);
                let abs = (a[c] - numeric).abs();
                report.coords_checked += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    if rel >= report.max_rel_error {
                        report.worst = Some((i, c, a[c], numeric));
                    }
                }
            }
        }
        Ok(report)
    }
}

/// [`GradCheck::run`] with default settings.
pub fn check_gradients<F>(inits: &[Vec<f64>], shapes: &[&[usize]], f: F) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    GradCheck::default().run(inits, shapes, f)
}
