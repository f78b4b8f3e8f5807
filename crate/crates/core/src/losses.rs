//! Training objectives: pose regression, silhouette IoU at several scales,
//! the non-saturating adversarial pair with an R1 penalty, mesh regularizers
//! and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{flatten_loss, laplacian_loss, CameraPose, Mesh};
use crate::rasterizer::SilhouetteMap;
use crate::tensor::Tensor;

/// Guard for the IoU denominator when both silhouettes are empty.
pub const IOU_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_sd: f64,
    /// Weight of the domain-adaptation term, which is always zero here.
    pub lambda_dd: f64,
    pub lambda_r: f64,
    /// Carried for configuration fidelity; no term uses it.
    pub lambda_vr: f64,
    /// Per pyramid level, finest first.
    pub lambda_si: Vec<f64>,
    /// R1 penalty coefficient.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_v: 10.0,
            lambda_sd: 0.1,
            lambda_dd: 0.1,
            lambda_r: 0.1,
            lambda_vr: 10.0,
            lambda_si: vec![1.0, 1.0, 1.0],
            gamma: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("lambda_v", self.lambda_v),
            ("lambda_sd", self.lambda_sd),
            ("lambda_dd", self.lambda_dd),
            ("lambda_r", self.lambda_r),
            ("lambda_vr", self.lambda_vr),
            ("gamma", self.gamma),
        ];
        for (name, v) in scalars.into_iter().chain(self.lambda_si.iter().map(|&v| ("lambda_si", v))) {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if self.lambda_si.is_empty() {
            return Err(Error::Config("lambda_si needs at least one level".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.lambda_si.len()
    }
}

/// `[sin az, cos az, sin el, cos el]` as a constant tensor.
pub fn pose_embedding(pose: &CameraPose) -> Tensor {
    Tensor::new(pose.embedding().to_vec(), &[4]).expect("four entries")
}

/// Mean squared error between two 4-entry pose embeddings.
pub fn viewpoint_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != [4] || target.shape() != [4] {
        return Err(Error::Shape(format!(
            "viewpoint_loss expects [4] embeddings, got {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.sub(target)?.square().mean())
}

/// [`viewpoint_loss`] between two poses.
pub fn pose_loss(pred: &CameraPose, target: &CameraPose) -> f64 {
    let (a, b) = (pred.embedding(), target.embedding());
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 4.0
}

/// `1 - Σ(S1 S2) / Σ(S1 + S2 - S1 S2)`, the union floored at [`IOU_EPS`].
pub fn iou_loss(s1: &SilhouetteMap, s2: &SilhouetteMap) -> Result<Tensor> {
    if s1.resolution() != s2.resolution() {
        return Err(Error::Shape(format!(
            "iou_loss resolution mismatch: {} vs {}",
            s1.resolution(),
            s2.resolution()
        )));
    }
    let (a, b) = (s1.tensor(), s2.tensor());
    let prod = a.mul(b)?;
    let inter = prod.sum();
    let union = a.add(b)?.sub(&prod)?.sum();
    let u = union.item();
    let union = if u < IOU_EPS { union.add_scalar(IOU_EPS - u) } else { union };
    Ok(inter.div(&union)?.neg().add_scalar(1.0))
}

/// `Σ_i λ_i · iou_loss(pyr1[i], pyr2[i])`.
pub fn multiscale_iou(pyr1: &[SilhouetteMap], pyr2: &[SilhouetteMap], lambdas: &[f64]) -> Result<Tensor> {
    if pyr1.len() != pyr2.len() || pyr1.len() != lambdas.len() || pyr1.is_empty() {
        return Err(Error::Shape(format!(
            "multiscale_iou level mismatch: {} vs {} maps, {} weights",
            pyr1.len(),
            pyr2.len(),
            lambdas.len()
        )));
    }
    let mut total = Tensor::scalar(0.0);
    for ((a, b), &l) in pyr1.iter().zip(pyr2).zip(lambdas) {
        total = total.add(&iou_loss(a, b)?.scale(l))?;
    }
    Ok(total)
}

/// `f(u) = -log(1 + e^-u)`, the log-sigmoid.
pub fn gan_f(u: &Tensor) -> Tensor {
    u.neg().softplus().neg()
}

/// Scalar log-sigmoid, stable for large `|u|`.
pub fn gan_f_value(u: f64) -> f64 {
    -crate::tensor::ops::softplus(-u)
}

/// `-[f(real) + f(-fake)] + γ/2 · ‖∇_x D(real)‖²`.
pub fn discriminator_loss(score_real: &Tensor, score_fake: &Tensor, grad_norm_sq_real: &Tensor, gamma: f64) -> Result<Tensor> {
    let adv = gan_f(score_real).add(&gan_f(&score_fake.neg()))?.neg();
    adv.add(&grad_norm_sq_real.scale(0.5 * gamma))
}

/// `-f(fake) = softplus(-fake)`.
pub fn generator_adv_loss(score_fake: &Tensor) -> Tensor {
    score_fake.neg().softplus()
}

/// Laplacian plus flatten loss with unit internal weights.
pub fn regularizer_bundle(mesh: &Mesh) -> Result<Tensor> {
    laplacian_loss(mesh)?.add(&flatten_loss(mesh)?)
}

/// The individual terms of one generator objective. Absent terms count as 0.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub sp: Option<Tensor>,
    pub r: Option<Tensor>,
    pub v: Option<Tensor>,
    pub sd: Option<Tensor>,
}

/// Per-term values of one step, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub sp: f64,
    pub r: f64,
    pub v: f64,
    pub sd: f64,
    pub dd: f64,
    pub total: f64,
}

/// `L = L_sp + λ_r L_r + λ_v L_v + λ_sd L_sd + λ_dd L_dd` with `L_dd = 0`.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
    let mut total = Tensor::scalar(0.0);
    let mut report = LossReport::default();
    let parts = [
        ("sp", &terms.sp, 1.0, &mut report.sp),
        ("r", &terms.r, weights.lambda_r, &mut report.r),
        ("v", &terms.v, weights.lambda_v, &mut report.v),
        ("sd", &terms.sd, weights.lambda_sd, &mut report.sd),
    ];
    for (name, term, weight, slot) in parts {
        if let Some(t) = term {
            if !t.is_scalar() {
                return Err(Error::Shape(format!("loss term `{name}` must be a scalar, got {:?}", t.shape())));
            }
            let value = t.item();
            if !value.is_finite() {
                return Err(Error::NonFinite { term: name.into(), value });
            }
            *slot = value;
            total = total.add(&t.scale(weight))?;
        }
    }
    report.total = total.item();
    if !report.total.is_finite() {
        return Err(Error::NonFinite { term: "total".into(), value: report.total });
    }
    Ok((total, report))
}
