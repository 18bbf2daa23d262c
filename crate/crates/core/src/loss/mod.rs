//! Differentiable training losses over the predicted saliency map: NSS, KLD,
//! CC, and SIM sub-losses with analytic gradients, their weighted combination,
//! and the per-pixel BCE alternative used by the ablation grid.
//!
//! Gradients flow only into the prediction; ground-truth maps are constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FixationMap;
use crate::metrics::{self, KLD_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{term}: prediction shape {pred:?} does not match target shape {target:?}")]
    ShapeMismatch {
        term: &'static str,
        pred: Vec<usize>,
        target: Vec<usize>,
    },
    #[error("{term}: degenerate input ({reason})")]
    Degenerate { term: &'static str, reason: String },
    #[error("nss: fixation map has no fixated pixel")]
    EmptyFixations,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weights of the four sub-losses in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub nss: f64,
    pub kld: f64,
    pub cc: f64,
    pub sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            nss: -1.0,
            kld: 10.0,
            cc: -2.0,
            sim: -1.0,
        }
    }
}

impl LossWeights {
    pub const fn zero() -> Self {
        Self {
            nss: 0.0,
            kld: 0.0,
            cc: 0.0,
            sim: 0.0,
        }
    }

    /// Weighted sum of already-computed sub-loss values.
    pub fn combine(&self, nss: f64, kld: f64, cc: f64, sim: f64) -> f64 {
        self.nss * nss + self.kld * kld + self.cc * cc + self.sim * sim
    }
}

/// Which objective a training run minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Weighted combination of NSS, KLD, CC, and SIM.
    Combined,
    /// Plain per-pixel binary cross-entropy (ablation baseline).
    Bce,
}

fn check_shapes(term: &'static str, pred: &Tensor, target_shape: &[usize]) -> Result<()> {
    if pred.shape() != target_shape {
        return Err(LossError::ShapeMismatch {
            term,
            pred: pred.shape().to_vec(),
            target: target_shape.to_vec(),
        });
    }
    Ok(())
}

fn check_not_constant(term: &'static str, v: &[f64]) -> Result<()> {
    if metrics::is_constant(v) {
        return Err(LossError::Degenerate {
            term,
            reason: "constant map".into(),
        });
    }
    Ok(())
}

fn positive_sum(term: &'static str, v: &[f64]) -> Result<f64> {
    if v.iter().any(|&x| x < 0.0) {
        return Err(LossError::Degenerate {
            term,
            reason: "negative values".into(),
        });
    }
    let s: f64 = v.iter().sum();
    if s <= 0.0 {
        return Err(LossError::Degenerate {
            term,
            reason: "map sums to zero".into(),
        });
    }
    Ok(s)
}

/// Gradient through u = x / sum(x): maps d/du back to d/dx.
fn through_sum_normalization(grad_u: &[f64], u: &[f64], sum: f64) -> Vec<f64> {
    let dot: f64 = grad_u.iter().zip(u).map(|(g, v)| g * v).sum();
    grad_u.iter().map(|g| (g - dot) / sum).collect()
}

/// NSS of the prediction at fixated pixels, with the exact derivative through
/// the z-score (mean and std depend on every pixel).
pub fn loss_nss(pred: &Tensor, fix: &FixationMap) -> Result<(f64, Tensor)> {
    check_shapes("nss", pred, &[fix.height, fix.width])?;
    if fix.count() == 0 {
        return Err(LossError::EmptyFixations);
    }
    check_not_constant("nss", pred.data())?;
    let n = pred.len() as f64;
    let mu = pred.mean();
    let var = pred
        .data()
        .iter()
        .map(|v| (v - mu) * (v - mu))
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    let f_total = fix.count() as f64;
    let mut value = 0.0;
    for &i in &fix.hit_indices() {
        value += (pred.data()[i] - mu) / sd;
    }
    value /= f_total;
    let grad = Tensor::from_fn(pred.shape(), |j| {
        let f_j = fix.hits()[j] as f64;
        let z_j = (pred.data()[j] - mu) / sd;
        (f_j - f_total / n) / (f_total * sd) - value * z_j / (n * sd)
    });
    Ok((value, grad))
}

/// Epsilon-regularized KL divergence after sum-normalizing both maps; the
/// gradient includes the normalization Jacobian.
pub fn loss_kld(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    check_shapes("kld", pred, gt.shape())?;
    let sp = positive_sum("kld", pred.data())?;
    let sg = positive_sum("kld", gt.data())?;
    let p_hat: Vec<f64> = pred.data().iter().map(|v| v / sp).collect();
    let g_hat: Vec<f64> = gt.data().iter().map(|v| v / sg).collect();
    let value = metrics::kld_normalized(&p_hat, &g_hat);
    let grad_u: Vec<f64> = p_hat
        .iter()
        .zip(&g_hat)
        .map(|(&p, &g)| {
            let denom = KLD_EPS + g / (KLD_EPS + p);
            -g * g / (denom * (KLD_EPS + p) * (KLD_EPS + p))
        })
        .collect();
    let grad = through_sum_normalization(&grad_u, &p_hat, sp);
    Ok((value, Tensor::new(pred.shape(), grad).unwrap()))
}

/// Pearson correlation with the analytic gradient of the correlation ratio.
pub fn loss_cc(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    check_shapes("cc", pred, gt.shape())?;
    check_not_constant("cc", pred.data())?;
    check_not_constant("cc", gt.data())?;
    let mu_p = pred.mean();
    let mu_g = gt.mean();
    let mut spg = 0.0;
    let mut spp = 0.0;
    let mut sgg = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        spg += (p - mu_p) * (g - mu_g);
        spp += (p - mu_p) * (p - mu_p);
        sgg += (g - mu_g) * (g - mu_g);
    }
    let denom = (spp * sgg).sqrt();
    let value = spg / denom;
    let ratio = spg / spp;
    let grad = Tensor::from_fn(pred.shape(), |j| {
        let pt = pred.data()[j] - mu_p;
        let gt_c = gt.data()[j] - mu_g;
        (gt_c - ratio * pt) / denom
    });
    Ok((value, grad))
}

/// Histogram intersection of the sum-normalized maps. The subgradient takes
/// the prediction branch at ties and flows through the normalization.
pub fn loss_sim(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    check_shapes("sim", pred, gt.shape())?;
    let sp = positive_sum("sim", pred.data())?;
    let sg = positive_sum("sim", gt.data())?;
    let p_hat: Vec<f64> = pred.data().iter().map(|v| v / sp).collect();
    let g_hat: Vec<f64> = gt.data().iter().map(|v| v / sg).collect();
    let value: f64 = p_hat.iter().zip(&g_hat).map(|(p, g)| p.min(*g)).sum();
    let grad_u: Vec<f64> = p_hat
        .iter()
        .zip(&g_hat)
        .map(|(&p, &g)| if p <= g { 1.0 } else { 0.0 })
        .collect();
    let grad = through_sum_normalization(&grad_u, &p_hat, sp);
    Ok((value, Tensor::new(pred.shape(), grad).unwrap()))
}

/// All four sub-loss values in one pass, plus the weighted value and gradient.
pub struct CombinedLoss {
    pub value: f64,
    pub grad: Tensor,
    pub nss: f64,
    pub kld: f64,
    pub cc: f64,
    pub sim: f64,
}

/// The combined training objective: a weighted sum of the four sub-losses;
/// the gradient is the same linear combination of sub-gradients.
pub fn combined_loss(
    pred: &Tensor,
    gt_map: &Tensor,
    gt_fix: &FixationMap,
    w: &LossWeights,
) -> Result<CombinedLoss> {
    let (nss_v, nss_g) = loss_nss(pred, gt_fix)?;
    let (kld_v, kld_g) = loss_kld(pred, gt_map)?;
    let (cc_v, cc_g) = loss_cc(pred, gt_map)?;
    let (sim_v, sim_g) = loss_sim(pred, gt_map)?;
    let value = w.combine(nss_v, kld_v, cc_v, sim_v);
    let grad = Tensor::from_fn(pred.shape(), |i| {
        w.nss * nss_g.data()[i]
            + w.kld * kld_g.data()[i]
            + w.cc * cc_g.data()[i]
            + w.sim * sim_g.data()[i]
    });
    Ok(CombinedLoss {
        value,
        grad,
        nss: nss_v,
        kld: kld_v,
        cc: cc_v,
        sim: sim_v,
    })
}

/// Per-pixel binary cross-entropy against the max-normalized ground-truth
/// density. Predictions must lie strictly inside (0, 1).
pub fn loss_bce(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    check_shapes("bce", pred, gt.shape())?;
    if pred.data().iter().any(|&p| p <= 0.0 || p >= 1.0) {
        return Err(LossError::Degenerate {
            term: "bce",
            reason: "prediction outside (0,1)".into(),
        });
    }
    let max = gt.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return Err(LossError::Degenerate {
            term: "bce",
            reason: "ground truth has no positive mass".into(),
        });
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for i in 0..pred.len() {
        let t = gt.data()[i] / max;
        let p = pred.data()[i];
        value -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        grad.data_mut()[i] = (p - t) / (p * (1.0 - p)) / n;
    }
    Ok((value / n, grad))
}

/// Loss dispatch used by the trainer.
pub fn training_loss(
    kind: LossKind,
    pred: &Tensor,
    gt_map: &Tensor,
    gt_fix: &FixationMap,
    w: &LossWeights,
) -> Result<(f64, Tensor)> {
    match kind {
        LossKind::Combined => {
            let out = combined_loss(pred, gt_map, gt_fix, w)?;
            Ok((out.value, out.grad))
        }
        LossKind::Bce => loss_bce(pred, gt_map),
    }
}
