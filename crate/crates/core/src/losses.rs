//! Weighted binary cross-entropy, Tversky index, Focal Tversky loss and
//! their hybrid sum, each with an analytic gradient with respect to the
//! lesion probabilities.
//!
//! The Tversky index pools every pixel of the batch into one set. The task
//! has a single lesion class, so the class sum of the focal Tversky loss has
//! exactly one term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "weight")]
pub enum LesionWeight {
    Fixed(f64),
    /// `#background / max(1, #lesion)` over the current batch.
    BatchBalanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// False-positive weight of the Tversky index.
    pub alpha: f64,
    /// False-negative weight of the Tversky index.
    pub beta: f64,
    pub gamma: f64,
    /// Weight of the focal Tversky term in the hybrid loss.
    pub kappa: f64,
    pub lesion_weight: LesionWeight,
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            gamma: 4.0 / 3.0,
            kappa: 1.0,
            lesion_weight: LesionWeight::BatchBalanced,
            smooth: 1.0,
        }
    }
}

impl LossConfig {
    /// Field-path-qualified problems with this configuration.
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            out.push(format!("{prefix}.alpha/beta: must be non-negative"));
        }
        if !(1.0..=3.0).contains(&self.gamma) {
            out.push(format!("{prefix}.gamma: {} is outside [1, 3]", self.gamma));
        }
        if !(self.kappa >= 0.0) {
            out.push(format!("{prefix}.kappa: must be non-negative"));
        }
        if !(self.smooth > 0.0) {
            out.push(format!("{prefix}.smooth: must be positive"));
        }
        if let LesionWeight::Fixed(w) = self.lesion_weight {
            if !(w >= 1.0) {
                out.push(format!("{prefix}.lesion_weight: fixed weight {w} must be >= 1"));
            }
        }
        out
    }
}

/// Lesion probabilities paired with a binary ground truth of the same shape.
/// Background probability and background truth are the complements.
#[derive(Clone, Copy, Debug)]
pub struct PixelProbs<'a> {
    lesion: &'a [f32],
    truth: &'a [f32],
}

impl<'a> PixelProbs<'a> {
    pub fn new(probs: &'a Tensor, truth: &'a Tensor) -> Result<Self> {
        if probs.shape() != truth.shape() {
            return Err(Error::shape(format!(
                "probabilities {:?} and ground truth {:?} differ in shape",
                probs.shape(),
                truth.shape()
            )));
        }
        if !truth.is_binary() {
            return Err(Error::validation("ground truth must be binary"));
        }
        Ok(Self {
            lesion: probs.data(),
            truth: truth.data(),
        })
    }

    pub fn len(&self) -> usize {
        self.lesion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lesion.is_empty()
    }

    fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.lesion
            .iter()
            .zip(self.truth)
            .map(|(&p, &g)| (f64::from(p), f64::from(g)))
    }

    fn lesion_pixels(&self) -> usize {
        self.truth.iter().filter(|&&g| g != 0.0).count()
    }
}

/// Soft true-positive, false-positive and false-negative masses.
#[derive(Clone, Copy, Debug, PartialEq)]
struct SoftCounts {
    tp: f64,
    fp: f64,
    fn_: f64,
}

fn soft_counts(probs: &PixelProbs<'_>) -> SoftCounts {
    let mut c = SoftCounts {
        tp: 0.0,
        fp: 0.0,
        fn_: 0.0,
    };
    for (p, g) in probs.pairs() {
        c.tp += p * g;
        c.fp += p * (1.0 - g);
        c.fn_ += (1.0 - p) * g;
    }
    c
}

pub fn tversky_index(probs: &PixelProbs<'_>, alpha: f64, beta: f64, smooth: f64) -> f64 {
    let c = soft_counts(probs);
    (c.tp + smooth) / (c.tp + alpha * c.fp + beta * c.fn_ + smooth)
}

fn tversky_with_grad(probs: &PixelProbs<'_>, alpha: f64, beta: f64, smooth: f64) -> (f64, Vec<f64>) {
    let c = soft_counts(probs);
    let num = c.tp + smooth;
    let den = c.tp + alpha * c.fp + beta * c.fn_ + smooth;
    let grad = probs
        .pairs()
        .map(|(_, g)| {
            let dden = g + alpha * (1.0 - g) - beta * g;
            (g * den - num * dden) / (den * den)
        })
        .collect();
    (num / den, grad)
}

/// `(1 - TI)^(1/gamma)` for an already computed Tversky index.
pub fn focal_tversky_from_index(ti: f64, gamma: f64) -> f64 {
    (1.0 - ti).max(0.0).powf(1.0 / gamma)
}

pub fn focal_tversky_loss(probs: &PixelProbs<'_>, cfg: &LossConfig) -> f64 {
    focal_tversky_from_index(tversky_index(probs, cfg.alpha, cfg.beta, cfg.smooth), cfg.gamma)
}

pub fn focal_tversky_with_grad(probs: &PixelProbs<'_>, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let (ti, dti) = tversky_with_grad(probs, cfg.alpha, cfg.beta, cfg.smooth);
    let base = (1.0 - ti).max(0.0);
    let exponent = 1.0 / cfg.gamma;
    let value = base.powf(exponent);
    // d/dTI of base^e is -e * base^(e-1); that diverges at a perfect score,
    // where the loss is flat at its minimum anyway.
    let outer = if base > 0.0 {
        -exponent * base.powf(exponent - 1.0)
    } else {
        0.0
    };
    (value, dti.into_iter().map(|d| outer * d).collect())
}

/// Resolves the lesion-class weight for a batch.
pub fn lesion_weight(probs: &PixelProbs<'_>, mode: LesionWeight) -> f64 {
    match mode {
        LesionWeight::Fixed(w) => w,
        LesionWeight::BatchBalanced => {
            let lesion = probs.lesion_pixels();
            (probs.len() - lesion) as f64 / lesion.max(1) as f64
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean over pixels of `-(w * g * ln p + (1 - g) * ln(1 - p))`.
pub fn weighted_bce(probs: &PixelProbs<'_>, weight: f64) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .pairs()
        .map(|(p, g)| {
            let p = clamp_prob(p);
            -(weight * g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    total / probs.len() as f64
}

pub fn weighted_bce_with_grad(probs: &PixelProbs<'_>, weight: f64) -> (f64, Vec<f64>) {
    let n = probs.len().max(1) as f64;
    let grad = probs
        .pairs()
        .map(|(p, g)| {
            if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                0.0
            } else {
                -(weight * g / p - (1.0 - g) / (1.0 - p)) / n
            }
        })
        .collect();
    (weighted_bce(probs, weight), grad)
}

/// Hybrid loss value, its components, and the gradient with respect to the
/// lesion probabilities.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: f64,
    pub weighted_bce: f64,
    pub focal_tversky: f64,
    pub grad: Tensor,
}

/// `L = L_wBCE + kappa * L_FTL`.
pub fn hybrid_loss(probs_t: &Tensor, truth: &Tensor, cfg: &LossConfig) -> Result<LossValue> {
    let probs = PixelProbs::new(probs_t, truth)?;
    let w = lesion_weight(&probs, cfg.lesion_weight);
    let (bce, mut grad) = weighted_bce_with_grad(&probs, w);
    let mut total = bce;
    let mut ftl = 0.0;
    if cfg.kappa != 0.0 {
        let (f, fgrad) = focal_tversky_with_grad(&probs, cfg);
        ftl = f;
        total += cfg.kappa * f;
        for (g, fg) in grad.iter_mut().zip(fgrad) {
            *g += cfg.kappa * fg;
        }
    }
    Ok(LossValue {
        total,
        weighted_bce: bce,
        focal_tversky: ftl,
        grad: Tensor::new(probs_t.shape().to_vec(), grad.into_iter().map(|g| g as f32).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_unit_index() {
        let g = t(&[1.0, 0.0, 1.0, 0.0]);
        let probs = PixelProbs::new(&g, &g).unwrap();
        assert_eq!(tversky_index(&probs, 0.7, 0.3, 1.0), 1.0);
        assert_eq!(focal_tversky_loss(&probs, &LossConfig::default()), 0.0);
    }

    #[test]
    fn tversky_closed_form() {
        // TP=1, FP=1, FN=1, TN=1.
        let p = t(&[1.0, 1.0, 0.0, 0.0]);
        let g = t(&[1.0, 0.0, 1.0, 0.0]);
        let probs = PixelProbs::new(&p, &g).unwrap();
        assert!((tversky_index(&probs, 0.7, 0.3, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn focal_exponent() {
        assert!((focal_tversky_from_index(0.5, 4.0 / 3.0) - 0.5f64.powf(0.75)).abs() < 1e-15);
        assert!((0.5f64.powf(0.75) - 0.59460).abs() < 1e-5);
        assert_eq!(focal_tversky_from_index(0.25, 1.0), 0.75);
    }

    #[test]
    fn bce_hand_value() {
        let p = t(&[0.5, 0.5]);
        let g = t(&[1.0, 0.0]);
        let probs = PixelProbs::new(&p, &g).unwrap();
        let v = weighted_bce(&probs, 3.0);
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn bce_perfect_fit_limit() {
        let g = t(&[1.0, 0.0, 1.0]);
        let probs = PixelProbs::new(&g, &g).unwrap();
        assert!(weighted_bce(&probs, 5.0) < 1e-5);
    }

    #[test]
    fn unit_weight_is_plain_bce() {
        let p = t(&[0.2, 0.9, 0.6]);
        let g = t(&[0.0, 1.0, 1.0]);
        let probs = PixelProbs::new(&p, &g).unwrap();
        let plain = -((0.8f64).ln() + (0.9f32 as f64).ln() + (0.6f32 as f64).ln()) / 3.0;
        assert!((weighted_bce(&probs, 1.0) - plain).abs() < 1e-7);
    }

    #[test]
    fn batch_balanced_weight() {
        let p = t(&[0.5; 5]);
        let g = t(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        let probs = PixelProbs::new(&p, &g).unwrap();
        assert_eq!(lesion_weight(&probs, LesionWeight::BatchBalanced), 4.0);
        let empty = t(&[0.0; 5]);
        let probs = PixelProbs::new(&p, &empty).unwrap();
        assert_eq!(lesion_weight(&probs, LesionWeight::BatchBalanced), 5.0);
    }

    #[test]
    fn kappa_zero_is_bce_bitwise() {
        let p = t(&[0.3, 0.8, 0.1, 0.55]);
        let g = t(&[0.0, 1.0, 1.0, 0.0]);
        let cfg = LossConfig {
            kappa: 0.0,
            ..LossConfig::default()
        };
        let v = hybrid_loss(&p, &g, &cfg).unwrap();
        let probs = PixelProbs::new(&p, &g).unwrap();
        let w = lesion_weight(&probs, cfg.lesion_weight);
        assert_eq!(v.total.to_bits(), weighted_bce(&probs, w).to_bits());
    }

    #[test]
    fn rejects_non_binary_truth() {
        let p = t(&[0.3, 0.8]);
        let g = t(&[0.5, 1.0]);
        assert!(matches!(PixelProbs::new(&p, &g), Err(Error::Validation(_))));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().problems("loss").is_empty());
        let bad = LossConfig {
            gamma: 3.5,
            smooth: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(bad.problems("loss").len(), 2);
    }
}
