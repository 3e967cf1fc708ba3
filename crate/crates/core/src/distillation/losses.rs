use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::PooledFeature;

/// Weights on the teacher L2, student L2 and feature smooth-L1 terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub teacher: f64,
    pub student: f64,
    pub feature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            teacher: 1.0,
            student: 1.0,
            feature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(teacher: f64, student: f64, feature: f64) -> Self {
        Self {
            teacher,
            student,
            feature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("teacher", self.teacher),
            ("student", self.student),
            ("feature", self.feature),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0 (got {w})"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.teacher, self.student, self.feature)
    }
}

/// Parses `w1,w2,w3`.
impl FromStr for LossWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "expected three comma-separated weights, got {s:?}"
            )));
        }
        let mut w = [0.0; 3];
        for (slot, part) in w.iter_mut().zip(&parts) {
            *slot = part
                .parse()
                .map_err(|_| Error::Config(format!("weight {part:?} is not a number")))?;
        }
        let weights = Self::new(w[0], w[1], w[2]);
        weights.validate()?;
        Ok(weights)
    }
}

/// The three loss terms and their weighted sum.
///
/// `total` is accumulated left to right:
/// `(w1 * teacher_l2 + w2 * student_l2) + w3 * feature_smooth_l1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub teacher_l2: f64,
    pub student_l2: f64,
    pub feature_smooth_l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.teacher_l2,
            self.student_l2,
            self.feature_smooth_l1,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean of squared differences.
pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Argument("mse_loss of an empty list".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Argument(format!(
            "mse_loss lengths differ ({} vs {})",
            predictions.len(),
            targets.len()
        )));
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Elementwise smooth-L1 with the switch at `|d| = 1`.
pub fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Derivative of [`huber`]: `d` inside the unit band, `sign(d)` outside.
pub fn huber_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Mean smooth-L1 over the elements of `a - b`.
pub fn smooth_l1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "smooth_l1 shapes differ ([{}] vs [{}])",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Argument("smooth_l1 of empty arrays".into()));
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| huber(x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Batch loss. Features are compared sample by sample and the smooth-L1 is
/// averaged over every element of the batch.
pub fn total_loss(
    teacher_pred: &[f64],
    student_pred: &[f64],
    targets: &[f64],
    teacher_feat: &[PooledFeature],
    student_feat_projected: &[PooledFeature],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if teacher_feat.len() != student_feat_projected.len() || teacher_feat.len() != targets.len() {
        return Err(Error::Argument(format!(
            "batch sizes differ: {} targets, {} teacher features, {} student features",
            targets.len(),
            teacher_feat.len(),
            student_feat_projected.len()
        )));
    }
    let teacher_l2 = mse_loss(teacher_pred, targets)?;
    let student_l2 = mse_loss(student_pred, targets)?;
    let mut flat_t = Vec::new();
    let mut flat_s = Vec::new();
    for (t, s) in teacher_feat.iter().zip(student_feat_projected) {
        if t.dim() != s.dim() {
            return Err(Error::Argument(format!(
                "projected student feature has dim {}, teacher feature has dim {}",
                s.dim(),
                t.dim()
            )));
        }
        flat_t.extend(t.0.iter());
        flat_s.extend(s.0.iter());
    }
    let feature_smooth_l1 = smooth_l1(&flat_t, &flat_s)?;
    Ok(weighted(teacher_l2, student_l2, feature_smooth_l1, weights))
}

pub(crate) fn weighted(
    teacher_l2: f64,
    student_l2: f64,
    feature_smooth_l1: f64,
    w: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        teacher_l2,
        student_l2,
        feature_smooth_l1,
        total: w.teacher * teacher_l2 + w.student * student_l2 + w.feature * feature_smooth_l1,
    }
}
