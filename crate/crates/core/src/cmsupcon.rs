//! Cross-modal supervised contrastive loss (CM-SupCon), the vanilla SupCon
//! variant, the joint BCE + contrastive objective, and analytic gradients.
//!
//! For anchor `i` the cross-modal positive set is
//! `P(i) = { j ≠ i : y_j = y_i, m_j ≠ m_i }`; anchors with an empty set are
//! skipped, and a batch without valid anchors has loss 0 and zero gradient.
//! Features are ℓ2-normalized internally, so callers pass raw features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Label, Modality};
use crate::linalg::{dot, Matrix};
use crate::par;

/// Default temperature.
pub const DEFAULT_TAU: f64 = 0.07;
/// Default weight of the contrastive term in the joint objective.
pub const DEFAULT_LAMBDA: f64 = 0.05;

const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("feature dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("lambda must be non-negative and finite, got {0}")]
    InvalidLambda(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Positives share the label and come from the other modality.
    #[default]
    CrossModal,
    /// Positives share the label; modality is ignored.
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            variant: LossVariant::CrossModal,
        }
    }
}

impl LossConfig {
    pub fn cross_modal(tau: f64) -> Self {
        Self {
            tau,
            variant: LossVariant::CrossModal,
        }
    }

    pub fn vanilla(tau: f64) -> Self {
        Self {
            tau,
            variant: LossVariant::Vanilla,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.tau > 0.0 && self.tau.is_finite() {
            Ok(())
        } else {
            Err(LossError::InvalidTemperature(self.tau))
        }
    }
}

/// A mini-batch of raw (pre-normalization) features with labels and
/// modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFeatures {
    z: Matrix,
    y: Vec<Label>,
    m: Vec<Modality>,
}

impl BatchFeatures {
    pub fn new(z: Matrix, y: Vec<Label>, m: Vec<Modality>) -> Result<Self, LossError> {
        let n = z.rows();
        if n == 0 {
            return Err(LossError::EmptyBatch);
        }
        if z.cols() < 2 {
            return Err(LossError::DimensionTooSmall(z.cols()));
        }
        check_len("labels", n, y.len())?;
        check_len("modalities", n, m.len())?;
        if !z.is_finite() {
            return Err(LossError::NonFinite);
        }
        Ok(Self { z, y, m })
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Matrix {
        &self.z
    }

    pub fn labels(&self) -> &[Label] {
        &self.y
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.m
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), LossError> {
    if expected == found {
        Ok(())
    } else {
        Err(LossError::LengthMismatch { what, expected, found })
    }
}

/// Divides every row by its Euclidean norm.
pub fn l2_normalize(z: &Matrix) -> Result<Matrix, LossError> {
    let mut out = z.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = dot(row, row).sqrt();
        if !(norm > MIN_NORM) {
            return Err(LossError::ZeroNormRow(i));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Per-anchor positive index lists and the valid-anchor set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSets {
    pub positives: Vec<Vec<usize>>,
    pub valid: Vec<usize>,
}

impl PositiveSets {
    pub fn is_valid(&self, i: usize) -> bool {
        !self.positives[i].is_empty()
    }
}

/// Cross-modal positive sets.
pub fn positive_sets(y: &[Label], m: &[Modality]) -> Result<PositiveSets, LossError> {
    positive_sets_for(y, m, LossVariant::CrossModal)
}

pub fn positive_sets_for(y: &[Label], m: &[Modality], variant: LossVariant) -> Result<PositiveSets, LossError> {
    check_len("modalities", y.len(), m.len())?;
    let n = y.len();
    let positives: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && y[j] == y[i] && (variant == LossVariant::Vanilla || m[j] != m[i]))
                .collect()
        })
        .collect();
    let valid = (0..n).filter(|&i| !positives[i].is_empty()).collect();
    Ok(PositiveSets { positives, valid })
}

/// Scalar loss with the per-anchor terms (`None` for invalid anchors).
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub terms: Vec<Option<f64>>,
    pub n_valid: usize,
}

struct AnchorStats {
    term: f64,
    /// Softmax weights over `k ≠ i` (zero at `i`).
    weights: Vec<f64>,
}

fn anchor(u: &Matrix, i: usize, pos: &[usize], tau: f64) -> AnchorStats {
    let n = u.rows();
    let ui = u.row(i);
    let s: Vec<f64> = (0..n)
        .map(|k| {
            if k == i {
                f64::NEG_INFINITY
            } else {
                dot(ui, u.row(k)) / tau
            }
        })
        .collect();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = s.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let mean_pos = pos.iter().map(|&p| s[p]).sum::<f64>() / pos.len() as f64;
    let weights = s.iter().map(|&v| (v - lse).exp()).collect();
    AnchorStats {
        term: lse - mean_pos,
        weights,
    }
}

/// Contrastive loss for either variant.
pub fn supcon_loss(batch: &BatchFeatures, cfg: &LossConfig) -> Result<ContrastiveLoss, LossError> {
    cfg.validate()?;
    let u = l2_normalize(&batch.z)?;
    let sets = positive_sets_for(&batch.y, &batch.m, cfg.variant)?;
    let terms: Vec<Option<f64>> = par::map_range(batch.len(), |i| {
        let pos = &sets.positives[i];
        (!pos.is_empty()).then(|| anchor(&u, i, pos, cfg.tau).term)
    });
    let n_valid = sets.valid.len();
    let loss = if n_valid == 0 {
        0.0
    } else {
        terms.iter().flatten().sum::<f64>() / n_valid as f64
    };
    Ok(ContrastiveLoss { loss, terms, n_valid })
}

/// CM-SupCon loss at temperature `tau`.
pub fn cm_supcon_loss(batch: &BatchFeatures, tau: f64) -> Result<ContrastiveLoss, LossError> {
    supcon_loss(batch, &LossConfig::cross_modal(tau))
}

/// Vanilla SupCon loss at temperature `tau`.
pub fn vanilla_supcon_loss(batch: &BatchFeatures, tau: f64) -> Result<ContrastiveLoss, LossError> {
    supcon_loss(batch, &LossConfig::vanilla(tau))
}

/// Loss and its gradient with respect to the raw features.
pub fn supcon_loss_and_grad(batch: &BatchFeatures, cfg: &LossConfig) -> Result<(ContrastiveLoss, Matrix), LossError> {
    cfg.validate()?;
    let (n, d) = (batch.len(), batch.z.cols());
    let u = l2_normalize(&batch.z)?;
    let sets = positive_sets_for(&batch.y, &batch.m, cfg.variant)?;
    let n_valid = sets.valid.len();
    if n_valid == 0 {
        let loss = ContrastiveLoss {
            loss: 0.0,
            terms: vec![None; n],
            n_valid: 0,
        };
        return Ok((loss, Matrix::zeros(n, d)));
    }

    // c[i][j] = ∂ℓ_i/∂(u_i·u_j) for j ≠ i
    let rows: Vec<Option<(f64, Vec<f64>)>> = par::map_range(n, |i| {
        let pos = &sets.positives[i];
        if pos.is_empty() {
            return None;
        }
        let st = anchor(&u, i, pos, cfg.tau);
        let mut c: Vec<f64> = st.weights.iter().map(|w| w / cfg.tau).collect();
        let share = 1.0 / (pos.len() as f64 * cfg.tau);
        for &p in pos {
            c[p] -= share;
        }
        Some((st.term, c))
    });
    let terms: Vec<Option<f64>> = rows.iter().map(|r| r.as_ref().map(|(t, _)| *t)).collect();
    let loss = terms.iter().flatten().sum::<f64>() / n_valid as f64;
    let scale = 1.0 / n_valid as f64;

    let coef = |i: usize, j: usize| rows[i].as_ref().map_or(0.0, |(_, c)| c[j]);
    let grad_rows: Vec<Vec<f64>> = par::map_range(n, |j| {
        let mut g = vec![0.0; d];
        for k in 0..n {
            if k == j {
                continue;
            }
            let w = (coef(j, k) + coef(k, j)) * scale;
            if w != 0.0 {
                for (gv, uv) in g.iter_mut().zip(u.row(k)) {
                    *gv += w * uv;
                }
            }
        }
        // back through u = z/‖z‖
        let zj = batch.z.row(j);
        let norm = dot(zj, zj).sqrt();
        let uj = u.row(j);
        let gu = dot(&g, uj);
        g.iter().zip(uj).map(|(gv, uv)| (gv - gu * uv) / norm).collect()
    });
    let grad = Matrix::from_rows(&grad_rows).expect("rectangular");
    Ok((ContrastiveLoss { loss, terms, n_valid }, grad))
}

/// Gradient of the CM-SupCon loss with respect to the raw features.
pub fn cm_supcon_grad(batch: &BatchFeatures, tau: f64) -> Result<Matrix, LossError> {
    supcon_loss_and_grad(batch, &LossConfig::cross_modal(tau)).map(|(_, g)| g)
}

/// Mean binary cross-entropy of `sigmoid(logit)` against the targets
/// (`Fake` = 1), in the stable logit form, with its gradient per logit.
pub fn bce_with_logits(logits: &[f64], targets: &[Label]) -> Result<(f64, Vec<f64>), LossError> {
    check_len("targets", logits.len(), targets.len())?;
    if logits.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&x, y)| {
            let t = y.target();
            total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            (sigmoid(x) - t) / n
        })
        .collect();
    Ok((total / n, grad))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub bce: f64,
    pub cm: f64,
    pub total: f64,
}

/// `bce + lambda · contrastive`.
pub fn joint_loss(
    logits: &[f64],
    targets: &[Label],
    batch: &BatchFeatures,
    lambda: f64,
    cfg: &LossConfig,
) -> Result<JointLoss, LossError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(LossError::InvalidLambda(lambda));
    }
    check_len("logits", batch.len(), logits.len())?;
    let (bce, _) = bce_with_logits(logits, targets)?;
    let cm = if lambda == 0.0 {
        0.0
    } else {
        supcon_loss(batch, cfg)?.loss
    };
    Ok(JointLoss {
        bce,
        cm,
        total: if lambda == 0.0 { bce } else { bce + lambda * cm },
    })
}
