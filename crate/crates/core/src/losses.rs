//! Loss formulas.
//!
//! * per-sample terms: softmax cross-entropy and squared L2 on offsets;
//! * the unified weighted objective, where a sampling strategy is just a pair
//!   of weight vectors;
//! * the uncertainty-weighted joint loss in log-sigma form,
//!   `exp(-2 m_cls) L_cls + l1 m_cls + exp(-2 m_reg) L_reg + l2 m_reg`,
//!   with its analytic gradient;
//! * helpers for analysing that loss: the closed-form optimal variance, the
//!   tempered softmax, and the error of the log-sum-exp approximation that
//!   turns the tempered likelihood into the weighted form.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::Offset4;
use crate::matching::{Label, WeightAssignment};

/// Floor applied before taking logs of regression losses.
pub const LOSS_FLOOR: f64 = 1e-12;

/// One sample's training state as seen by the weighting machinery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    /// `Positive` or `Negative`; ignored anchors never become records.
    pub label: Label,
    pub l_cls: f64,
    /// 0 for negatives.
    pub l_reg: f64,
    /// IoU of the predicted box with its ground truth; 0 for negatives.
    pub iou: f64,
    /// Predicted probability of the target class; 0 for negatives.
    pub prob: f64,
    /// Predicted log-sigma for each task.
    pub m_cls: f64,
    pub m_reg: f64,
    /// Effective weights applied to the loss terms.
    pub s_cls: f64,
    pub s_reg: f64,
}

impl SampleRecord {
    pub fn positive(index: usize, l_cls: f64, l_reg: f64, iou: f64, prob: f64) -> Self {
        Self {
            index,
            label: Label::Positive,
            l_cls,
            l_reg,
            iou,
            prob,
            m_cls: 0.0,
            m_reg: 0.0,
            s_cls: 1.0,
            s_reg: 1.0,
        }
    }

    /// A negative sample: regression loss, IoU and probability are zeroed.
    pub fn negative(index: usize, l_cls: f64) -> Self {
        Self {
            index,
            label: Label::Negative,
            l_cls,
            l_reg: 0.0,
            iou: 0.0,
            prob: 0.0,
            m_cls: 0.0,
            m_reg: 0.0,
            s_cls: 1.0,
            s_reg: 0.0,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label == Label::Positive
    }
}

/// Normalizers of the two loss sums: training samples and foreground samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossNormalization {
    pub n1: usize,
    pub n2: usize,
}

impl LossNormalization {
    /// Counts the samples that carry a nonzero weight in each term.
    pub fn from_weights(w: &WeightAssignment) -> Self {
        Self {
            n1: w.s_cls.iter().filter(|&&s| s > 0.0).count(),
            n2: w.s_reg.iter().filter(|&&s| s > 0.0).count(),
        }
    }

    pub fn inv_n1(&self) -> f64 {
        if self.n1 == 0 {
            0.0
        } else {
            1.0 / self.n1 as f64
        }
    }

    pub fn inv_n2(&self) -> f64 {
        if self.n2 == 0 {
            0.0
        } else {
            1.0 / self.n2 as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }
}

impl RegularizerConfig {
    pub fn shared(lambda: f64) -> Self {
        Self {
            lambda1: lambda,
            lambda2: lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(invalid("regularizer weights must be non-negative"));
        }
        Ok(())
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[label]`, shifted by the max logit.
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

/// Gradient of [`softmax_ce`] with respect to the logits: `softmax - onehot`.
pub fn softmax_ce_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let mut p = softmax(logits);
    p[label] -= 1.0;
    p
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Squared Euclidean distance between two offset vectors.
pub fn l2_regression(pred: &Offset4, target: &Offset4) -> f64 {
    pred.to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

/// d/d(pred) of [`l2_regression`].
pub fn l2_regression_grad(pred: &Offset4, target: &Offset4) -> [f64; 4] {
    let (p, t) = (pred.to_array(), target.to_array());
    [
        2.0 * (p[0] - t[0]),
        2.0 * (p[1] - t[1]),
        2.0 * (p[2] - t[2]),
        2.0 * (p[3] - t[3]),
    ]
}

/// The unified objective
/// `(1/N1) sum s_cls L_cls + (1/N2) sum s_reg L_reg`; a term whose
/// normalizer is zero contributes 0.
pub fn unified_loss(
    records: &[SampleRecord],
    w: &WeightAssignment,
    norm: LossNormalization,
) -> Result<f64> {
    for (what, len) in [("s_cls", w.s_cls.len()), ("s_reg", w.s_reg.len())] {
        if len != records.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: records.len(),
                got: len,
            });
        }
    }
    let mut cls = 0.0;
    let mut reg = 0.0;
    for (i, r) in records.iter().enumerate() {
        cls += w.s_cls[i] * r.l_cls;
        reg += w.s_reg[i] * r.l_reg;
    }
    Ok(cls * norm.inv_n1() + reg * norm.inv_n2())
}

/// The unweighted objective summed over explicit index subsets; the
/// reference the unified form must reproduce for indicator weights.
pub fn subset_loss(
    records: &[SampleRecord],
    cls_subset: &[usize],
    reg_subset: &[usize],
    norm: LossNormalization,
) -> f64 {
    let mut cls = 0.0;
    for &i in cls_subset {
        cls += records[i].l_cls;
    }
    let mut reg = 0.0;
    for &i in reg_subset {
        reg += records[i].l_reg;
    }
    cls * norm.inv_n1() + reg * norm.inv_n2()
}

/// Per-sample uncertainty-weighted loss in log-sigma form. The regression
/// half only applies to positives.
pub fn uncertainty_loss(rec: &SampleRecord, reg: &RegularizerConfig) -> f64 {
    let mut v = (-2.0 * rec.m_cls).exp() * rec.l_cls + reg.lambda1 * rec.m_cls;
    if rec.is_positive() {
        v += (-2.0 * rec.m_reg).exp() * rec.l_reg + reg.lambda2 * rec.m_reg;
    }
    v
}

/// Partial derivatives of [`uncertainty_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UncertaintyGrad {
    pub d_l_cls: f64,
    pub d_l_reg: f64,
    pub d_m_cls: f64,
    pub d_m_reg: f64,
}

pub fn uncertainty_loss_grad(rec: &SampleRecord, reg: &RegularizerConfig) -> UncertaintyGrad {
    let w_cls = (-2.0 * rec.m_cls).exp();
    let mut g = UncertaintyGrad {
        d_l_cls: w_cls,
        d_m_cls: -2.0 * w_cls * rec.l_cls + reg.lambda1,
        ..Default::default()
    };
    if rec.is_positive() {
        let w_reg = (-2.0 * rec.m_reg).exp();
        g.d_l_reg = w_reg;
        g.d_m_reg = -2.0 * w_reg * rec.l_reg + reg.lambda2;
    }
    g
}

/// Minimizer of `L / sigma^2 + lambda2 * log(sigma)` over sigma, returned as
/// `(sigma^2, minimum value)`: `sigma^2 = 2 L / lambda2` and the minimum is
/// `lambda2/2 * (1 + log(2 L / lambda2))`.
pub fn optimal_sigma_with(l_reg: f64, lambda2: f64) -> Result<(f64, f64)> {
    if !(l_reg > 0.0) || !l_reg.is_finite() {
        return Err(invalid(format!("regression loss must be positive, got {l_reg}")));
    }
    if !(lambda2 > 0.0) {
        return Err(invalid(format!("lambda2 must be positive, got {lambda2}")));
    }
    let sigma2 = 2.0 * l_reg.max(LOSS_FLOOR) / lambda2;
    Ok((sigma2, 0.5 * lambda2 * (1.0 + sigma2.ln())))
}

/// [`optimal_sigma_with`] at `lambda2 = 1`.
pub fn optimal_sigma(l_reg: f64) -> Result<(f64, f64)> {
    optimal_sigma_with(l_reg, 1.0)
}

/// Softmax of `logits / t`.
pub fn tempered_softmax(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {t}")));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / t).collect();
    Ok(softmax(&scaled))
}

/// `|lhs - rhs|` for the approximation
/// `(1/sigma) sum_c exp(p_c / sigma^2) ~ (sum_c exp(p_c))^(1/sigma^2)`,
/// which is exact at `sigma = 1`.
pub fn temperature_approx_error(logits: &[f64], sigma: f64) -> f64 {
    let inv_var = 1.0 / (sigma * sigma);
    let lhs: f64 = logits.iter().map(|p| (p * inv_var).exp()).sum::<f64>() / sigma;
    let rhs = logits.iter().map(|p| p.exp()).sum::<f64>().powf(inv_var);
    (lhs - rhs).abs()
}

/// KL-Loss style regression term: `exp(-2 m) ||pred - target||^2 + lambda2 m`.
pub fn kl_baseline_loss(pred: &Offset4, target: &Offset4, m_reg: f64, lambda2: f64) -> f64 {
    (-2.0 * m_reg).exp() * l2_regression(pred, target) + lambda2 * m_reg
}
