//! Anchor assignment and the baseline sampling strategies.
//!
//! Every strategy is expressed as a [`WeightAssignment`]: a classification
//! weight and a regression weight per anchor, plugged into the unified
//! weighted objective ([`crate::losses::unified_loss`]). Hard samplers
//! (random, OHEM, RPN) emit indicator weights; Focal and KL emit soft ones.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{iou, AnchorSet, GroundTruth};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Ohem,
    Focal,
    Kl,
    Rpn,
    Swn,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Random,
        Strategy::Ohem,
        Strategy::Focal,
        Strategy::Kl,
        Strategy::Rpn,
        Strategy::Swn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Ohem => "ohem",
            Strategy::Focal => "focal",
            Strategy::Kl => "kl",
            Strategy::Rpn => "rpn",
            Strategy::Swn => "swn",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown strategy {s:?} (expected random|ohem|focal|kl|rpn|swn)")))
    }
}

/// Sampling knobs shared by all strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: Strategy,
    /// Positives kept per scene by the count-based samplers.
    pub n_p: usize,
    /// Negatives kept per scene by the count-based samplers.
    pub n_n: usize,
    /// Focal exponent.
    pub gamma: f64,
    /// RPN foreground score threshold (strict).
    pub rho: f64,
    /// NMS IoU threshold used by the RPN weighting.
    pub nms_thr: f64,
    pub pos_thr: f64,
    pub neg_thr: f64,
    pub seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            name: Strategy::Random,
            n_p: 32,
            n_n: 96,
            gamma: 2.0,
            rho: 0.05,
            nms_thr: 0.7,
            pos_thr: 0.5,
            neg_thr: 0.4,
            seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(invalid("gamma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid("rho must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.nms_thr) {
            return Err(invalid("nms_thr must lie in [0, 1]"));
        }
        if !(self.neg_thr <= self.pos_thr) {
            return Err(invalid(format!(
                "neg_thr ({}) must not exceed pos_thr ({})",
                self.neg_thr, self.pos_thr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor assignment. Parallel vectors indexed by anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub assigned_gt: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
    pub labels: Vec<Label>,
    /// Target class; 0 (background) for non-positives.
    pub class_ids: Vec<usize>,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.labels[i] == Label::Positive
    }

    pub fn indices_with(&self, label: Label) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

/// Per-sample weights for the two loss terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightAssignment {
    pub s_cls: Vec<f64>,
    pub s_reg: Vec<f64>,
}

impl WeightAssignment {
    pub fn zeros(n: usize) -> Self {
        Self {
            s_cls: vec![0.0; n],
            s_reg: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.s_cls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_cls.is_empty()
    }

    /// Appends another assignment (used to stack scenes into one batch).
    pub fn extend(&mut self, other: &WeightAssignment) {
        self.s_cls.extend_from_slice(&other.s_cls);
        self.s_reg.extend_from_slice(&other.s_reg);
    }
}

/// Assigns each anchor to its best-overlapping ground truth.
///
/// Positive iff `max_iou >= pos_thr`, plus the best anchor of every ground
/// truth; negative iff `max_iou < neg_thr`; everything else is ignored.
pub fn match_anchors(
    anchors: &AnchorSet,
    gts: &[GroundTruth],
    cfg: &StrategyConfig,
) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(invalid("cannot match an empty anchor set"));
    }
    cfg.validate()?;
    let n = anchors.len();
    let mut assigned_gt = vec![None; n];
    let mut max_iou = vec![0.0; n];
    let mut best_for_gt = vec![(0usize, 0.0f64); gts.len()];
    for (i, a) in anchors.anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let o = iou(a, &g.bbox);
            if o > max_iou[i] {
                max_iou[i] = o;
                assigned_gt[i] = Some(j);
            }
            if o > best_for_gt[j].1 {
                best_for_gt[j] = (i, o);
            }
        }
    }
    let mut labels: Vec<Label> = max_iou
        .iter()
        .map(|&o| {
            if o >= cfg.pos_thr && o > 0.0 {
                Label::Positive
            } else if o < cfg.neg_thr {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();
    for (j, &(i, o)) in best_for_gt.iter().enumerate() {
        if o > 0.0 {
            labels[i] = Label::Positive;
            assigned_gt[i] = Some(j);
            max_iou[i] = o;
        }
    }
    let class_ids = labels
        .iter()
        .zip(&assigned_gt)
        .map(|(l, g)| match (l, g) {
            (Label::Positive, Some(j)) => gts[*j].class_id,
            _ => 0,
        })
        .collect();
    for (l, g) in labels.iter().zip(assigned_gt.iter_mut()) {
        if *l != Label::Positive {
            *g = None;
        }
    }
    Ok(MatchResult {
        assigned_gt,
        max_iou,
        labels,
        class_ids,
    })
}

/// `s_reg = s_cls * 1[positive]` for indicator strategies.
fn regression_from_selection(m: &MatchResult, s_cls: &[f64]) -> Vec<f64> {
    s_cls
        .iter()
        .enumerate()
        .map(|(i, &s)| if s == 1.0 && m.is_positive(i) { 1.0 } else { 0.0 })
        .collect()
}

/// Uniformly samples `n_p` positives and `n_n` negatives using `cfg.seed`.
pub fn random_sampling_weights(m: &MatchResult, cfg: &StrategyConfig) -> WeightAssignment {
    let mut r = rng::stream(cfg.seed, rng::streams::SAMPLING);
    let mut s_cls = vec![0.0; m.len()];
    for (label, want) in [(Label::Positive, cfg.n_p), (Label::Negative, cfg.n_n)] {
        let pool = m.indices_with(label);
        let k = want.min(pool.len());
        for pick in sample(&mut r, pool.len(), k).into_iter() {
            s_cls[pool[pick]] = 1.0;
        }
    }
    let s_reg = regression_from_selection(m, &s_cls);
    WeightAssignment { s_cls, s_reg }
}

/// Online hard example mining: top-`n_p` positives and top-`n_n` negatives
/// by classification loss, ranked separately; ties go to the lower index.
pub fn ohem_weights(m: &MatchResult, losses: &[f64], cfg: &StrategyConfig) -> Result<WeightAssignment> {
    if losses.len() != m.len() {
        return Err(Error::LengthMismatch {
            what: "ohem losses",
            expected: m.len(),
            got: losses.len(),
        });
    }
    let mut s_cls = vec![0.0; m.len()];
    for (label, want) in [(Label::Positive, cfg.n_p), (Label::Negative, cfg.n_n)] {
        let mut pool = m.indices_with(label);
        pool.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
        for &i in pool.iter().take(want) {
            s_cls[i] = 1.0;
        }
    }
    let s_reg = regression_from_selection(m, &s_cls);
    Ok(WeightAssignment { s_cls, s_reg })
}

/// Focal weighting: `s_cls = (1 - p)^gamma` where `p` is the probability of
/// the target class; regression on every positive.
pub fn focal_weights(m: &MatchResult, probs: &[f64], cfg: &StrategyConfig) -> Result<WeightAssignment> {
    if probs.len() != m.len() {
        return Err(Error::LengthMismatch {
            what: "focal probabilities",
            expected: m.len(),
            got: probs.len(),
        });
    }
    let mut w = WeightAssignment::zeros(m.len());
    for i in 0..m.len() {
        if m.labels[i] == Label::Ignore {
            continue;
        }
        let p = probs[i].clamp(0.0, 1.0);
        w.s_cls[i] = (1.0 - p).powf(cfg.gamma);
        if m.is_positive(i) {
            w.s_reg[i] = 1.0;
        }
    }
    Ok(w)
}

/// KL-Loss weighting: `s_reg = 1 / sigma^2` on positives, classification
/// weights as random sampling.
pub fn kl_regression_weights(
    m: &MatchResult,
    sigma2: &[f64],
    cfg: &StrategyConfig,
) -> Result<WeightAssignment> {
    if sigma2.len() != m.len() {
        return Err(Error::LengthMismatch {
            what: "kl variances",
            expected: m.len(),
            got: sigma2.len(),
        });
    }
    let mut w = random_sampling_weights(m, cfg);
    for i in 0..m.len() {
        w.s_reg[i] = if m.is_positive(i) {
            let v = sigma2[i];
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("sample {i}: predicted variance {v} must be positive")));
            }
            1.0 / v
        } else {
            0.0
        };
    }
    Ok(w)
}

/// RPN-as-sampler: `s_cls = 1[fg > rho] * 1[anchor survives NMS]`.
pub fn rpn_score_weights(
    m: &MatchResult,
    fg_scores: &[f64],
    kept_after_nms: &[usize],
    cfg: &StrategyConfig,
) -> Result<WeightAssignment> {
    if fg_scores.len() != m.len() {
        return Err(Error::LengthMismatch {
            what: "rpn scores",
            expected: m.len(),
            got: fg_scores.len(),
        });
    }
    let mut in_nms = vec![false; m.len()];
    for &k in kept_after_nms {
        *in_nms
            .get_mut(k)
            .ok_or_else(|| invalid(format!("nms index {k} out of range")))? = true;
    }
    let s_cls: Vec<f64> = (0..m.len())
        .map(|i| {
            if m.labels[i] != Label::Ignore && fg_scores[i] > cfg.rho && in_nms[i] {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let s_reg = regression_from_selection(m, &s_cls);
    Ok(WeightAssignment { s_cls, s_reg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{nms_indices, AnchorGrid, BBox, Detection};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_oneof, proptest, Just};
    use proptest::strategy::Strategy as PropStrategy;

    fn set(boxes: Vec<BBox>) -> AnchorSet {
        AnchorSet {
            anchors: boxes,
            grid: AnchorGrid {
                rows: 1,
                cols: 1,
                cell_size: 1.0,
            },
            scales: vec![1.0],
            ratios: vec![1.0],
        }
    }

    fn labelled(labels: &[Label]) -> MatchResult {
        MatchResult {
            assigned_gt: labels
                .iter()
                .map(|l| (*l == Label::Positive).then_some(0))
                .collect(),
            max_iou: labels
                .iter()
                .map(|l| if *l == Label::Positive { 0.8 } else { 0.1 })
                .collect(),
            labels: labels.to_vec(),
            class_ids: labels
                .iter()
                .map(|l| usize::from(*l == Label::Positive))
                .collect(),
        }
    }

    fn cfg() -> StrategyConfig {
        StrategyConfig {
            pos_thr: 0.5,
            neg_thr: 0.3,
            ..StrategyConfig::default()
        }
    }

    #[test]
    fn match_examples() {
        let gt = GroundTruth::new(BBox::new(0., 0., 2., 2.), 3).unwrap();
        let anchors = set(vec![
            BBox::new(0., 0., 2., 2.),
            BBox::new(10., 10., 11., 11.),
            BBox::new(1., 1., 3., 3.),
        ]);
        let m = match_anchors(&anchors, &[gt], &cfg()).unwrap();
        assert_eq!(m.labels[0], Label::Positive);
        assert_eq!(m.max_iou[0], 1.0);
        assert_eq!(m.class_ids[0], 3);
        assert_eq!(m.labels[1], Label::Negative);
        assert_eq!(m.labels[2], Label::Negative);
        assert!((m.max_iou[2] - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn best_anchor_is_forced_positive() {
        let gt = GroundTruth::new(BBox::new(0., 0., 2., 2.), 1).unwrap();
        let m = match_anchors(&set(vec![BBox::new(1., 1., 3., 3.)]), &[gt], &cfg()).unwrap();
        assert_eq!(m.labels[0], Label::Positive);
        assert_eq!(m.assigned_gt[0], Some(0));
    }

    #[test]
    fn match_errors() {
        assert!(match_anchors(&set(vec![]), &[], &cfg()).is_err());
        let bad = StrategyConfig {
            pos_thr: 0.3,
            neg_thr: 0.5,
            ..cfg()
        };
        assert!(match_anchors(&set(vec![BBox::new(0., 0., 1., 1.)]), &[], &bad).is_err());
    }

    #[test]
    fn ignore_band_between_thresholds() {
        let gt = GroundTruth::new(BBox::new(0., 0., 10., 10.), 1).unwrap();
        // iou 0.4 (ignore) and exact match (positive)
        let anchors = set(vec![BBox::new(0., 0., 10., 4.), BBox::new(0., 0., 10., 10.)]);
        let m = match_anchors(&anchors, &[gt], &cfg()).unwrap();
        assert_eq!(m.labels, vec![Label::Ignore, Label::Positive]);
    }

    #[test]
    fn random_sampling_examples() {
        use Label::*;
        let m = labelled(&[Positive, Negative, Negative, Positive, Ignore]);
        let all = random_sampling_weights(&m, &StrategyConfig { n_p: 10, n_n: 10, ..cfg() });
        assert_eq!(all.s_cls, vec![1., 1., 1., 1., 0.]);
        assert_eq!(all.s_reg, vec![1., 0., 0., 1., 0.]);

        let none = random_sampling_weights(&m, &StrategyConfig { n_p: 0, n_n: 0, ..cfg() });
        assert_eq!(none, WeightAssignment::zeros(5));

        let ten = labelled(&[Positive; 10]);
        let w = random_sampling_weights(&ten, &StrategyConfig { n_p: 4, seed: 11, ..cfg() });
        assert_eq!(w.s_cls.iter().filter(|&&s| s == 1.0).count(), 4);
        assert_eq!(w, random_sampling_weights(&ten, &StrategyConfig { n_p: 4, seed: 11, ..cfg() }));
    }

    #[test]
    fn ohem_examples() {
        use Label::*;
        let m = labelled(&[Positive, Positive, Positive]);
        let w = ohem_weights(&m, &[3.0, 1.0, 2.0], &StrategyConfig { n_p: 2, ..cfg() }).unwrap();
        assert_eq!(w.s_cls, vec![1., 0., 1.]);
        assert_eq!(w.s_reg, vec![1., 0., 1.]);

        let eq = labelled(&[Negative; 5]);
        let w = ohem_weights(&eq, &[0.5; 5], &StrategyConfig { n_n: 2, ..cfg() }).unwrap();
        assert_eq!(w.s_cls, vec![1., 1., 0., 0., 0.]);

        let w = ohem_weights(&m, &[3.0, 1.0, 2.0], &StrategyConfig { n_p: 0, ..cfg() }).unwrap();
        assert!(w.s_cls.iter().all(|&s| s == 0.0));
        assert!(ohem_weights(&m, &[1.0], &cfg()).is_err());
    }

    #[test]
    fn focal_examples() {
        use Label::*;
        let m = labelled(&[Positive, Negative, Ignore]);
        let w = focal_weights(&m, &[0.0, 0.3, 0.1], &StrategyConfig { gamma: 3.0, ..cfg() }).unwrap();
        assert_eq!(w.s_cls[0], 1.0);
        assert_eq!(w.s_cls[2], 0.0);
        assert_eq!(w.s_reg, vec![1.0, 0.0, 0.0]);
        let w = focal_weights(&m, &[0.9, 0.3, 0.1], &StrategyConfig { gamma: 0.0, ..cfg() }).unwrap();
        assert_eq!(&w.s_cls[..2], &[1.0, 1.0]);
        let w = focal_weights(&m, &[0.5, 0.5, 0.5], &StrategyConfig { gamma: 2.0, ..cfg() }).unwrap();
        assert_eq!(w.s_cls[0], 0.25);
    }

    #[test]
    fn kl_examples() {
        use Label::*;
        let m = labelled(&[Positive, Positive, Negative]);
        let c = StrategyConfig { n_p: 10, n_n: 10, ..cfg() };
        let w = kl_regression_weights(&m, &[1.0, 4.0, 9.0], &c).unwrap();
        assert_eq!(w.s_reg, vec![1.0, 0.25, 0.0]);
        assert_eq!(w.s_cls, random_sampling_weights(&m, &c).s_cls);
        assert!(kl_regression_weights(&m, &[0.0, 1.0, 1.0], &c).is_err());
        // variance of a negative is never consulted
        assert!(kl_regression_weights(&m, &[1.0, 1.0, -1.0], &c).is_ok());
    }

    #[test]
    fn rpn_examples() {
        use Label::*;
        let m = labelled(&[Positive, Positive, Negative]);
        let c = StrategyConfig { rho: 0.5, ..cfg() };
        // anchors 0 and 1 are identical; NMS keeps the higher-scored one
        let dets: Vec<Detection> = [0.9, 0.8, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &s)| Detection {
                bbox: if i < 2 {
                    BBox::new(0., 0., 2., 2.)
                } else {
                    BBox::new(5., 5., 6., 6.)
                },
                class_id: 0,
                score: s,
            })
            .collect();
        let kept = nms_indices(&dets, 0.5).unwrap();
        assert_eq!(kept, vec![0, 2]);
        let w = rpn_score_weights(&m, &[0.9, 0.8, 0.4], &kept, &c).unwrap();
        assert_eq!(w.s_cls, vec![1.0, 0.0, 0.0]);
        assert_eq!(w.s_reg, vec![1.0, 0.0, 0.0]);
        // strict inequality at rho
        let w = rpn_score_weights(&m, &[0.5, 0.8, 0.9], &kept, &c).unwrap();
        assert_eq!(w.s_cls, vec![0.0, 0.0, 1.0]);
    }

    fn arb_batch() -> impl PropStrategy<Value = (Vec<Label>, Vec<f64>)> {
        proptest::collection::vec(
            (prop_oneof![Just(Label::Positive), Just(Label::Negative), Just(Label::Ignore)], 0.0..1.0f64),
            1..40,
        )
        .prop_map(|v: Vec<(Label, f64)>| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn regression_weight_implies_positive(
            (labels, vals) in arb_batch(), n_p in 0..20usize, n_n in 0..20usize, seed in any::<u64>()
        ) {
            let m = labelled(&labels);
            let c = StrategyConfig { n_p, n_n, seed, rho: 0.3, ..cfg() };
            let kept: Vec<usize> = (0..labels.len()).step_by(2).collect();
            let sig: Vec<f64> = vals.iter().map(|v| v + 0.1).collect();
            let all = [
                random_sampling_weights(&m, &c),
                ohem_weights(&m, &vals, &c).unwrap(),
                focal_weights(&m, &vals, &c).unwrap(),
                kl_regression_weights(&m, &sig, &c).unwrap(),
                rpn_score_weights(&m, &vals, &kept, &c).unwrap(),
            ];
            for (k, w) in all.iter().enumerate() {
                for i in 0..labels.len() {
                    if w.s_reg[i] > 0.0 {
                        prop_assert!(m.is_positive(i));
                    }
                    prop_assert!(w.s_cls[i] >= 0.0);
                    if k != 2 && k != 3 {
                        prop_assert!(w.s_cls[i] == 0.0 || w.s_cls[i] == 1.0);
                    }
                }
            }
        }

        #[test]
        fn ohem_scale_invariant((labels, vals) in arb_batch(), c_scale in 1e-3..1e3f64, n in 0..10usize) {
            let m = labelled(&labels);
            let c = StrategyConfig { n_p: n, n_n: n, ..cfg() };
            let scaled: Vec<f64> = vals.iter().map(|v| v * c_scale).collect();
            prop_assert_eq!(ohem_weights(&m, &vals, &c).unwrap(), ohem_weights(&m, &scaled, &c).unwrap());
        }

        #[test]
        fn focal_non_increasing_in_p(mut ps in proptest::collection::vec(0.0..1.0f64, 2..30), gamma in 0.01..5.0f64) {
            ps.sort_by(f64::total_cmp);
            let m = labelled(&vec![Label::Positive; ps.len()]);
            let w = focal_weights(&m, &ps, &StrategyConfig { gamma, ..cfg() }).unwrap();
            for pair in w.s_cls.windows(2) {
                prop_assert!(pair[1] <= pair[0]);
            }
        }
    }
}
