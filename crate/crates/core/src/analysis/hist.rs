//! Share of (weighted) loss per IoU bin over positive samples.

use serde::{Deserialize, Serialize};

use crate::fmt::sig9;
use crate::losses::SampleRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cls,
    Reg,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IoUHistogram {
    /// `k + 1` edges for `k` bins; the last bin is closed on the right.
    pub edges: Vec<f64>,
    /// Percentage of the binned total per bin.
    pub percent: Vec<f64>,
    pub counts: Vec<usize>,
    /// Sum of the binned quantity.
    pub total: f64,
    /// Positives whose IoU falls outside the edges.
    pub out_of_range: usize,
}

impl IoUHistogram {
    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Summed share of the bins lying inside `[lo, hi]`.
    pub fn share_between(&self, lo: f64, hi: f64) -> f64 {
        self.percent
            .iter()
            .enumerate()
            .filter(|(k, _)| self.edges[*k] >= lo && self.edges[k + 1] <= hi)
            .map(|(_, p)| p)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count,percent\n");
        for k in 0..self.percent.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                sig9(self.edges[k]),
                sig9(self.edges[k + 1]),
                self.counts[k],
                sig9(self.percent[k])
            ));
        }
        s
    }
}

/// Edges `0.5, 0.6, ..., 1.0`.
pub fn default_edges() -> Vec<f64> {
    (5..=10).map(|k| k as f64 / 10.0).collect()
}

fn bin_of(edges: &[f64], v: f64) -> Option<usize> {
    let last = edges.len() - 1;
    if v < edges[0] || v > edges[last] {
        return None;
    }
    (0..last).find(|&k| v < edges[k + 1] || k + 1 == last)
}

/// Histogram over [`default_edges`].
pub fn loss_distribution_by_iou(records: &[SampleRecord], which: LossKind, weighted: bool) -> IoUHistogram {
    loss_distribution_with_edges(records, which, weighted, &default_edges())
}

/// Per-bin share of `sum s * L` (or `sum L` when unweighted) over positive
/// records, binned by their IoU.
pub fn loss_distribution_with_edges(
    records: &[SampleRecord],
    which: LossKind,
    weighted: bool,
    edges: &[f64],
) -> IoUHistogram {
    assert!(edges.len() >= 2, "a histogram needs at least one bin");
    let bins = edges.len() - 1;
    let mut mass = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    let mut out_of_range = 0;
    for r in records.iter().filter(|r| r.is_positive()) {
        let Some(k) = bin_of(edges, r.iou) else {
            out_of_range += 1;
            continue;
        };
        let (l, s) = match which {
            LossKind::Cls => (r.l_cls, r.s_cls),
            LossKind::Reg => (r.l_reg, r.s_reg),
        };
        mass[k] += if weighted { s * l } else { l };
        counts[k] += 1;
    }
    let total: f64 = mass.iter().sum();
    let percent = mass
        .iter()
        .map(|m| if total > 0.0 { 100.0 * m / total } else { 0.0 })
        .collect();
    IoUHistogram {
        edges: edges.to_vec(),
        percent,
        counts,
        total,
        out_of_range,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pos(iou: f64, l: f64, s: f64) -> SampleRecord {
        let mut r = SampleRecord::positive(0, l, l, iou, 0.5);
        r.s_cls = s;
        r.s_reg = s;
        r
    }

    #[test]
    fn single_bin_takes_everything() {
        let h = loss_distribution_by_iou(&[pos(0.72, 1.0, 1.0), pos(0.75, 2.0, 0.5)], LossKind::Cls, true);
        assert_eq!(h.percent, vec![0.0, 0.0, 100.0, 0.0, 0.0]);
    }

    #[test]
    fn weighted_shares() {
        let h = loss_distribution_by_iou(&[pos(0.55, 1.0, 1.0), pos(0.95, 1.0, 3.0)], LossKind::Reg, true);
        assert_eq!(h.percent[0], 25.0);
        assert_eq!(h.percent[4], 75.0);
        assert_eq!(h.share_between(0.8, 1.0), 75.0);
    }

    #[test]
    fn edges_and_boundaries() {
        assert_eq!(default_edges(), vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
        let h = loss_distribution_by_iou(
            &[pos(0.5, 1.0, 1.0), pos(0.6, 1.0, 1.0), pos(1.0, 1.0, 1.0), pos(0.3, 1.0, 1.0)],
            LossKind::Cls,
            false,
        );
        assert_eq!(h.counts, vec![1, 1, 0, 0, 1]);
        assert_eq!(h.out_of_range, 1);
    }

    #[test]
    fn negatives_and_empty() {
        let h = loss_distribution_by_iou(&[SampleRecord::negative(0, 3.0)], LossKind::Cls, true);
        assert!(h.is_empty());
        assert!(h.percent.iter().all(|&p| p == 0.0));
    }

    proptest! {
        #[test]
        fn shares_sum_to_hundred(items in proptest::collection::vec((0.5..=1.0f64, 0.01..5.0f64, 0.01..3.0f64), 1..60)) {
            let recs: Vec<_> = items.iter().map(|&(i, l, s)| pos(i, l, s)).collect();
            let h = loss_distribution_by_iou(&recs, LossKind::Cls, true);
            prop_assert!((h.percent.iter().sum::<f64>() - 100.0).abs() < 1e-6);
            prop_assert_eq!(h.counts.iter().sum::<usize>(), recs.len());
        }

        #[test]
        fn equal_weights_match_unweighted(items in proptest::collection::vec((0.5..=1.0f64, 0.01..5.0f64), 1..60), s in 0.1..4.0f64) {
            let recs: Vec<_> = items.iter().map(|&(i, l)| pos(i, l, s)).collect();
            let a = loss_distribution_by_iou(&recs, LossKind::Reg, true);
            let b = loss_distribution_by_iou(&recs, LossKind::Reg, false);
            for (x, y) in a.percent.iter().zip(&b.percent) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
