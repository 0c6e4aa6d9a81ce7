//! Side-by-side runs of several strategies on identical data streams.

use serde::Serialize;

use super::train::{train, TrainConfig};
use crate::error::{invalid, Result};
use crate::fmt::sig9;
use crate::matching::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean weights over the final epoch.
    pub w_cls: f64,
    pub w_reg: f64,
}

/// Trains `base` once per strategy. Seeds, scenes and sampling streams are
/// shared, so only the weighting differs between rows.
pub fn run_strategy_comparison(base: &TrainConfig, strategies: &[Strategy]) -> Result<Vec<ComparisonRow>> {
    strategies
        .iter()
        .map(|&s| {
            let out = train(&base.with_strategy(s))?;
            let h = &out.history;
            let eval = h
                .final_eval()
                .ok_or_else(|| invalid("comparison needs at least one trained epoch"))?;
            let last = h.iters.last().map_or(0, |r| r.epoch);
            let tail: Vec<_> = h.iters.iter().filter(|r| r.epoch == last).collect();
            let n = tail.len().max(1) as f64;
            Ok(ComparisonRow {
                strategy: s,
                ap: eval.ap,
                ap50: eval.ap50,
                ap75: eval.ap75,
                w_cls: tail.iter().map(|r| r.w_cls_all).sum::<f64>() / n,
                w_reg: tail.iter().map(|r| r.w_reg_pos).sum::<f64>() / n,
            })
        })
        .collect()
}

pub fn comparison_to_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("strategy,ap,ap50,ap75,w_cls,w_reg\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.strategy,
            sig9(r.ap),
            sig9(r.ap50),
            sig9(r.ap75),
            sig9(r.w_cls),
            sig9(r.w_reg)
        ));
    }
    s
}
