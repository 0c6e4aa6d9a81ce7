//! Multi-run experiments: initialization sensitivity and the lambda sweep.

use serde::Serialize;

use super::trace::{convergence_trace, ConvergenceTrace};
use crate::error::{invalid, Result};
use crate::fmt::sig9;
use crate::losses::RegularizerConfig;
use crate::matching::Strategy;
use crate::toydet::{train, train_for, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub biases: Vec<f64>,
    /// Iteration at which the traces are compared (1-based).
    pub at_iter: usize,
    pub traces: Vec<ConvergenceTrace>,
    /// Smoothed `(w_cls, w_reg)` of each run at `at_iter`.
    pub values: Vec<(f64, f64)>,
    pub max_gap_cls: f64,
    pub max_gap_reg: f64,
    pub mean_cls: f64,
    pub mean_reg: f64,
}

impl SensitivityReport {
    /// Largest pairwise gap relative to the common mean, over both tasks.
    pub fn relative_gap(&self) -> f64 {
        let rel = |gap: f64, mean: f64| if mean > 0.0 { gap / mean } else { f64::INFINITY };
        rel(self.max_gap_cls, self.mean_cls).max(rel(self.max_gap_reg, self.mean_reg))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bias,w_cls,w_reg\n");
        for (b, (c, r)) in self.biases.iter().zip(&self.values) {
            s.push_str(&format!("{},{},{}\n", sig9(*b), sig9(*c), sig9(*r)));
        }
        s
    }
}

fn spread(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = xs.clone().fold(f64::INFINITY, f64::min);
    let hi = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let n = xs.clone().count() as f64;
    (hi - lo, xs.sum::<f64>() / n)
}

/// Trains the weighting network once per initial head bias, all other seeds
/// shared, and compares the smoothed average weights after `k` iterations.
pub fn init_sensitivity(base: &TrainConfig, biases: &[f64], k: usize, width: usize) -> Result<SensitivityReport> {
    if biases.is_empty() || k == 0 {
        return Err(invalid("init_sensitivity needs at least one bias and k >= 1"));
    }
    let mut traces = Vec::with_capacity(biases.len());
    let mut values = Vec::with_capacity(biases.len());
    for &b in biases {
        let mut cfg = base.with_strategy(Strategy::Swn);
        cfg.swn.last_bias = b;
        let out = train_for(&cfg, Some(k))?;
        let tr = convergence_trace(&out.history, width)?;
        let i = tr.iter.len().min(k) - 1;
        values.push((tr.w_cls[i], tr.w_reg[i]));
        traces.push(tr);
    }
    let (max_gap_cls, mean_cls) = spread(values.iter().map(|v| v.0));
    let (max_gap_reg, mean_reg) = spread(values.iter().map(|v| v.1));
    Ok(SensitivityReport {
        biases: biases.to_vec(),
        at_iter: k,
        traces,
        values,
        max_gap_cls,
        max_gap_reg,
        mean_cls,
        mean_reg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean weights over the last epoch.
    pub w_cls: f64,
    pub w_reg: f64,
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,ap,ap50,ap75,w_cls,w_reg\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            sig9(r.lambda),
            sig9(r.ap),
            sig9(r.ap50),
            sig9(r.ap75),
            sig9(r.w_cls),
            sig9(r.w_reg)
        ));
    }
    s
}

/// Trains the weighting network with `lambda1 = lambda2 = lambda` for each
/// value, sharing all seeds.
pub fn lambda_sweep(base: &TrainConfig, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&l| {
            let mut cfg = base.with_strategy(Strategy::Swn);
            cfg.regularizer = RegularizerConfig::shared(l);
            let out = train(&cfg)?;
            let h = &out.history;
            let eval = h.final_eval().ok_or_else(|| invalid("sweep run has no evaluation (epochs = 0?)"))?;
            let last = h.iters.last().map_or(0, |r| r.epoch);
            let tail: Vec<_> = h.iters.iter().filter(|r| r.epoch == last).collect();
            let n = tail.len().max(1) as f64;
            Ok(SweepRow {
                lambda: l,
                ap: eval.ap,
                ap50: eval.ap50,
                ap75: eval.ap75,
                w_cls: tail.iter().map(|r| r.w_cls_all).sum::<f64>() / n,
                w_reg: tail.iter().map(|r| r.w_reg_pos).sum::<f64>() / n,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::standard_noisy();
        c.schedule.epochs = 1;
        c.schedule.iters_per_epoch = 6;
        c.eval.heldout_scenes = 2;
        c
    }

    #[test]
    fn single_and_duplicated_bias_have_zero_gap() {
        let r = init_sensitivity(&tiny(), &[0.3], 5, 2).unwrap();
        assert_eq!((r.max_gap_cls, r.max_gap_reg), (0.0, 0.0));
        let r = init_sensitivity(&tiny(), &[0.5, 0.5], 5, 2).unwrap();
        assert_eq!((r.max_gap_cls, r.max_gap_reg), (0.0, 0.0));
        assert_eq!(r.traces[0], r.traces[1]);
    }

    #[test]
    fn sweep_rows_reproduce() {
        let a = lambda_sweep(&tiny(), &[0.5]).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, lambda_sweep(&tiny(), &[0.5]).unwrap());
        assert!(init_sensitivity(&tiny(), &[], 5, 1).is_err());
    }
}
