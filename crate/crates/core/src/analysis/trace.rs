//! Smoothed per-iteration series of weights and losses.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::fmt::sig9;
use crate::toydet::TrainHistory;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTrace {
    pub iter: Vec<usize>,
    /// Mean classification weight over all sampled samples.
    pub w_cls: Vec<f64>,
    pub w_reg: Vec<f64>,
    pub l_cls: Vec<f64>,
    pub l_reg: Vec<f64>,
}

/// Trailing moving average: entry `i` is the mean of the last
/// `min(width, i + 1)` values.
pub fn moving_average(xs: &[f64], width: usize) -> Vec<f64> {
    let w = width.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let window = &xs[lo..=i];
            window.iter().sum::<f64>() / window.len() as f64
        })
        .collect()
}

/// Means of the first and last tenth of `xs` (at least one value each).
pub fn decile_means(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let k = (xs.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&xs[..k]), mean(&xs[xs.len() - k..])))
}

/// Extracts the weight and loss series from `h`, smoothed with a trailing
/// window of `width` iterations (1 disables smoothing).
pub fn convergence_trace(h: &TrainHistory, width: usize) -> Result<ConvergenceTrace> {
    if h.iters.is_empty() {
        return Err(invalid("convergence trace of an empty history"));
    }
    let col = |f: fn(&crate::toydet::IterRecord) -> f64| -> Vec<f64> {
        moving_average(&h.iters.iter().map(f).collect::<Vec<_>>(), width)
    };
    Ok(ConvergenceTrace {
        iter: h.iters.iter().map(|r| r.iter).collect(),
        w_cls: col(|r| r.w_cls_all),
        w_reg: col(|r| r.w_reg_pos),
        l_cls: col(|r| r.mean_lcls),
        l_reg: col(|r| r.mean_lreg),
    })
}

impl ConvergenceTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,w_cls,w_reg,l_cls,l_reg\n");
        for i in 0..self.iter.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                self.iter[i],
                sig9(self.w_cls[i]),
                sig9(self.w_reg[i]),
                sig9(self.l_cls[i]),
                sig9(self.l_reg[i])
            ));
        }
        s
    }
}
