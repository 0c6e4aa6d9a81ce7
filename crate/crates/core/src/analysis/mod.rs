//! Evaluation and diagnostics: COCO-style mAP, loss share by IoU bin,
//! smoothed convergence traces, multi-run experiments and SVG charts.

pub mod experiments;
pub mod gradients;
pub mod hist;
pub mod map;
pub mod svg;
pub mod trace;

pub use experiments::{init_sensitivity, lambda_sweep, sweep_to_csv, SensitivityReport, SweepRow};
pub use gradients::{gradient_suite, gradients_to_csv, GradientRow};
pub use hist::{loss_distribution_by_iou, IoUHistogram, LossKind};
pub use map::{coco_map, EvalReport};
pub use trace::{convergence_trace, decile_means, moving_average, ConvergenceTrace};
