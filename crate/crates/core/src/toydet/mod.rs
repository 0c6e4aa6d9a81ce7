//! A desk-scale detection benchmark and the trainer that runs any weighting
//! strategy on it.

pub mod compare;
pub mod detector;
pub mod scene;
pub mod train;

pub use compare::{comparison_to_csv, run_strategy_comparison, ComparisonRow};
pub use detector::{detections, detector_forward, DetectorConfig, DetectorOutput, DetectorParams, EvalConfig};
pub use scene::{generate_scene, scene_seed, Scene, SceneConfig};
pub use train::{
    train, train_for, AnchorConfig, Benchmark, EpochRecord, EvalSummary, IterRecord, NoiseStats, ScheduleConfig,
    TrainConfig, TrainHistory, TrainOutcome,
};
