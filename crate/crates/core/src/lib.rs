//! Sample weighting for region-based object detection.
//!
//! Sampling strategies are expressed as per-sample classification and
//! regression weights over one weighted objective. A small network learns
//! those weights from each sample's losses, IoU and score through an
//! uncertainty-weighted loss. A synthetic detection benchmark, COCO-style
//! evaluation and a command-line driver ship with it.
//!
//! The guide in `book/` is compiled into the [`guide`] modules below, so its
//! examples run as doc-tests.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod fmt;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod nn;
pub mod rng;
pub mod swn;
pub mod toydet;

pub use error::{Error, Result};

/// Chapters of the guide.
pub mod guide {
    #[doc = include_str!("../../../book/src/intro.md")]
    pub mod intro {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub mod geometry {}
    #[doc = include_str!("../../../book/src/strategies.md")]
    pub mod strategies {}
    #[doc = include_str!("../../../book/src/uncertainty.md")]
    pub mod uncertainty {}
    #[doc = include_str!("../../../book/src/swn.md")]
    pub mod swn {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    pub mod benchmark {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
