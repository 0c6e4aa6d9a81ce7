//! Synthetic scenes: boxes on a square canvas, noisy annotations, and
//! handcrafted per-anchor features.
//!
//! Feature layout for an anchor whose best true box has IoU `o`:
//!
//! | dims | content |
//! |------|---------|
//! | 0 | `o` |
//! | 1..5 | offsets to the true box, clamped to ±3 (0 when `o = 0`) |
//! | 5..5+C | `signal * o` on the true class, 0 elsewhere |
//! | rest | 0 |
//!
//! plus i.i.d. Gaussian noise on every dimension. Features see the true
//! boxes and classes; matching and training targets use the annotations,
//! which are jittered and label-flipped.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{encode_offsets, iou, AnchorSet, BBox, GroundTruth};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub canvas: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Foreground classes (background is extra).
    pub num_classes: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub feature_dim: usize,
    /// Scale of the class signature.
    pub signal: f64,
    /// Annotation jitter std per coordinate, as a fraction of the canvas.
    pub jitter_frac: f64,
    pub flip_prob: f64,
    pub feature_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas: 64.0,
            min_objects: 1,
            max_objects: 3,
            num_classes: 3,
            min_size: 12.0,
            max_size: 28.0,
            feature_dim: 12,
            signal: 2.0,
            jitter_frac: 0.05,
            flip_prob: 0.2,
            feature_noise: 0.1,
        }
    }
}

impl SceneConfig {
    /// Noise-free variant of `self`.
    pub fn clean(&self) -> Self {
        Self {
            jitter_frac: 0.0,
            flip_prob: 0.0,
            feature_noise: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("scenes need at least 2 foreground classes"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(invalid("objects per scene: need 1 <= min <= max"));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= self.canvas) {
            return Err(invalid("object sizes must satisfy 0 < min <= max <= canvas"));
        }
        if self.feature_dim < 5 + self.num_classes {
            return Err(invalid(format!(
                "feature_dim must be >= {} for {} classes",
                5 + self.num_classes,
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid("flip_prob must lie in [0, 1]"));
        }
        if !(self.jitter_frac >= 0.0 && self.feature_noise >= 0.0 && self.signal.is_finite()) {
            return Err(invalid("noise levels must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// True boxes and classes.
    pub clean: Vec<GroundTruth>,
    /// What the annotator wrote down; the training targets.
    pub annotated: Vec<GroundTruth>,
    /// Whether annotation `k` carries a wrong class.
    pub flipped: Vec<bool>,
    /// One row per anchor.
    pub features: Array2<f64>,
}

/// Seed of scene `index` in the family rooted at `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    rng::substream(base, rng::streams::SCENE, index).random()
}

fn gaussian(r: &mut rng::Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(r)
}

/// Draws one scene. Deterministic in `seed`.
pub fn generate_scene(cfg: &SceneConfig, anchors: &AnchorSet, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut r = rng::stream(seed, rng::streams::SCENE);
    let n = r.random_range(cfg.min_objects..=cfg.max_objects);
    let mut clean = Vec::with_capacity(n);
    for _ in 0..n {
        let w = r.random_range(cfg.min_size..=cfg.max_size);
        let h = r.random_range(cfg.min_size..=cfg.max_size);
        let cx = r.random_range(0.5 * w..=cfg.canvas - 0.5 * w);
        let cy = r.random_range(0.5 * h..=cfg.canvas - 0.5 * h);
        let class = r.random_range(1..=cfg.num_classes);
        clean.push(GroundTruth::new(BBox::from_center(cx, cy, w, h), class)?);
    }

    let std = cfg.jitter_frac * cfg.canvas;
    let mut annotated = Vec::with_capacity(n);
    let mut flipped = Vec::with_capacity(n);
    for gt in &clean {
        let b = gt.bbox;
        let (mut x1, mut y1, mut x2, mut y2) = (
            b.x1 + gaussian(&mut r, std),
            b.y1 + gaussian(&mut r, std),
            b.x2 + gaussian(&mut r, std),
            b.y2 + gaussian(&mut r, std),
        );
        if x2 < x1 {
            std::mem::swap(&mut x1, &mut x2);
        }
        if y2 < y1 {
            std::mem::swap(&mut y1, &mut y2);
        }
        // keep annotations non-degenerate
        x2 = x2.max(x1 + 1.0);
        y2 = y2.max(y1 + 1.0);
        let flip = r.random_bool(cfg.flip_prob);
        let class = if flip {
            let other = r.random_range(1..cfg.num_classes);
            if other >= gt.class_id {
                other + 1
            } else {
                other
            }
        } else {
            gt.class_id
        };
        annotated.push(GroundTruth::new(BBox::new(x1, y1, x2, y2), class)?);
        flipped.push(flip);
    }

    let mut features = Array2::zeros((anchors.len(), cfg.feature_dim));
    for (a, anchor) in anchors.anchors.iter().enumerate() {
        let mut best = 0.0;
        let mut best_k = None;
        for (k, gt) in clean.iter().enumerate() {
            let o = iou(anchor, &gt.bbox);
            if o > best {
                best = o;
                best_k = Some(k);
            }
        }
        let mut row = features.row_mut(a);
        if let Some(k) = best_k {
            row[0] = best;
            let off = encode_offsets(anchor, &clean[k].bbox)?.to_array();
            for (j, v) in off.into_iter().enumerate() {
                row[1 + j] = v.clamp(-3.0, 3.0);
            }
            row[4 + clean[k].class_id] = cfg.signal * best;
        }
        for v in row.iter_mut() {
            *v += gaussian(&mut r, cfg.feature_noise);
        }
    }
    Ok(Scene {
        clean,
        annotated,
        flipped,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_anchors, AnchorGrid};

    fn anchors() -> AnchorSet {
        let grid = AnchorGrid { rows: 16, cols: 16, cell_size: 4.0 };
        generate_anchors(grid, &[3.0, 5.0], &[0.5, 1.0, 2.0]).unwrap()
    }

    #[test]
    fn deterministic_in_seed() {
        let a = anchors();
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, &a, 5).unwrap(), generate_scene(&cfg, &a, 5).unwrap());
        assert_ne!(generate_scene(&cfg, &a, 5).unwrap(), generate_scene(&cfg, &a, 6).unwrap());
    }

    #[test]
    fn noise_free_features_are_geometric() {
        let a = anchors();
        let cfg = SceneConfig::default().clean();
        let s = generate_scene(&cfg, &a, 9).unwrap();
        assert_eq!(s.clean, s.annotated);
        assert!(s.flipped.iter().all(|f| !f));
        for (i, anchor) in a.anchors.iter().enumerate() {
            let row = s.features.row(i);
            let (k, o) = s
                .clean
                .iter()
                .enumerate()
                .map(|(k, g)| (k, iou(anchor, &g.bbox)))
                .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            assert_eq!(row[0], o);
            if o > 0.0 {
                assert_eq!(row[4 + s.clean[k].class_id], cfg.signal * o);
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
            }
            assert!(row.iter().skip(5 + cfg.num_classes).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn flip_probability_one_flips_everything() {
        let a = anchors();
        let cfg = SceneConfig {
            num_classes: 2,
            flip_prob: 1.0,
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let s = generate_scene(&cfg, &a, seed).unwrap();
            for (c, n) in s.clean.iter().zip(&s.annotated) {
                assert_ne!(c.class_id, n.class_id);
                assert!((1..=2).contains(&n.class_id));
            }
            assert!(s.flipped.iter().all(|&f| f));
        }
    }

    #[test]
    fn scene_shapes_and_bounds() {
        let a = anchors();
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = generate_scene(&cfg, &a, scene_seed(1, seed)).unwrap();
            assert!((1..=3).contains(&s.clean.len()));
            assert_eq!(s.features.dim(), (a.len(), 12));
            assert!(s.features.iter().all(|v| v.is_finite()));
            for g in &s.clean {
                assert!(g.bbox.x1 >= 0.0 && g.bbox.x2 <= 64.0);
                assert!(g.bbox.width() >= 12.0 && g.bbox.width() <= 28.0);
            }
            assert!(s.annotated.iter().all(|g| g.bbox.width() >= 1.0 && g.bbox.height() >= 1.0));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let a = anchors();
        for bad in [
            SceneConfig { num_classes: 1, ..Default::default() },
            SceneConfig { flip_prob: 1.5, ..Default::default() },
            SceneConfig { feature_dim: 4, ..Default::default() },
            SceneConfig { min_objects: 0, ..Default::default() },
        ] {
            assert!(generate_scene(&bad, &a, 0).is_err());
        }
    }
}
