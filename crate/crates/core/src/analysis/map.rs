//! COCO-style mean average precision.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::geometry::{iou, Detection, GroundTruth};

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean over classes and all thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `(class, AP averaged over thresholds)` for classes with ground truth.
    pub per_class: Vec<(usize, f64)>,
    /// Class-mean AP at each threshold of [`iou_thresholds`].
    pub per_threshold: Vec<f64>,
    pub num_detections: usize,
    pub num_ground_truths: usize,
}

/// Average precision of one class at one threshold, 101-point interpolated.
///
/// `dets` are `(scene, detection)` pairs; `gts[s]` the ground truths of
/// that class in scene `s`.
pub fn average_precision(dets: &[(usize, Detection)], gts: &[Vec<GroundTruth>], thr: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.score.total_cmp(&dets[a].1.score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (k, &d) in order.iter().enumerate() {
        let (scene, det) = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        if let Some(scene_gts) = gts.get(*scene) {
            for (g, gt) in scene_gts.iter().enumerate() {
                if taken[*scene][g] {
                    continue;
                }
                let o = iou(&det.bbox, &gt.bbox);
                if o >= thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
        }
        if let Some((g, _)) = best {
            taken[*scene][g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Evaluates per-scene detections against per-scene ground truths.
///
/// Classes without any ground truth are excluded; with no ground truth at
/// all every AP is 0.
pub fn coco_map(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>]) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::LengthMismatch {
            what: "detection scenes",
            expected: gts.len(),
            got: dets.len(),
        });
    }
    if dets.iter().flatten().any(|d| !d.score.is_finite()) {
        return Err(invalid("detection scores must be finite"));
    }
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let thresholds = iou_thresholds();
    let mut per_class = Vec::with_capacity(classes.len());
    let mut table = vec![vec![0.0; thresholds.len()]; classes.len()];
    for (ci, &c) in classes.iter().enumerate() {
        let cd: Vec<(usize, Detection)> = dets
            .iter()
            .enumerate()
            .flat_map(|(s, ds)| ds.iter().filter(|d| d.class_id == c).map(move |d| (s, *d)))
            .collect();
        let cg: Vec<Vec<GroundTruth>> = gts
            .iter()
            .map(|g| g.iter().filter(|g| g.class_id == c).copied().collect())
            .collect();
        let mut sum = 0.0;
        for (ti, &thr) in thresholds.iter().enumerate() {
            table[ci][ti] = average_precision(&cd, &cg, thr);
            sum += table[ci][ti];
        }
        per_class.push((c, sum / thresholds.len() as f64));
    }
    let nc = classes.len();
    let per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|ti| {
            if nc == 0 {
                0.0
            } else {
                table.iter().map(|row| row[ti]).sum::<f64>() / nc as f64
            }
        })
        .collect();
    let ap = if nc == 0 {
        0.0
    } else {
        per_class.iter().map(|(_, v)| v).sum::<f64>() / nc as f64
    };
    Ok(EvalReport {
        ap,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        per_class,
        per_threshold,
        num_detections: dets.iter().map(Vec::len).sum(),
        num_ground_truths: gts.iter().map(Vec::len).sum(),
    })
}
