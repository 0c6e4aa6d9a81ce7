//! Axis-aligned boxes and the geometric primitives built on them: IoU,
//! R-CNN offset coding, anchor enumeration, and (Soft-)NMS.
//!
//! Everything here is a pure function of its inputs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fmt::sig9;

/// An axis-aligned rectangle `(x1, y1)`–`(x2, y2)` with `x1 <= x2`, `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// A scored, classified box as produced by a detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// An annotated object. Class 0 is reserved for background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

impl GroundTruth {
    pub fn new(bbox: BBox, class_id: usize) -> Result<Self> {
        if class_id == 0 {
            return Err(invalid("ground-truth class 0 is reserved for background"));
        }
        Ok(Self { bbox, class_id })
    }
}

/// Intersection over union. Degenerate inputs (zero union) give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Regression target in the standard center/log-size parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset4 {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Offset4 {
    pub const ZERO: Offset4 = Offset4 {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

fn check_anchor(anchor: &BBox) -> Result<()> {
    let (w, h) = (anchor.width(), anchor.height());
    if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
        return Err(Error::DegenerateAnchor {
            width: w,
            height: h,
        });
    }
    Ok(())
}

/// Encodes `target` relative to `anchor`.
pub fn encode_offsets(anchor: &BBox, target: &BBox) -> Result<Offset4> {
    check_anchor(anchor)?;
    if !(target.width() > 0.0 && target.height() > 0.0) {
        return Err(invalid("target box must have positive width and height"));
    }
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    Ok(Offset4 {
        dx: (tcx - acx) / aw,
        dy: (tcy - acy) / ah,
        dw: (target.width() / aw).ln(),
        dh: (target.height() / ah).ln(),
    })
}

/// Inverse of [`encode_offsets`].
pub fn decode_offsets(anchor: &BBox, off: &Offset4) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    BBox::from_center(
        acx + off.dx * aw,
        acy + off.dy * ah,
        aw * off.dw.exp(),
        ah * off.dh.exp(),
    )
}

/// Regular grid of anchor positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
}

/// The enumerated anchors plus the descriptor that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<BBox>,
    pub grid: AnchorGrid,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Enumerates anchors row-major over the grid, then by scale, then by ratio.
///
/// An anchor's side is `scale * cell_size`; `ratio` is width / height at
/// constant area.
pub fn generate_anchors(grid: AnchorGrid, scales: &[f64], ratios: &[f64]) -> Result<AnchorSet> {
    if scales.is_empty() || ratios.is_empty() {
        return Err(invalid("anchor scales and ratios must be non-empty"));
    }
    if grid.rows == 0 || grid.cols == 0 || !(grid.cell_size > 0.0) {
        return Err(invalid("anchor grid dimensions must be positive"));
    }
    if scales.iter().chain(ratios).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid("anchor scales and ratios must be positive"));
    }
    let mut anchors = Vec::with_capacity(grid.rows * grid.cols * scales.len() * ratios.len());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let cx = (c as f64 + 0.5) * grid.cell_size;
            let cy = (r as f64 + 0.5) * grid.cell_size;
            for &s in scales {
                let side = s * grid.cell_size;
                for &ratio in ratios {
                    let k = ratio.sqrt();
                    anchors.push(BBox::from_center(cx, cy, side * k, side / k));
                }
            }
        }
    }
    Ok(AnchorSet {
        anchors,
        grid,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
    })
}

/// Indices visited in descending score order; ties keep input order.
fn order_by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy per-class NMS returning the kept input indices in visiting order.
pub fn nms_indices(dets: &[Detection], iou_thr: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&iou_thr) {
        return Err(invalid(format!("nms iou threshold {iou_thr} not in [0, 1]")));
    }
    if dets.iter().any(|d| !d.score.is_finite()) {
        return Err(Error::NonFinite("detection scores"));
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in order_by_score(dets) {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_thr
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Greedy per-class non-maximum suppression.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Result<Vec<Detection>> {
    Ok(nms_indices(dets, iou_thr)?
        .into_iter()
        .map(|i| dets[i])
        .collect())
}

/// Gaussian Soft-NMS: instead of removing overlapping detections, rescales
/// their scores by `exp(-iou^2 / sigma)` and drops those below `score_floor`.
pub fn soft_nms(dets: &[Detection], sigma: f64, score_floor: f64) -> Result<Vec<Detection>> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("soft-nms sigma must be positive, got {sigma}")));
    }
    if dets.iter().any(|d| !d.score.is_finite()) {
        return Err(Error::NonFinite("detection scores"));
    }
    let mut pool: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut out = Vec::with_capacity(dets.len());
    while !pool.is_empty() {
        // highest score, earliest input index on ties
        let mut best = 0;
        for (j, (idx, d)) in pool.iter().enumerate() {
            let (bidx, bd) = &pool[best];
            if d.score > bd.score || (d.score == bd.score && idx < bidx) {
                best = j;
            }
        }
        let (_, top) = pool.remove(best);
        for (_, d) in pool.iter_mut() {
            if d.class_id == top.class_id {
                let o = iou(&top.bbox, &d.bbox);
                d.score *= (-o * o / sigma).exp();
            }
        }
        if top.score >= score_floor {
            out.push(top);
        }
        pool.retain(|(_, d)| d.score >= score_floor);
    }
    Ok(out)
}

/// Writes boxes as CSV rows `x1,y1,x2,y2[,class_id][,score]`, 9 significant digits.
pub fn boxes_to_csv(rows: &[(BBox, Option<usize>, Option<f64>)]) -> String {
    let mut s = String::new();
    for (b, class, score) in rows {
        let _ = write!(s, "{},{},{},{}", sig9(b.x1), sig9(b.y1), sig9(b.x2), sig9(b.y2));
        if let Some(c) = class {
            let _ = write!(s, ",{c}");
        }
        if let Some(p) = score {
            let _ = write!(s, ",{}", sig9(*p));
        }
        s.push('\n');
    }
    s
}

/// Parses the format written by [`boxes_to_csv`].
pub fn boxes_from_csv(text: &str) -> Result<Vec<(BBox, Option<usize>, Option<f64>)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(4..=6).contains(&fields.len()) {
            return Err(invalid(format!("line {}: expected 4-6 fields", lineno + 1)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| invalid(format!("line {}: bad number {s:?}", lineno + 1)))
        };
        let b = BBox::new(num(fields[0])?, num(fields[1])?, num(fields[2])?, num(fields[3])?);
        let class = match fields.get(4) {
            Some(s) => Some(
                s.parse::<usize>()
                    .map_err(|_| invalid(format!("line {}: bad class id {s:?}", lineno + 1)))?,
            ),
            None => None,
        };
        let score = fields.get(5).map(|s| num(s)).transpose()?;
        out.push((b, class, score));
    }
    Ok(out)
}
