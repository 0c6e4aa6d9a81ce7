//! The toy detection head: a classification MLP over `C + 1` classes and a
//! regression MLP producing four box offsets plus a log-sigma used only by
//! the KL weighting.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{decode_offsets, nms, AnchorSet, Detection, Offset4};
use crate::losses::softmax;
use crate::nn::{Checkpoint, Mlp, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub hidden: usize,
    pub init_std: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            init_std: 0.1,
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || !(self.lr > 0.0) || !(self.init_std >= 0.0) {
            return Err(invalid("detector needs hidden >= 1, lr > 0 and init_std >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(invalid("detector momentum must lie in [0, 1) and weight decay be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub cls: Mlp,
    pub reg: Mlp,
}

/// Outputs for a batch of anchors.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// `n x (C + 1)`, column 0 is background.
    pub logits: Array2<f64>,
    /// `n x 5`: `dx, dy, dw, dh, log_sigma`.
    pub reg: Array2<f64>,
    pub cls_tape: Tape,
    pub reg_tape: Tape,
}

impl DetectorOutput {
    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offsets(&self, i: usize) -> Offset4 {
        Offset4::from_slice(&self.reg.row(i).as_slice().expect("contiguous")[..4])
    }

    pub fn log_sigma(&self, i: usize) -> f64 {
        self.reg[[i, 4]]
    }

    pub fn probs(&self, i: usize) -> Vec<f64> {
        softmax(self.logits.row(i).as_slice().expect("contiguous"))
    }
}

impl DetectorParams {
    pub fn new(feature_dim: usize, num_classes: usize, cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cls: Mlp::gaussian(&[feature_dim, cfg.hidden, num_classes + 1], cfg.init_std, seed)?,
            reg: Mlp::gaussian(&[feature_dim, cfg.hidden, 5], cfg.init_std, seed.wrapping_add(1))?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cls.output_dim() - 1
    }

    pub fn num_params(&self) -> usize {
        self.cls.num_params() + self.reg.num_params()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.cls.to_flat();
        v.extend(self.reg.to_flat());
        v
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let k = self.cls.load_flat(flat)?;
        self.reg.load_flat(&flat[k..])?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.cls.is_finite() && self.reg.is_finite()
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push(format!("{prefix}cls"), self.cls.clone());
        ck.push(format!("{prefix}reg"), self.reg.clone());
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        Ok(Self {
            cls: ck.require(&format!("{prefix}cls"))?.clone(),
            reg: ck.require(&format!("{prefix}reg"))?.clone(),
        })
    }
}

/// Runs both heads on `features` (one anchor per row).
pub fn detector_forward(p: &DetectorParams, features: ArrayView2<f64>) -> Result<DetectorOutput> {
    let (logits, cls_tape) = p.cls.forward_batch(features)?;
    let (reg, reg_tape) = p.reg.forward_batch(features)?;
    Ok(DetectorOutput {
        logits,
        reg,
        cls_tape,
        reg_tape,
    })
}

/// Post-processing knobs for turning anchor outputs into detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub heldout_scenes: usize,
    pub heldout_seed: u64,
    pub score_thr: f64,
    pub pre_nms_top_k: usize,
    pub nms_thr: f64,
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heldout_scenes: 64,
            heldout_seed: 0x5EED_0000_0000_0001,
            score_thr: 0.05,
            pre_nms_top_k: 300,
            nms_thr: 0.5,
            max_dets: 100,
        }
    }
}

/// Per anchor: the best foreground class and its probability, decoded box;
/// then score filter, top-k, per-class NMS and a cap.
pub fn detections(out: &DetectorOutput, anchors: &AnchorSet, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for i in 0..out.len() {
        let p = out.probs(i);
        let (class_id, score) = p
            .iter()
            .enumerate()
            .skip(1)
            .fold((1, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
        if score < cfg.score_thr {
            continue;
        }
        let off = out.offsets(i);
        // keep decoded sizes finite for wild early predictions
        let off = Offset4 {
            dw: off.dw.clamp(-4.0, 4.0),
            dh: off.dh.clamp(-4.0, 4.0),
            ..off
        };
        dets.push(Detection {
            bbox: decode_offsets(&anchors.anchors[i], &off),
            class_id,
            score,
        });
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(cfg.pre_nms_top_k);
    let mut kept = nms(&dets, cfg.nms_thr)?;
    kept.truncate(cfg.max_dets);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_anchors, AnchorGrid};
    use crate::nn::{gradcheck, GradCheck};
    use ndarray::{array, Array2};

    #[test]
    fn zero_params_uniform_and_still() {
        let cfg = DetectorConfig { init_std: 0.0, ..Default::default() };
        let p = DetectorParams::new(12, 3, &cfg, 0).unwrap();
        let x = Array2::from_elem((4, 12), 0.7);
        let out = detector_forward(&p, x.view()).unwrap();
        for i in 0..4 {
            assert!(out.probs(i).iter().all(|&v| (v - 0.25).abs() < 1e-15));
            assert_eq!(out.offsets(i), Offset4::ZERO);
        }
    }

    #[test]
    fn rows_are_independent() {
        let p = DetectorParams::new(6, 2, &DetectorConfig { init_std: 0.5, ..Default::default() }, 3).unwrap();
        let x = array![[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [1.0, -1.0, 0.5, 0.0, 0.2, 0.9]];
        let both = detector_forward(&p, x.view()).unwrap();
        let one = detector_forward(&p, x.slice(ndarray::s![1..2, ..])).unwrap();
        assert_eq!(both.logits.row(1), one.logits.row(0));
        assert_eq!(both.reg.row(1), one.reg.row(0));
    }

    #[test]
    fn hand_trace() {
        let cfg = DetectorConfig { hidden: 1, init_std: 0.0, ..Default::default() };
        let mut p = DetectorParams::new(2, 2, &cfg, 0).unwrap();
        // hidden = relu(x0 - x1); logits = (h, 2h, -h); reg = (h, 0, 0, 0, 0.5)
        p.cls.layers[0].weight = array![[1.0, -1.0]];
        p.cls.layers[1].weight = array![[1.0], [2.0], [-1.0]];
        p.reg.layers[0].weight = array![[1.0, -1.0]];
        p.reg.layers[1].weight = array![[1.0], [0.0], [0.0], [0.0], [0.0]];
        p.reg.layers[1].bias = array![0.0, 0.0, 0.0, 0.0, 0.5];
        let out = detector_forward(&p, array![[2.0, 0.5]].view()).unwrap();
        assert_eq!(out.logits.row(0).to_vec(), vec![1.5, 3.0, -1.5]);
        assert_eq!(out.offsets(0).dx, 1.5);
        assert_eq!(out.log_sigma(0), 0.5);
    }

    #[test]
    fn heads_pass_gradcheck() {
        let p = DetectorParams::new(5, 3, &DetectorConfig { init_std: 0.5, hidden: 7, ..Default::default() }, 4).unwrap();
        let x = array![[0.3, -0.2, 0.9, 0.1, 0.5], [0.6, 0.4, -0.3, 0.8, -0.1]];
        let (label, target) = ([2usize, 0], [0.2, -0.1, 0.3, 0.05]);
        let loss_of = |q: &DetectorParams| {
            let out = detector_forward(q, x.view()).unwrap();
            let mut v = 0.0;
            let mut dl = Array2::zeros(out.logits.dim());
            let mut dr = Array2::zeros(out.reg.dim());
            for i in 0..2 {
                let row = out.logits.row(i).to_vec();
                v += crate::losses::softmax_ce(&row, label[i]).unwrap();
                for (c, g) in crate::losses::softmax_ce_grad(&row, label[i]).into_iter().enumerate() {
                    dl[[i, c]] = g;
                }
                for j in 0..4 {
                    v += (out.reg[[i, j]] - target[j]).powi(2);
                    dr[[i, j]] = 2.0 * (out.reg[[i, j]] - target[j]);
                }
            }
            let sig = out.cls_tape.activation_signature(&q.cls.layers) ^ out.reg_tape.activation_signature(&q.reg.layers).rotate_left(1);
            (v, sig, out, dl, dr)
        };
        let (_, _, out, dl, dr) = loss_of(&p);
        let (_, gc) = p.cls.backward(&out.cls_tape, dl.view()).unwrap();
        let (_, gr) = p.reg.backward(&out.reg_tape, dr.view()).unwrap();
        let mut analytic = gc.to_flat();
        analytic.extend(gr.to_flat());
        let f = |flat: &[f64]| {
            let mut q = p.clone();
            q.load_flat(flat).unwrap();
            let (v, s, ..) = loss_of(&q);
            (v, s)
        };
        let rep = gradcheck(f, &p.to_flat(), &analytic, &GradCheck::default(), None);
        assert!(rep.passed() && rep.checked >= 100, "{rep:?}");
    }

    #[test]
    fn detections_respect_caps() {
        let grid = AnchorGrid { rows: 4, cols: 4, cell_size: 4.0 };
        let anchors = generate_anchors(grid, &[2.0], &[1.0]).unwrap();
        let p = DetectorParams::new(6, 2, &DetectorConfig { init_std: 1.0, ..Default::default() }, 1).unwrap();
        let x = Array2::from_shape_fn((16, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3);
        let out = detector_forward(&p, x.view()).unwrap();
        let cfg = EvalConfig { max_dets: 3, ..Default::default() };
        let dets = detections(&out, &anchors, &cfg).unwrap();
        assert!(dets.len() <= 3);
        assert!(dets.iter().all(|d| d.score >= 0.05 && d.class_id >= 1));
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
