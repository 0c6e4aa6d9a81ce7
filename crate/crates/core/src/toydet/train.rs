//! The end-to-end trainer.
//!
//! Each iteration draws `batch_scenes` scenes from a fixed training pool,
//! matches anchors to the annotations, runs the detector, turns the chosen
//! strategy into per-sample weights, and takes one SGD step on the weighted
//! objective. With the `swn` strategy the weights come from the sample
//! weighting network, which is updated by Adam on the same batch; its base
//! selection is random sampling.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::detector::{detections, detector_forward, DetectorConfig, DetectorOutput, DetectorParams, EvalConfig};
use super::scene::{generate_scene, scene_seed, Scene, SceneConfig};
use crate::analysis::map::{coco_map, EvalReport};
use crate::error::{invalid, Error, Result};
use crate::fmt::sig9;
use crate::geometry::{decode_offsets, encode_offsets, generate_anchors, iou, nms_indices, AnchorGrid, AnchorSet, Detection, GroundTruth, Offset4};
use crate::losses::{
    l2_regression, l2_regression_grad, softmax, softmax_ce, subset_loss, unified_loss, LossNormalization,
    RegularizerConfig, SampleRecord,
};
use crate::matching::{
    focal_weights, kl_regression_weights, match_anchors, ohem_weights, random_sampling_weights, rpn_score_weights,
    Label, MatchResult, Strategy, StrategyConfig, WeightAssignment,
};
use crate::nn::{OptimizerKind, OptimizerState};
use crate::rng;
use crate::swn::{SwnConfig, SwnParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub grid: AnchorGrid,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            grid: AnchorGrid {
                rows: 16,
                cols: 16,
                cell_size: 4.0,
            },
            scales: vec![3.0, 5.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn build(&self) -> Result<AnchorSet> {
        generate_anchors(self.grid, &self.scales, &self.ratios)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_scenes: usize,
    /// Size of the training pool; 0 means `iters_per_epoch * batch_scenes`.
    pub train_scenes: usize,
    /// Learning rates are multiplied by `decay_factor` from each of these
    /// (0-based) epochs on.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Linear warmup length in iterations (0 disables it).
    pub warmup_iters: usize,
    /// Learning-rate factor at the first warmup iteration.
    pub warmup_ratio: f64,
    /// Evaluate on the held-out set after every epoch (otherwise only after
    /// the last one).
    pub eval_every_epoch: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            iters_per_epoch: 250,
            batch_scenes: 2,
            train_scenes: 0,
            decay_epochs: vec![8, 11],
            decay_factor: 0.1,
            warmup_iters: 0,
            warmup_ratio: 1.0 / 3.0,
            eval_every_epoch: true,
        }
    }
}

impl ScheduleConfig {
    pub fn pool_size(&self) -> usize {
        if self.train_scenes == 0 {
            self.iters_per_epoch * self.batch_scenes
        } else {
            self.train_scenes
        }
    }

    /// Learning-rate factor at 0-based iteration `t` of `epoch`.
    pub fn lr_scale(&self, epoch: usize, t: usize) -> f64 {
        let k = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        let warm = if t < self.warmup_iters {
            self.warmup_ratio + (1.0 - self.warmup_ratio) * t as f64 / self.warmup_iters as f64
        } else {
            1.0
        };
        self.decay_factor.powi(k as i32) * warm
    }

    pub fn total_iters(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }
}

/// Everything a training run depends on. The default is the standard noisy
/// benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scene: SceneConfig,
    pub anchors: AnchorConfig,
    pub strategy: StrategyConfig,
    pub regularizer: RegularizerConfig,
    pub swn: SwnConfig,
    pub detector: DetectorConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            anchors: AnchorConfig::default(),
            strategy: StrategyConfig::default(),
            regularizer: RegularizerConfig::default(),
            swn: SwnConfig::default(),
            detector: DetectorConfig::default(),
            schedule: ScheduleConfig::default(),
            eval: EvalConfig::default(),
            seed: 2020,
        }
    }
}

impl TrainConfig {
    /// The frozen benchmark: 20% label flips, box jitter of 5% of the
    /// canvas, 12 epochs of 250 iterations.
    pub fn standard_noisy() -> Self {
        Self::default()
    }

    pub fn with_strategy(&self, s: Strategy) -> Self {
        let mut c = self.clone();
        c.strategy.name = s;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.strategy.validate()?;
        self.regularizer.validate()?;
        self.swn.validate()?;
        self.detector.validate()?;
        self.anchors.build()?;
        let s = &self.schedule;
        if s.iters_per_epoch == 0 || s.batch_scenes == 0 {
            return Err(invalid("iters_per_epoch and batch_scenes must be positive"));
        }
        if !(s.decay_factor > 0.0) || !(s.warmup_ratio > 0.0 && s.warmup_ratio <= 1.0) {
            return Err(invalid("decay_factor must be positive and warmup_ratio in (0, 1]"));
        }
        if self.eval.heldout_scenes == 0 {
            return Err(invalid("heldout_scenes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eval.nms_thr) {
            return Err(invalid("eval nms_thr must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One row per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterRecord {
    /// 1-based.
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Value of the training objective.
    pub loss: f64,
    pub mean_lcls: f64,
    pub mean_lreg: f64,
    pub w_cls_pos: f64,
    pub w_cls_neg: f64,
    /// Mean classification weight over every sampled sample.
    pub w_cls_all: f64,
    pub w_reg_pos: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// `|unified - subset|` objective gap for indicator strategies, 0
    /// otherwise.
    pub eq_gap: f64,
    /// Extreme log-sigma values emitted this iteration (swn only).
    pub m_min: f64,
    pub m_max: f64,
}

/// Mean weights of positives whose annotation has a flipped label versus
/// those with the right label.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct NoiseStats {
    pub flipped_w_cls: f64,
    pub clean_w_cls: f64,
    pub flipped_w_reg: f64,
    pub clean_w_reg: f64,
    pub n_flipped: usize,
    pub n_clean: usize,
}

#[derive(Debug, Default, Clone, Copy)]
struct NoiseAcc {
    f_cls: f64,
    c_cls: f64,
    f_reg: f64,
    c_reg: f64,
    nf: usize,
    nc: usize,
}

impl NoiseAcc {
    fn finish(&self) -> NoiseStats {
        let div = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        NoiseStats {
            flipped_w_cls: div(self.f_cls, self.nf),
            clean_w_cls: div(self.c_cls, self.nc),
            flipped_w_reg: div(self.f_reg, self.nf),
            clean_w_reg: div(self.c_reg, self.nc),
            n_flipped: self.nf,
            n_clean: self.nc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            ap: r.ap,
            ap50: r.ap50,
            ap75: r.ap75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 0-based.
    pub epoch: usize,
    /// Held-out evaluation at the end of the epoch, when run.
    pub eval: Option<EvalSummary>,
    pub noise: NoiseStats,
    /// Mean raw classification weight of positives / negatives over the
    /// epoch (before any smoothing).
    pub raw_w_cls_pos: f64,
    pub raw_w_cls_neg: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainHistory {
    pub iters: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Held-out evaluation before the first step.
    pub initial: Option<EvalSummary>,
    /// Positive samples seen in the first and last epochs, with the
    /// weights they were trained with.
    pub first_epoch_positives: Vec<SampleRecord>,
    pub last_epoch_positives: Vec<SampleRecord>,
}

impl TrainHistory {
    pub fn final_eval(&self) -> Option<EvalSummary> {
        self.epochs.iter().rev().find_map(|e| e.eval)
    }

    /// CSV `iter,mean_lcls,mean_lreg,w_cls_pos,w_cls_neg,w_reg_pos,map`;
    /// `map` is only filled on the last iteration of an evaluated epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,mean_lcls,mean_lreg,w_cls_pos,w_cls_neg,w_reg_pos,map\n");
        for (k, r) in self.iters.iter().enumerate() {
            let epoch_end = self.iters.get(k + 1).is_none_or(|n| n.epoch != r.epoch);
            let map = if epoch_end {
                self.epochs
                    .iter()
                    .find(|e| e.epoch == r.epoch)
                    .and_then(|e| e.eval)
                    .map(|e| sig9(e.ap))
                    .unwrap_or_default()
            } else {
                String::new()
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iter,
                sig9(r.mean_lcls),
                sig9(r.mean_lreg),
                sig9(r.w_cls_pos),
                sig9(r.w_cls_neg),
                sig9(r.w_reg_pos),
                map
            ));
        }
        s
    }
}

impl TrainHistory {
    /// CSV of per-epoch evaluation and noise statistics; evaluation
    /// columns are blank for epochs that were not evaluated.
    pub fn epochs_to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,ap,ap50,ap75,flipped_w_cls,clean_w_cls,flipped_w_reg,clean_w_reg,raw_w_cls_pos,raw_w_cls_neg\n",
        );
        for e in &self.epochs {
            let ev = e.eval.map_or_else(
                || ",,".to_string(),
                |v| format!("{},{},{}", sig9(v.ap), sig9(v.ap50), sig9(v.ap75)),
            );
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch,
                ev,
                sig9(e.noise.flipped_w_cls),
                sig9(e.noise.clean_w_cls),
                sig9(e.noise.flipped_w_reg),
                sig9(e.noise.clean_w_reg),
                sig9(e.raw_w_cls_pos),
                sig9(e.raw_w_cls_neg)
            ));
        }
        s
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub detector: DetectorParams,
    pub swn: SwnParams,
    pub history: TrainHistory,
}

/// Fixed inputs shared by training and evaluation.
pub struct Benchmark {
    pub anchors: AnchorSet,
    pub heldout: Vec<Scene>,
}

impl Benchmark {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let anchors = cfg.anchors.build()?;
        // held-out scenes are annotated exactly: evaluation uses clean boxes
        let heldout = (0..cfg.eval.heldout_scenes as u64)
            .map(|i| generate_scene(&cfg.scene, &anchors, scene_seed(cfg.eval.heldout_seed, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { anchors, heldout })
    }

    /// Held-out evaluation against the clean ground truths.
    pub fn evaluate(&self, det: &DetectorParams, cfg: &EvalConfig) -> Result<EvalReport> {
        let mut all_dets = Vec::with_capacity(self.heldout.len());
        let mut all_gts = Vec::with_capacity(self.heldout.len());
        for s in &self.heldout {
            let out = detector_forward(det, s.features.view())?;
            all_dets.push(detections(&out, &self.anchors, cfg)?);
            all_gts.push(s.clean.clone());
        }
        coco_map(&all_dets, &all_gts)
    }
}

fn derived_seed(base: u64, stream: u64, index: u64) -> u64 {
    rng::substream(base, stream, index).random()
}

/// The detector's per-row quantities for one scene.
struct SceneRows {
    /// Anchor index of each row.
    anchor: Vec<usize>,
    out: DetectorOutput,
}

struct Sample {
    scene: usize,
    row: usize,
    anchor: usize,
    label: Label,
    class: usize,
    gt: Option<usize>,
    target: Offset4,
    l_cls: f64,
    l_reg: f64,
    iou: f64,
    prob: f64,
    s_cls: f64,
    s_reg: f64,
}

fn clamp_offsets(o: Offset4) -> Offset4 {
    Offset4 {
        dw: o.dw.clamp(-4.0, 4.0),
        dh: o.dh.clamp(-4.0, 4.0),
        ..o
    }
}

fn forward_rows(det: &DetectorParams, scene: &Scene, rows: Vec<usize>) -> Result<SceneRows> {
    let x = scene.features.select(Axis(0), &rows);
    Ok(SceneRows {
        anchor: rows,
        out: detector_forward(det, x.view())?,
    })
}

/// Per-anchor classification loss for every row.
fn row_losses(rows: &SceneRows, m: &MatchResult) -> Result<Vec<f64>> {
    rows.anchor
        .iter()
        .enumerate()
        .map(|(r, &a)| softmax_ce(rows.out.logits.row(r).as_slice().expect("contiguous"), m.class_ids[a]))
        .collect()
}

fn regression_target(anchors: &AnchorSet, gts: &[GroundTruth], m: &MatchResult, a: usize) -> Result<Offset4> {
    match m.assigned_gt[a] {
        Some(g) if m.is_positive(a) => encode_offsets(&anchors.anchors[a], &gts[g].bbox),
        _ => Ok(Offset4::ZERO),
    }
}

/// Runs training; see [`train_for`].
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_for(cfg, None)
}

/// Trains with `cfg`, stopping early after `max_iters` iterations when
/// given.
pub fn train_for(cfg: &TrainConfig, max_iters: Option<usize>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let bench = Benchmark::new(cfg)?;
    let anchors = &bench.anchors;
    let c = cfg.scene.num_classes;
    let mut det = DetectorParams::new(
        cfg.scene.feature_dim,
        c,
        &cfg.detector,
        derived_seed(cfg.seed, rng::streams::INIT, 0),
    )?;
    let mut swn = SwnParams::new(&cfg.swn, derived_seed(cfg.seed, rng::streams::INIT, 1))?;
    let mut det_opt = OptimizerState::new(
        OptimizerKind::Sgd {
            momentum: cfg.detector.momentum,
        },
        cfg.detector.lr,
        cfg.detector.weight_decay,
    );
    let mut swn_opt = OptimizerState::new(OptimizerKind::adam(), cfg.swn.lr, cfg.swn.weight_decay);
    let strategy = cfg.strategy.name;
    let reg_cfg = cfg.regularizer;
    let clip = cfg.swn.clip_bound;

    let mut history = TrainHistory {
        initial: Some(EvalSummary::from(&bench.evaluate(&det, &cfg.eval)?)),
        ..Default::default()
    };
    let pool = cfg.schedule.pool_size() as u64;
    let batch = cfg.schedule.batch_scenes;
    let total = cfg.schedule.total_iters().min(max_iters.unwrap_or(usize::MAX));
    let mut t = 0usize;

    for epoch in 0..cfg.schedule.epochs {
        if t >= total {
            break;
        }
        let mut order: Vec<u64> = (0..pool).collect();
        order.shuffle(&mut rng::substream(cfg.seed, rng::streams::SHUFFLE, epoch as u64));
        let mut noise = NoiseAcc::default();
        let (mut raw_pos, mut raw_neg, mut n_raw_pos, mut n_raw_neg) = (0.0, 0.0, 0usize, 0usize);
        let last_epoch = epoch + 1 == cfg.schedule.epochs;

        for it in 0..cfg.schedule.iters_per_epoch {
            if t >= total {
                break;
            }
            let scale = cfg.schedule.lr_scale(epoch, t);
            det_opt.lr = cfg.detector.lr * scale;
            swn_opt.lr = cfg.swn.lr * scale;
            let mut scenes = Vec::with_capacity(batch);
            let mut matches = Vec::with_capacity(batch);
            let mut rows = Vec::with_capacity(batch);
            let mut samples: Vec<Sample> = Vec::new();
            for b in 0..batch {
                let slot = (it * batch + b) as u64 % pool;
                let scene = generate_scene(&cfg.scene, anchors, scene_seed(cfg.seed, order[slot as usize]))?;
                let m = match_anchors(anchors, &scene.annotated, &cfg.strategy)?;
                let mut scfg = cfg.strategy.clone();
                scfg.seed = derived_seed(
                    cfg.seed ^ cfg.strategy.seed.rotate_left(32),
                    rng::streams::SAMPLING,
                    (t * batch + b) as u64,
                );
                let (sr, w) = match strategy {
                    Strategy::Random | Strategy::Swn | Strategy::Kl => {
                        let mut w = random_sampling_weights(&m, &scfg);
                        let picked: Vec<usize> = (0..m.len()).filter(|&i| w.s_cls[i] > 0.0).collect();
                        let sr = forward_rows(&det, &scene, picked)?;
                        if strategy == Strategy::Kl {
                            let mut sigma2 = vec![1.0; m.len()];
                            for (r, &a) in sr.anchor.iter().enumerate() {
                                sigma2[a] = (2.0 * sr.out.log_sigma(r).clamp(-clip, clip)).exp();
                            }
                            let kw = kl_regression_weights(&m, &sigma2, &scfg)?;
                            for i in 0..m.len() {
                                w.s_reg[i] = if w.s_reg[i] > 0.0 { kw.s_reg[i] } else { 0.0 };
                            }
                        }
                        (sr, w)
                    }
                    Strategy::Ohem | Strategy::Focal | Strategy::Rpn => {
                        let sr = forward_rows(&det, &scene, (0..m.len()).collect())?;
                        let w = all_anchor_weights(strategy, &sr, &m, anchors, &scfg)?;
                        (sr, w)
                    }
                };
                // rows that carry weight become samples
                for (r, &a) in sr.anchor.iter().enumerate() {
                    if w.s_cls[a] == 0.0 && w.s_reg[a] == 0.0 {
                        continue;
                    }
                    let logits = sr.out.logits.row(r);
                    let logits = logits.as_slice().expect("contiguous");
                    let class = m.class_ids[a];
                    let l_cls = softmax_ce(logits, class)?;
                    let positive = m.is_positive(a);
                    let target = regression_target(anchors, &scene.annotated, &m, a)?;
                    let pred = sr.out.offsets(r);
                    let (l_reg, piou, prob) = if positive {
                        let g = m.assigned_gt[a].expect("positives are assigned");
                        let boxed = decode_offsets(&anchors.anchors[a], &clamp_offsets(pred));
                        (
                            l2_regression(&pred, &target),
                            iou(&boxed, &scene.annotated[g].bbox),
                            softmax(logits)[class],
                        )
                    } else {
                        (0.0, 0.0, 0.0)
                    };
                    if !l_cls.is_finite() || !l_reg.is_finite() {
                        return Err(Error::NanLoss {
                            iteration: t + 1,
                            sample: a,
                        });
                    }
                    samples.push(Sample {
                        scene: b,
                        row: r,
                        anchor: a,
                        label: m.labels[a],
                        class,
                        gt: m.assigned_gt[a],
                        target,
                        l_cls,
                        l_reg,
                        iou: piou,
                        prob,
                        s_cls: w.s_cls[a],
                        s_reg: w.s_reg[a],
                    });
                }
                scenes.push(scene);
                matches.push(m);
                rows.push(sr);
            }

            let records: Vec<SampleRecord> = samples
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let mut r = if s.label == Label::Positive {
                        SampleRecord::positive(k, s.l_cls, s.l_reg, s.iou, s.prob)
                    } else {
                        SampleRecord::negative(k, s.l_cls)
                    };
                    r.s_cls = s.s_cls;
                    r.s_reg = s.s_reg;
                    r
                })
                .collect();
            let base = WeightAssignment {
                s_cls: samples.iter().map(|s| s.s_cls).collect(),
                s_reg: samples.iter().map(|s| s.s_reg).collect(),
            };
            let norm = LossNormalization::from_weights(&base);

            let mut records = records;
            let mut eq_gap = 0.0;
            let mut raw_w: Vec<f64> = base.s_cls.clone();
            let (mut m_min, mut m_max) = (0.0f64, 0.0f64);
            let loss = if strategy == Strategy::Swn {
                let out = swn.step(&mut records, norm, &reg_cfg, &mut swn_opt)?;
                for (s, r) in samples.iter_mut().zip(&records) {
                    s.s_cls = r.s_cls;
                    s.s_reg = r.s_reg;
                }
                m_min = records.iter().flat_map(|r| [r.m_cls, r.m_reg]).fold(f64::INFINITY, f64::min);
                m_max = records.iter().flat_map(|r| [r.m_cls, r.m_reg]).fold(f64::NEG_INFINITY, f64::max);
                raw_w = out.w_cls_raw;
                out.loss
            } else {
                let v = unified_loss(&records, &base, norm)?;
                if matches!(strategy, Strategy::Random | Strategy::Ohem | Strategy::Rpn) {
                    let cls: Vec<usize> = (0..records.len()).filter(|&i| base.s_cls[i] == 1.0).collect();
                    let reg: Vec<usize> = (0..records.len()).filter(|&i| base.s_reg[i] == 1.0).collect();
                    eq_gap = (v - subset_loss(&records, &cls, &reg, norm)).abs();
                }
                v
            };
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    iteration: t + 1,
                    sample: samples.first().map_or(0, |s| s.anchor),
                });
            }

            // detector gradients, weights treated as constants
            let (inv1, inv2) = (norm.inv_n1(), norm.inv_n2());
            let mut dl: Vec<Array2<f64>> = rows.iter().map(|r| Array2::zeros(r.out.logits.dim())).collect();
            let mut dr: Vec<Array2<f64>> = rows.iter().map(|r| Array2::zeros(r.out.reg.dim())).collect();
            for s in &samples {
                let out = &rows[s.scene].out;
                if s.s_cls != 0.0 {
                    let p = softmax(out.logits.row(s.row).as_slice().expect("contiguous"));
                    for (k, pk) in p.into_iter().enumerate() {
                        let g = pk - if k == s.class { 1.0 } else { 0.0 };
                        dl[s.scene][[s.row, k]] += inv1 * s.s_cls * g;
                    }
                }
                if s.label == Label::Positive && s.s_reg != 0.0 {
                    let g = l2_regression_grad(&out.offsets(s.row), &s.target);
                    for (k, gk) in g.into_iter().enumerate() {
                        dr[s.scene][[s.row, k]] += inv2 * s.s_reg * gk;
                    }
                    if strategy == Strategy::Kl {
                        let raw = out.log_sigma(s.row);
                        if raw > -clip && raw < clip {
                            dr[s.scene][[s.row, 4]] +=
                                inv2 * (-2.0 * (-2.0 * raw).exp() * s.l_reg + reg_cfg.lambda2);
                        }
                    }
                }
            }
            let mut grad = vec![0.0; det.num_params()];
            for (k, r) in rows.iter().enumerate() {
                let (_, gc) = det.cls.backward(&r.out.cls_tape, dl[k].view())?;
                let (_, gr) = det.reg.backward(&r.out.reg_tape, dr[k].view())?;
                for (acc, v) in grad.iter_mut().zip(gc.to_flat().into_iter().chain(gr.to_flat())) {
                    *acc += v;
                }
            }
            let mut flat = det.to_flat();
            det_opt.apply(&mut flat, &grad)?;
            det.load_flat(&flat)?;
            if !det.is_finite() || !swn.is_finite() {
                return Err(Error::NanLoss {
                    iteration: t + 1,
                    sample: samples.first().map_or(0, |s| s.anchor),
                });
            }

            // bookkeeping
            let mut acc = IterAcc::default();
            for (k, s) in samples.iter().enumerate() {
                let picked = base.s_cls[k] > 0.0;
                if picked {
                    acc.lcls += s.l_cls;
                    acc.n_cls += 1;
                    acc.w_all += s.s_cls;
                }
                if s.label == Label::Positive {
                    if picked {
                        acc.w_pos += s.s_cls;
                        acc.n_pos += 1;
                        raw_pos += raw_w[k];
                        n_raw_pos += 1;
                    }
                    if base.s_reg[k] > 0.0 {
                        acc.lreg += s.l_reg;
                        acc.w_reg += s.s_reg;
                        acc.n_reg += 1;
                    }
                    let g = s.gt.expect("positives are assigned");
                    let w_reg = s.s_reg;
                    if scenes[s.scene].flipped[g] {
                        noise.f_cls += raw_w[k];
                        noise.f_reg += w_reg;
                        noise.nf += 1;
                    } else {
                        noise.c_cls += raw_w[k];
                        noise.c_reg += w_reg;
                        noise.nc += 1;
                    }
                    if epoch == 0 || last_epoch {
                        let mut r = records[k];
                        r.s_cls = s.s_cls;
                        r.s_reg = s.s_reg;
                        if epoch == 0 {
                            history.first_epoch_positives.push(r);
                        }
                        if last_epoch {
                            history.last_epoch_positives.push(r);
                        }
                    }
                } else if picked {
                    acc.w_neg += s.s_cls;
                    acc.n_neg += 1;
                    raw_neg += raw_w[k];
                    n_raw_neg += 1;
                }
            }
            t += 1;
            history.iters.push(IterRecord {
                iter: t,
                epoch,
                lr: det_opt.lr,
                loss,
                mean_lcls: div(acc.lcls, acc.n_cls),
                mean_lreg: div(acc.lreg, acc.n_reg),
                w_cls_pos: div(acc.w_pos, acc.n_pos),
                w_cls_neg: div(acc.w_neg, acc.n_neg),
                w_cls_all: div(acc.w_all, acc.n_cls),
                w_reg_pos: div(acc.w_reg, acc.n_reg),
                n_pos: acc.n_pos,
                n_neg: acc.n_neg,
                eq_gap,
                m_min,
                m_max,
            });
        }
        let evaluate = cfg.schedule.eval_every_epoch || last_epoch;
        let eval = if evaluate {
            Some(EvalSummary::from(&bench.evaluate(&det, &cfg.eval)?))
        } else {
            None
        };
        history.epochs.push(EpochRecord {
            epoch,
            eval,
            noise: noise.finish(),
            raw_w_cls_pos: div(raw_pos, n_raw_pos),
            raw_w_cls_neg: div(raw_neg, n_raw_neg),
        });
    }
    Ok(TrainOutcome {
        detector: det,
        swn,
        history,
    })
}

#[derive(Default)]
struct IterAcc {
    lcls: f64,
    lreg: f64,
    w_pos: f64,
    w_neg: f64,
    w_all: f64,
    w_reg: f64,
    n_cls: usize,
    n_pos: usize,
    n_neg: usize,
    n_reg: usize,
}

fn div(s: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Weights for the strategies that look at every anchor.
fn all_anchor_weights(
    strategy: Strategy,
    sr: &SceneRows,
    m: &MatchResult,
    anchors: &AnchorSet,
    cfg: &StrategyConfig,
) -> Result<WeightAssignment> {
    let n = m.len();
    match strategy {
        Strategy::Ohem => ohem_weights(m, &row_losses(sr, m)?, cfg),
        Strategy::Focal => {
            let probs: Vec<f64> = (0..n).map(|a| sr.out.probs(a)[m.class_ids[a]]).collect();
            focal_weights(m, &probs, cfg)
        }
        Strategy::Rpn => {
            let fg: Vec<f64> = (0..n).map(|a| 1.0 - sr.out.probs(a)[0]).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| fg[b].total_cmp(&fg[a]).then(a.cmp(&b)));
            order.truncate(300);
            let dets: Vec<Detection> = order
                .iter()
                .map(|&a| Detection {
                    bbox: decode_offsets(&anchors.anchors[a], &clamp_offsets(sr.out.offsets(a))),
                    class_id: 1,
                    score: fg[a],
                })
                .collect();
            let kept: Vec<usize> = nms_indices(&dets, cfg.nms_thr)?.into_iter().map(|k| order[k]).collect();
            rpn_score_weights(m, &fg, &kept, cfg)
        }
        _ => Err(invalid(format!("strategy {strategy} does not weight all anchors"))),
    }
}
