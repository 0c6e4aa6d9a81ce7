//! The sample weighting network.
//!
//! Four scalar embeddings `F, G, H, K` map a sample's classification loss,
//! regression loss, IoU and class probability to `embed_dim` features each.
//! Their concatenation feeds two heads that predict the log-sigma of the
//! classification and regression terms, clamped to `[-clip_bound,
//! clip_bound]`. A sample's weight on a loss term is `exp(-2 m)`.
//!
//! Losses enter the embeddings as `ln(1 + L)`. Inputs are constants for
//! backpropagation: the network's gradient never reaches the detector
//! through them.

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::{LossNormalization, RegularizerConfig, SampleRecord};
use crate::matching::Label;
use crate::nn::{Activation, Checkpoint, Dense, Mlp, MlpGrads, OptimizerState, Tape};

/// Sub-network names, also used as checkpoint section tags.
pub const NET_NAMES: [&str; 6] = ["F", "G", "H", "K", "W_cls", "W_reg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwnConfig {
    pub embed_dim: usize,
    /// Hidden layer sizes of each head.
    pub hidden: Vec<usize>,
    pub clip_bound: f64,
    /// Replace classification weights by their positive / negative group
    /// means inside the loss.
    pub smoothing: bool,
    pub init_std: f64,
    /// Initial bias of the last layer of both heads.
    pub last_bias: f64,
    /// Adam learning rate.
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for SwnConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: vec![64],
            clip_bound: 2.0,
            smoothing: true,
            init_std: 1e-4,
            last_bias: 0.0,
            lr: 0.001,
            weight_decay: 1e-4,
        }
    }
}

impl SwnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(invalid("swn dimensions must be >= 1"));
        }
        if !(self.clip_bound > 0.0) {
            return Err(invalid(format!("clip_bound must be > 0, got {}", self.clip_bound)));
        }
        if !(self.init_std >= 0.0) || !self.last_bias.is_finite() {
            return Err(invalid("swn init std must be >= 0 and last bias finite"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("swn lr must be > 0 and weight decay >= 0"));
        }
        Ok(())
    }
}

/// The six sub-networks.
#[derive(Debug, Clone, PartialEq)]
pub struct SwnParams {
    /// `F, G, H, K`: scalar to `embed_dim`, relu.
    pub embed: [Mlp; 4],
    pub w_cls: Mlp,
    pub w_reg: Mlp,
    pub clip_bound: f64,
    pub smoothing: bool,
}

/// The four network inputs of one sample, before normalization.
pub fn raw_inputs(r: &SampleRecord) -> [f64; 4] {
    if r.label == Label::Positive {
        [r.l_cls, r.l_reg, r.iou, r.prob]
    } else {
        [r.l_cls, 0.0, 0.0, 0.0]
    }
}

fn normalized(inputs: [f64; 4]) -> Result<[f64; 4]> {
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample weighting network input"));
    }
    Ok([inputs[0].max(0.0).ln_1p(), inputs[1].max(0.0).ln_1p(), inputs[2], inputs[3]])
}

fn head(input: usize, hidden: &[usize], std: f64, last_bias: f64, seed: u64) -> Result<Mlp> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let mut net = Mlp::gaussian(&dims, std, seed)?;
    net.layers.last_mut().expect("head has layers").bias.fill(last_bias);
    Ok(net)
}

/// Everything the backward pass needs from a batch forward pass.
#[derive(Debug, Clone)]
pub struct SwnForward {
    pub m_cls: Vec<f64>,
    pub m_reg: Vec<f64>,
    /// Head outputs before clamping.
    pub raw_cls: Vec<f64>,
    pub raw_reg: Vec<f64>,
    embed_tapes: Vec<Tape>,
    cls_tape: Tape,
    reg_tape: Tape,
}

/// Per-batch loss and per-sample weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SwnOutput {
    pub loss: f64,
    /// `exp(-2 m_cls)` before smoothing.
    pub w_cls_raw: Vec<f64>,
    /// Classification weights after smoothing (equal to `w_cls_raw` when
    /// smoothing is off).
    pub s_cls: Vec<f64>,
    /// `exp(-2 m_reg)` for positives, 0 otherwise.
    pub s_reg: Vec<f64>,
}

impl SwnParams {
    /// Gaussian weights with the configured std, zero biases, and the last
    /// head bias set to `last_bias`.
    pub fn new(cfg: &SwnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let emb = |k: u64| -> Result<Mlp> {
            Mlp::new(vec![Dense::gaussian(1, e, Activation::Relu, 0.0, cfg.init_std, seed.wrapping_add(k))?])
        };
        Ok(Self {
            embed: [emb(1)?, emb(2)?, emb(3)?, emb(4)?],
            w_cls: head(4 * e, &cfg.hidden, cfg.init_std, cfg.last_bias, seed.wrapping_add(5))?,
            w_reg: head(4 * e, &cfg.hidden, cfg.init_std, cfg.last_bias, seed.wrapping_add(6))?,
            clip_bound: cfg.clip_bound,
            smoothing: cfg.smoothing,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed[0].output_dim()
    }

    fn nets(&self) -> [&Mlp; 6] {
        let [f, g, h, k] = &self.embed;
        [f, g, h, k, &self.w_cls, &self.w_reg]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 6] {
        let [f, g, h, k] = &mut self.embed;
        [f, g, h, k, &mut self.w_cls, &mut self.w_reg]
    }

    pub fn num_params(&self) -> usize {
        self.nets().iter().map(|n| n.num_params()).sum()
    }

    /// Parameters of `F, G, H, K, W_cls, W_reg` in that order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.to_flat()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                what: "swn parameters",
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut k = 0;
        for n in self.nets_mut() {
            k += n.load_flat(&flat[k..])?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.nets().iter().all(|n| n.is_finite())
    }

    /// The sample-level feature `d = concat(F(ln(1+L_cls)), G(ln(1+L_reg)),
    /// H(iou), K(prob))`.
    pub fn embed_features(&self, l_cls: f64, l_reg: f64, iou: f64, prob: f64) -> Result<Vec<f64>> {
        let x = normalized([l_cls, l_reg, iou, prob])?;
        let mut d = Vec::with_capacity(4 * self.embed_dim());
        for (net, v) in self.embed.iter().zip(x) {
            d.extend(net.forward(&[v])?.0);
        }
        Ok(d)
    }

    fn clamp(&self, raw: f64) -> f64 {
        raw.clamp(-self.clip_bound, self.clip_bound)
    }

    /// `(m_cls, m_reg)` for one sample feature, clamped.
    pub fn predict_weights(&self, d: &[f64]) -> Result<(f64, f64)> {
        let c = self.w_cls.forward(d)?.0[0];
        let r = self.w_reg.forward(d)?.0[0];
        Ok((self.clamp(c), self.clamp(r)))
    }

    /// Batch forward pass over records (ignored records are not allowed).
    pub fn forward(&self, records: &[SampleRecord]) -> Result<SwnForward> {
        let n = records.len();
        let mut cols = [
            Array2::zeros((n, 1)),
            Array2::zeros((n, 1)),
            Array2::zeros((n, 1)),
            Array2::zeros((n, 1)),
        ];
        for (i, r) in records.iter().enumerate() {
            if r.label == Label::Ignore {
                return Err(invalid(format!("record {i} is an ignored sample")));
            }
            let x = normalized(raw_inputs(r))?;
            for (c, v) in cols.iter_mut().zip(x) {
                c[[i, 0]] = v;
            }
        }
        let mut parts = Vec::with_capacity(4);
        let mut embed_tapes = Vec::with_capacity(4);
        for (net, col) in self.embed.iter().zip(&cols) {
            let (y, t) = net.forward_batch(col.view())?;
            parts.push(y);
            embed_tapes.push(t);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let d = concatenate(Axis(1), &views).map_err(|e| invalid(e.to_string()))?;
        let (yc, cls_tape) = self.w_cls.forward_batch(d.view())?;
        let (yr, reg_tape) = self.w_reg.forward_batch(d.view())?;
        let raw_cls: Vec<f64> = yc.column(0).to_vec();
        let raw_reg: Vec<f64> = yr.column(0).to_vec();
        Ok(SwnForward {
            m_cls: raw_cls.iter().map(|&v| self.clamp(v)).collect(),
            m_reg: raw_reg.iter().map(|&v| self.clamp(v)).collect(),
            raw_cls,
            raw_reg,
            embed_tapes,
            cls_tape,
            reg_tape,
        })
    }

    /// Hash of every piecewise-linear region in the forward pass: relu
    /// patterns and which raw outputs sit inside the clamp.
    pub fn signature(&self, fwd: &SwnForward) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| h = (h ^ v).wrapping_mul(0x0100_0000_01b3);
        for (net, t) in self.embed.iter().zip(&fwd.embed_tapes) {
            mix(t.activation_signature(&net.layers));
        }
        mix(fwd.cls_tape.activation_signature(&self.w_cls.layers));
        mix(fwd.reg_tape.activation_signature(&self.w_reg.layers));
        for &v in fwd.raw_cls.iter().chain(&fwd.raw_reg) {
            mix(u64::from(v.abs() < self.clip_bound));
        }
        h
    }

    fn inside(&self, raw: f64) -> bool {
        raw > -self.clip_bound && raw < self.clip_bound
    }

    /// The uncertainty-weighted batch objective
    ///
    /// `(1/N1) sum_i (s_cls_i L_cls_i + l1 m_cls_i)
    ///  + (1/N2) sum_{i positive} (exp(-2 m_reg_i) L_reg_i + l2 m_reg_i)`
    ///
    /// where `s_cls` is `exp(-2 m_cls)`, smoothed over the positive and
    /// negative groups when enabled. Returns the loss, the weights, and the
    /// gradient with respect to [`SwnParams::to_flat`].
    pub fn objective(
        &self,
        records: &[SampleRecord],
        norm: LossNormalization,
        reg: &RegularizerConfig,
    ) -> Result<(SwnOutput, Vec<f64>, SwnForward)> {
        let fwd = self.forward(records)?;
        let n = records.len();
        let (inv1, inv2) = (norm.inv_n1(), norm.inv_n2());
        let w_cls_raw: Vec<f64> = fwd.m_cls.iter().map(|m| (-2.0 * m).exp()).collect();
        let mut s_cls = w_cls_raw.clone();
        // per-sample loss multiplying d s_cls / d m_cls: the group loss mean
        // when smoothed, the sample's own loss otherwise
        let mut cls_coupling: Vec<f64> = records.iter().map(|r| r.l_cls).collect();
        if self.smoothing {
            for group in [Label::Positive, Label::Negative] {
                let idx: Vec<usize> = (0..n).filter(|&i| records[i].label == group).collect();
                if idx.is_empty() {
                    continue;
                }
                let k = idx.len() as f64;
                let mut ws = 0.0;
                let mut ls = 0.0;
                for &i in &idx {
                    ws += w_cls_raw[i];
                    ls += records[i].l_cls;
                }
                for &i in &idx {
                    s_cls[i] = ws / k;
                    cls_coupling[i] = ls / k;
                }
            }
        }
        let mut s_reg = vec![0.0; n];
        let mut cls = 0.0;
        let mut regl = 0.0;
        let mut d_cls = Array2::zeros((n, 1));
        let mut d_reg = Array2::zeros((n, 1));
        for (i, r) in records.iter().enumerate() {
            cls += s_cls[i] * r.l_cls + reg.lambda1 * fwd.m_cls[i];
            if self.inside(fwd.raw_cls[i]) {
                d_cls[[i, 0]] = inv1 * (-2.0 * w_cls_raw[i] * cls_coupling[i] + reg.lambda1);
            }
            if r.is_positive() {
                s_reg[i] = (-2.0 * fwd.m_reg[i]).exp();
                regl += s_reg[i] * r.l_reg + reg.lambda2 * fwd.m_reg[i];
                if self.inside(fwd.raw_reg[i]) {
                    d_reg[[i, 0]] = inv2 * (-2.0 * s_reg[i] * r.l_reg + reg.lambda2);
                }
            }
        }
        let loss = cls * inv1 + regl * inv2;
        if !loss.is_finite() {
            return Err(Error::NonFinite("sample weighting loss"));
        }

        let (dd_cls, g_cls) = self.w_cls.backward(&fwd.cls_tape, d_cls.view())?;
        let (dd_reg, g_reg) = self.w_reg.backward(&fwd.reg_tape, d_reg.view())?;
        let dd = dd_cls + dd_reg;
        let e = self.embed_dim();
        let mut grads: Vec<MlpGrads> = Vec::with_capacity(6);
        for (k, (net, tape)) in self.embed.iter().zip(&fwd.embed_tapes).enumerate() {
            let slice = dd.slice(s![.., k * e..(k + 1) * e]);
            grads.push(net.backward(tape, slice)?.1);
        }
        grads.push(g_cls);
        grads.push(g_reg);
        let flat = grads.iter().flat_map(|g| g.to_flat()).collect();
        Ok((
            SwnOutput {
                loss,
                w_cls_raw,
                s_cls,
                s_reg,
            },
            flat,
            fwd,
        ))
    }

    /// Evaluates the objective, writes `m` and the effective weights into
    /// `records`, and applies one optimizer update to the parameters.
    pub fn step(
        &mut self,
        records: &mut [SampleRecord],
        norm: LossNormalization,
        reg: &RegularizerConfig,
        opt: &mut OptimizerState,
    ) -> Result<SwnOutput> {
        let (out, grad, fwd) = self.objective(records, norm, reg)?;
        for (i, r) in records.iter_mut().enumerate() {
            r.m_cls = fwd.m_cls[i];
            r.m_reg = fwd.m_reg[i];
            r.s_cls = out.s_cls[i];
            r.s_reg = out.s_reg[i];
        }
        let mut flat = self.to_flat();
        opt.apply(&mut flat, &grad)?;
        self.load_flat(&flat)?;
        Ok(out)
    }

    /// Adds the six sub-networks to `ck` under `prefix` + name.
    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        for (name, net) in NET_NAMES.iter().zip(self.nets()) {
            ck.push(format!("{prefix}{name}"), net.clone());
        }
    }

    /// Restores the sub-networks written by [`SwnParams::write_checkpoint`].
    pub fn read_checkpoint(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (name, net) in NET_NAMES.iter().zip(self.nets_mut()) {
            let loaded = ck.require(&format!("{prefix}{name}"))?;
            if loaded.num_params() != net.num_params() {
                return Err(Error::Checkpoint(format!("network `{name}` has the wrong shape")));
            }
            *net = loaded.clone();
        }
        Ok(())
    }
}

/// Replaces each positive's `s_cls` by the mean over positives and each
/// negative's by the mean over negatives. Empty groups are left alone.
pub fn smooth_cls_weights(records: &mut [SampleRecord]) {
    for group in [Label::Positive, Label::Negative] {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in records.iter().filter(|r| r.label == group) {
            sum += r.s_cls;
            count += 1;
        }
        if count == 0 {
            continue;
        }
        let mean = sum / count as f64;
        for r in records.iter_mut().filter(|r| r.label == group) {
            r.s_cls = mean;
        }
    }
}

/// One optimizer step of the network on a detached batch; see
/// [`SwnParams::step`].
pub fn swn_step(
    params: &mut SwnParams,
    batch: &mut [SampleRecord],
    norm: LossNormalization,
    reg: &RegularizerConfig,
    opt: &mut OptimizerState,
) -> Result<SwnOutput> {
    params.step(batch, norm, reg, opt)
}
