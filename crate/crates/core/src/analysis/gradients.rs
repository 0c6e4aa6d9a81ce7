//! The gradient suite run by the `gradcheck` command: every hand-written
//! backward pass against central differences at random probe points.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fmt::sig9;
use crate::geometry::Offset4;
use crate::losses::{
    l2_regression, l2_regression_grad, softmax_ce, softmax_ce_grad, uncertainty_loss, uncertainty_loss_grad,
    LossNormalization, RegularizerConfig, SampleRecord,
};
use crate::nn::{gradcheck, GradCheck, GradCheckReport, Mlp};
use crate::rng::{self, streams};
use crate::swn::{SwnConfig, SwnParams};
use crate::toydet::{detector_forward, DetectorConfig, DetectorParams, TrainConfig};

/// Tolerance for single operations.
pub const PURE_TOL: f64 = 1e-6;
/// Tolerance for composed networks.
pub const PIPELINE_TOL: f64 = 1e-4;
/// Coordinates checked per probe point of a network.
const COORDS_PER_PROBE: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientRow {
    pub name: &'static str,
    pub probes: usize,
    pub report: GradCheckReport,
}

pub fn gradients_to_csv(rows: &[GradientRow]) -> String {
    let mut s = String::from("name,probes,checked,excluded,max_rel_err,tol,passed\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name,
            r.probes,
            r.report.checked,
            r.report.excluded.len(),
            sig9(r.report.max_rel_err),
            sig9(r.report.tol),
            r.report.passed()
        ));
    }
    s
}

fn fold(name: &'static str, probes: usize, tol: f64, mut each: impl FnMut(usize) -> Result<GradCheckReport>) -> Result<GradientRow> {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
        tol,
    };
    for p in 0..probes {
        report.merge(&each(p)?);
    }
    Ok(GradientRow { name, probes, report })
}

fn uniform(r: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn pick(r: &mut impl Rng, n: usize) -> Vec<usize> {
    sample(r, n, COORDS_PER_PROBE.min(n)).into_vec()
}

fn random_records(r: &mut impl Rng, n: usize) -> Vec<SampleRecord> {
    (0..n)
        .map(|i| {
            if i == 0 || r.random_bool(0.4) {
                let iou = r.random_range(0.4..1.0);
                SampleRecord::positive(i, r.random_range(0.0..3.0), r.random_range(0.0..2.0), iou, r.random_range(0.0..1.0))
            } else {
                SampleRecord::negative(i, r.random_range(0.0..2.0))
            }
        })
        .collect()
}

/// Runs every check with `probes` random points each.
pub fn gradient_suite(cfg: &TrainConfig, probes: usize) -> Result<Vec<GradientRow>> {
    let seed = cfg.seed;
    let pure = GradCheck::with_tol(PURE_TOL);
    let piped = GradCheck::with_tol(PIPELINE_TOL);
    let classes = cfg.scene.num_classes + 1;
    let mut rows = Vec::new();

    rows.push(fold("softmax_ce", probes, PURE_TOL, |p| {
        let mut r = rng::substream(seed, streams::PROBE, p as u64);
        let x = uniform(&mut r, classes, -3.0, 3.0);
        let label = r.random_range(0..classes);
        let g = softmax_ce_grad(&x, label);
        Ok(gradcheck(|v| (softmax_ce(v, label).expect("label in range"), 0), &x, &g, &pure, None))
    })?);

    rows.push(fold("l2_regression", probes, PURE_TOL, |p| {
        let mut r = rng::substream(seed, streams::PROBE, 1_000_000 + p as u64);
        let x = uniform(&mut r, 4, -2.0, 2.0);
        let t = Offset4::from_slice(&uniform(&mut r, 4, -1.0, 1.0));
        let arr = Offset4::from_slice;
        let g = l2_regression_grad(&arr(&x), &t);
        Ok(gradcheck(|v| (l2_regression(&arr(v), &t), 0), &x, &g, &pure, None))
    })?);

    rows.push(fold("uncertainty_loss", probes, PURE_TOL, |p| {
        let mut r = rng::substream(seed, streams::PROBE, 2_000_000 + p as u64);
        let reg = RegularizerConfig { lambda1: r.random_range(0.0..2.0), lambda2: r.random_range(0.0..2.0) };
        let x = vec![r.random_range(0.0..3.0), r.random_range(0.0..3.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let rec = |v: &[f64]| {
            let mut s = SampleRecord::positive(0, v[0], v[1], 0.7, 0.5);
            s.m_cls = v[2];
            s.m_reg = v[3];
            s
        };
        let g = uncertainty_loss_grad(&rec(&x), &reg);
        let g = [g.d_l_cls, g.d_l_reg, g.d_m_cls, g.d_m_reg];
        Ok(gradcheck(|v| (uncertainty_loss(&rec(v), &reg), 0), &x, &g, &pure, None))
    })?);

    rows.push(fold("mlp", probes, PURE_TOL, |p| {
        let mut r = rng::substream(seed, streams::PROBE, 3_000_000 + p as u64);
        let net = Mlp::gaussian(&[3, 5, 4, 2], 0.7, r.random())?;
        let x = Array2::from_shape_vec((3, 3), uniform(&mut r, 9, -1.0, 1.0)).expect("shape");
        let c = Array2::from_shape_vec((3, 2), uniform(&mut r, 6, -1.0, 1.0)).expect("shape");
        let (_, tape) = net.forward_batch(x.view())?;
        let (_, grads) = net.backward(&tape, c.view())?;
        let f = |v: &[f64]| {
            let mut q = net.clone();
            q.load_flat(v).expect("length");
            let (y, t) = q.forward_batch(x.view()).expect("shape");
            ((&y * &c).sum(), t.activation_signature(&q.layers))
        };
        let coords = pick(&mut r, net.num_params());
        Ok(gradcheck(f, &net.to_flat(), &grads.to_flat(), &pure, Some(&coords)))
    })?);

    rows.push(fold("detector", probes, PIPELINE_TOL, |p| {
        let mut r = rng::substream(seed, streams::PROBE, 4_000_000 + p as u64);
        let dcfg = DetectorConfig { init_std: 0.5, ..cfg.detector.clone() };
        let det = DetectorParams::new(cfg.scene.feature_dim, cfg.scene.num_classes, &dcfg, r.random())?;
        let n = 3;
        let x = Array2::from_shape_vec((n, cfg.scene.feature_dim), uniform(&mut r, n * cfg.scene.feature_dim, -1.0, 1.0))
            .expect("shape");
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let targets: Vec<Offset4> = (0..n).map(|_| Offset4::from_slice(&uniform(&mut r, 4, -1.0, 1.0))).collect();
        let eval = |q: &DetectorParams| -> Result<(f64, u64, Vec<f64>)> {
            let out = detector_forward(q, x.view())?;
            let mut v = 0.0;
            let mut dl = Array2::zeros(out.logits.dim());
            let mut dr = Array2::zeros(out.reg.dim());
            for i in 0..n {
                let row = out.logits.row(i).to_vec();
                v += softmax_ce(&row, labels[i])?;
                for (c, g) in softmax_ce_grad(&row, labels[i]).into_iter().enumerate() {
                    dl[[i, c]] = g;
                }
                let pred = out.offsets(i);
                v += l2_regression(&pred, &targets[i]);
                for (j, g) in l2_regression_grad(&pred, &targets[i]).into_iter().enumerate() {
                    dr[[i, j]] = g;
                }
            }
            let sig = out.cls_tape.activation_signature(&q.cls.layers)
                ^ out.reg_tape.activation_signature(&q.reg.layers).rotate_left(1);
            let (_, gc) = q.cls.backward(&out.cls_tape, dl.view())?;
            let (_, gr) = q.reg.backward(&out.reg_tape, dr.view())?;
            let mut g = gc.to_flat();
            g.extend(gr.to_flat());
            Ok((v, sig, g))
        };
        let (_, _, analytic) = eval(&det)?;
        let f = |v: &[f64]| {
            let mut q = det.clone();
            q.load_flat(v).expect("length");
            let (val, sig, _) = eval(&q).expect("finite inputs");
            (val, sig)
        };
        let coords = pick(&mut r, det.num_params());
        Ok(gradcheck(f, &det.to_flat(), &analytic, &piped, Some(&coords)))
    })?);

    rows.push(fold("swn", probes, PIPELINE_TOL, |p| {
        let mut r = rng::substream(seed, streams::PROBE, 5_000_000 + p as u64);
        let scfg = SwnConfig { init_std: 0.3, last_bias: 0.0, ..cfg.swn.clone() };
        let net = SwnParams::new(&scfg, r.random())?;
        let batch = random_records(&mut r, 6);
        let norm = LossNormalization { n1: batch.len(), n2: batch.iter().filter(|b| b.is_positive()).count() };
        let reg = cfg.regularizer;
        let (_, analytic, _) = net.objective(&batch, norm, &reg)?;
        let f = |v: &[f64]| {
            let mut q = net.clone();
            q.load_flat(v).expect("length");
            let (out, _, fwd) = q.objective(&batch, norm, &reg).expect("finite inputs");
            (out.loss, q.signature(&fwd))
        };
        let coords = pick(&mut r, net.num_params());
        Ok(gradcheck(f, &net.to_flat(), &analytic, &piped, Some(&coords)))
    })?);

    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_default_config() {
        let rows = gradient_suite(&TrainConfig::standard_noisy(), 20).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert!(r.report.passed(), "{} {:?}", r.name, r.report);
            assert!(r.report.checked >= 20, "{} {:?}", r.name, r.report);
        }
        let csv = gradients_to_csv(&rows);
        assert_eq!(csv.lines().count(), 7);
    }
}
