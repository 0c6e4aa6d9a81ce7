//! Central-difference gradient checker.

use serde::Serialize;

/// Checker settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Gradients smaller than this in magnitude are compared absolutely
    /// against it.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-6,
            floor: 1e-4,
        }
    }
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because the probe straddled a nondifferentiable
    /// point (relu kink, clip boundary).
    pub excluded: Vec<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    /// Folds another report into this one.
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.excluded.extend(&other.excluded);
        self.tol = self.tol.max(other.tol);
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// `f` returns the scalar value together with a signature of its
/// piecewise-linear regions; a coordinate whose `+h` and `-h` probes land
/// in different regions is reported as excluded rather than checked. Pass
/// `coords` to check a subset of coordinates.
pub fn gradcheck<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    cfg: &GradCheck,
    coords: Option<&[usize]>,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, u64),
{
    assert_eq!(params.len(), analytic.len(), "gradient length must match parameters");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
        tol: cfg.tol,
    };
    let (_, sig0) = f(params);
    let mut probe = params.to_vec();
    for &k in coords {
        probe[k] = params[k] + cfg.h;
        let (plus, sig_plus) = f(&probe);
        probe[k] = params[k] - cfg.h;
        let (minus, sig_minus) = f(&probe);
        probe[k] = params[k];
        if sig_plus != sig0 || sig_minus != sig0 {
            report.excluded.push(k);
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let err = relative_error(analytic[k], numeric, cfg.floor);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(k);
        }
    }
    report
}
