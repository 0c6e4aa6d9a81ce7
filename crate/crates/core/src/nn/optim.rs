//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: hyper-parameters plus per-parameter moment buffers,
/// allocated on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::new(OptimizerKind::Sgd { momentum }, lr, 0.0)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr, 0.0)
    }

    fn ensure_buffers(&mut self, n: usize) -> Result<()> {
        if self.first.is_empty() {
            self.first = vec![0.0; n];
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = vec![0.0; n];
            }
        } else if self.first.len() != n {
            return Err(Error::LengthMismatch {
                what: "optimizer buffers",
                expected: self.first.len(),
                got: n,
            });
        }
        Ok(())
    }

    /// Applies one update in place.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                what: "gradients",
                expected: params.len(),
                got: grads.len(),
            });
        }
        self.ensure_buffers(params.len())?;
        self.step += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    let g = g + wd * *p;
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let g = g + wd * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}

/// Plain SGD step.
pub fn sgd_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.apply(params, grads)
}

/// Bias-corrected Adam step.
pub fn adam_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.apply(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sgd_examples() {
        let mut s = OptimizerState::sgd(0.1, 0.0);
        let mut w = vec![0.7, -1.2];
        sgd_step(&mut s, &mut w, &[0.0, 0.0]).unwrap();
        assert_eq!(w, vec![0.7, -1.2]);
        let mut w = vec![0.0];
        sgd_step(&mut OptimizerState::sgd(0.1, 0.0), &mut w, &[1.0]).unwrap();
        assert_eq!(w, vec![-0.1]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = OptimizerState::sgd(0.1, 0.9);
        let mut w = vec![0.0];
        sgd_step(&mut s, &mut w, &[1.0]).unwrap();
        sgd_step(&mut s, &mut w, &[1.0]).unwrap();
        assert!((w[0] - (-0.1 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for g in [1e-3, 0.5, 1.0, 250.0] {
            let mut s = OptimizerState::adam(0.001);
            let mut w = vec![1.0];
            adam_step(&mut s, &mut w, &[g]).unwrap();
            assert!(((1.0 - w[0]) - 0.001).abs() < 1e-8, "g={g}: step {}", 1.0 - w[0]);
        }
    }

    #[test]
    fn buffer_shape_mismatch() {
        let mut s = OptimizerState::adam(0.01);
        let mut w = vec![0.0; 3];
        adam_step(&mut s, &mut w, &[1.0; 3]).unwrap();
        let mut w2 = vec![0.0; 2];
        assert!(adam_step(&mut s, &mut w2, &[1.0; 2]).is_err());
        assert!(adam_step(&mut s, &mut w, &[1.0; 2]).is_err());
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut s = OptimizerState::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1, 0.5);
        let mut w = vec![2.0];
        s.apply(&mut w, &[0.0]).unwrap();
        assert!((w[0] - 1.9).abs() < 1e-15);
    }

    proptest! {
        // with constant-magnitude gradients v_hat = g^2 exactly, so |m_hat| / sqrt(v_hat) <= 1
        #[test]
        fn adam_step_bounded_by_lr(signs in proptest::collection::vec(any::<bool>(), 1..200), mag in 1e-3..1e3f64) {
            let lr = 0.01;
            let mut s = OptimizerState::adam(lr);
            let mut w = vec![0.0];
            for sgn in signs {
                let before = w[0];
                adam_step(&mut s, &mut w, &[if sgn { mag } else { -mag }]).unwrap();
                prop_assert!((w[0] - before).abs() <= lr * (1.0 + 1e-9));
            }
        }

        // general sequences obey the looser lr * (1 - b1) / sqrt(1 - b2) bound
        #[test]
        fn adam_step_general_bound(gs in proptest::collection::vec(-1e3..1e3f64, 1..200)) {
            let lr = 0.01;
            let bound = lr * 0.1 / (0.001f64).sqrt();
            let mut s = OptimizerState::adam(lr);
            let mut w = vec![0.0];
            for g in gs {
                let before = w[0];
                adam_step(&mut s, &mut w, &[g]).unwrap();
                prop_assert!((w[0] - before).abs() <= bound * (1.0 + 1e-9));
            }
        }
    }
}
