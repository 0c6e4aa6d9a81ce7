//! Small dense networks with hand-written backpropagation, optimizers,
//! a finite-difference gradient checker and text checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradcheck, GradCheck, GradCheckReport};
pub use mlp::{Activation, Dense, DenseGrads, Mlp, MlpGrads, Tape};
pub use optim::{adam_step, sgd_step, OptimizerKind, OptimizerState};

/// Gaussian-initialized MLP: relu hidden layers, identity output.
pub fn init_gaussian(dims: &[usize], std: f64, seed: u64) -> crate::Result<Mlp> {
    Mlp::gaussian(dims, std, seed)
}
