//! Diffusion schedule, velocity fields and the toy denoiser.

mod checkpoint;
mod data;
mod denoiser;
mod schedule;
mod train;

use thiserror::Error;

use crate::array::DenseArray;
use crate::tape::{Tape, TapeError, Var};

pub use checkpoint::{
    from_bytes, load_checkpoint, save_checkpoint, to_bytes, CheckpointError, CheckpointMeta, MAGIC,
};
pub use data::{DatasetKind, DatasetSpec};
pub use denoiser::{time_features, Denoiser, LinearVelocity, Mlp, Parameterization, ZeroVelocity};
pub use schedule::{Schedule, ScheduleKind};
pub use train::{
    dsm_loss, dsm_loss_with, train_denoiser, train_denoiser_with, DsmDraw, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("epsilon-parameterized velocity is singular at t = {0} (sigma_t = 0)")]
    SingularTime(f64),
    #[error("state shape {shape:?} does not end in data dimension {dim}")]
    StateShape { shape: Vec<usize>, dim: usize },
    #[error("expected {expected} parameters, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// A velocity field `u(x, t)` with a flat parameter vector.
///
/// States may be a single sample `[d]` or a batch `[rows, d]`; the field is
/// applied row-wise with a shared time.
pub trait VelocityField: Clone + Send + Sync {
    fn data_dim(&self) -> usize;

    fn param_count(&self) -> usize;

    /// Parameter tensors in declaration order.
    fn param_arrays(&self) -> Vec<DenseArray>;

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError>;

    fn flat_params(&self) -> Vec<f64> {
        self.param_arrays().into_iter().flat_map(|a| a.into_data()).collect()
    }

    /// Register the parameters on `tape` as watched variables.
    fn bind_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.param_arrays().into_iter().map(|p| tape.variable(p)).collect()
    }

    /// Record `u(x, t)` on `tape` using the parameter handles from [`bind_params`].
    ///
    /// [`bind_params`]: VelocityField::bind_params
    fn velocity_on_tape(
        &self,
        schedule: &Schedule,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        t: f64,
    ) -> Result<Var, ModelError>;

    /// Value-only evaluation; bit-identical to [`velocity_on_tape`].
    ///
    /// [`velocity_on_tape`]: VelocityField::velocity_on_tape
    fn velocity(&self, schedule: &Schedule, x: &DenseArray, t: f64) -> Result<DenseArray, ModelError>;
}

/// Accept `[d]` or `[rows, d]` states.
pub fn check_state_shape(x: &DenseArray, dim: usize) -> Result<(), ModelError> {
    if x.shape().is_empty() || x.shape().len() > 2 || x.last_dim() != dim {
        return Err(ModelError::StateShape {
            shape: x.shape().to_vec(),
            dim,
        });
    }
    Ok(())
}
