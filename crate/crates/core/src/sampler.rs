//! Sequential DDIM sampling and Picard (parallel-in-time) refinement.
//!
//! Grid index `n` corresponds to time `t = n / N`; sampling runs from the
//! noise `x_N` down to the sample `x_0` with the explicit Euler step
//! `x_{n-1} = x_n - (1/N) u(x_n, n/N)`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::DenseArray;
use crate::model::{check_state_shape, ModelError, Schedule, VelocityField};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("step index {n} outside 1..={steps}")]
    StepOutOfRange { n: usize, steps: usize },
    #[error("non-finite state produced at step {step}")]
    NonFinite { step: usize },
    #[error("sequence has {actual} states, expected {expected}")]
    SequenceLength { expected: usize, actual: usize },
    #[error("invalid Picard settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing trajectory: {0}")]
    Io(#[from] std::io::Error),
}

/// One DDIM step from grid index `n` to `n - 1`.
pub fn ddim_step<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    x: &DenseArray,
    n: usize,
) -> Result<DenseArray, SamplerError> {
    if n == 0 || n > schedule.steps {
        return Err(SamplerError::StepOutOfRange {
            n,
            steps: schedule.steps,
        });
    }
    let u = field.velocity(schedule, x, schedule.time(n))?;
    Ok(x.sub(&u.scale(schedule.step_size())).expect("velocity has state shape"))
}

/// States `x_0 .. x_top` of one sampling run, indexed by grid index.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub schedule: Schedule,
    states: Vec<DenseArray>,
}

impl Trajectory {
    pub fn new(schedule: Schedule, states: Vec<DenseArray>) -> Self {
        assert!(!states.is_empty(), "trajectory needs at least one state");
        Self { schedule, states }
    }

    /// State at grid index `n`.
    pub fn state(&self, n: usize) -> &DenseArray {
        &self.states[n]
    }

    pub fn states(&self) -> &[DenseArray] {
        &self.states
    }

    pub fn into_states(self) -> Vec<DenseArray> {
        self.states
    }

    /// Highest grid index held (`N` for a full run).
    pub fn top(&self) -> usize {
        self.states.len() - 1
    }

    pub fn sample(&self) -> &DenseArray {
        &self.states[0]
    }

    /// Max over grid indices of the per-state infinity-norm difference.
    pub fn max_deviation(&self, other: &Trajectory) -> f64 {
        assert_eq!(self.states.len(), other.states.len(), "trajectory lengths differ");
        self.states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// CSV with `step_index, t, x0, x1, ...`, one row per state from the top
    /// index down to 0. Batched states are flattened row-major.
    pub fn write_csv(&self, out: impl Write) -> Result<(), SamplerError> {
        let mut w = csv::Writer::from_writer(out);
        let width = self.states[0].len();
        let mut header = vec!["step_index".to_string(), "t".to_string()];
        header.extend((0..width).map(|k| format!("x{k}")));
        w.write_record(&header).map_err(csv_io)?;
        for n in (0..self.states.len()).rev() {
            let mut row = vec![n.to_string(), format_f64(self.schedule.time(n))];
            row.extend(self.states[n].data().iter().map(|v| format_f64(*v)));
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

/// Shortest representation that round-trips.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Run DDIM from `x` at grid index `m` down to 0; returns `x_0 .. x_m`.
pub fn sample_from<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    x: &DenseArray,
    m: usize,
) -> Result<Vec<DenseArray>, SamplerError> {
    if m > schedule.steps {
        return Err(SamplerError::StepOutOfRange {
            n: m,
            steps: schedule.steps,
        });
    }
    check_state_shape(x, field.data_dim())?;
    if !x.is_finite() {
        return Err(SamplerError::NonFinite { step: m });
    }
    let mut states = vec![x.clone()];
    for n in (1..=m).rev() {
        let next = ddim_step(field, schedule, states.last().expect("non-empty"), n)?;
        if !next.is_finite() {
            return Err(SamplerError::NonFinite { step: n - 1 });
        }
        states.push(next);
    }
    states.reverse();
    Ok(states)
}

/// Full sequential run from the noise `x_N`.
pub fn sample_sequential<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    x_n: &DenseArray,
) -> Result<Trajectory, SamplerError> {
    Ok(Trajectory::new(*schedule, sample_from(field, schedule, x_n, schedule.steps)?))
}

/// `u(x_i, i/N)` for `i = 1..=N`, optionally evaluated concurrently.
fn velocities<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    seq: &[DenseArray],
    parallel: bool,
) -> Result<Vec<DenseArray>, SamplerError> {
    let eval = |i: usize| field.velocity(schedule, &seq[i], schedule.time(i));
    let out: Result<Vec<_>, ModelError> = if parallel {
        (1..seq.len()).into_par_iter().map(eval).collect()
    } else {
        (1..seq.len()).map(eval).collect()
    };
    Ok(out?)
}

/// One Picard sweep: `x_n <- x_N - (1/N) sum_{i=N..n+1} u(x_i, i/N)`.
///
/// The cumulative sum runs from `i = N` downwards and is scaled once, so
/// the result does not depend on `parallel`.
pub fn picard_update<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    seq: &[DenseArray],
    parallel: bool,
) -> Result<Vec<DenseArray>, SamplerError> {
    let n_steps = schedule.steps;
    if seq.len() != n_steps + 1 {
        return Err(SamplerError::SequenceLength {
            expected: n_steps + 1,
            actual: seq.len(),
        });
    }
    let u = velocities(field, schedule, seq, parallel)?;
    let h = schedule.step_size();
    let top = &seq[n_steps];
    let mut out = vec![top.clone(); n_steps + 1];
    let mut acc = DenseArray::zeros(top.shape());
    for n in (0..n_steps).rev() {
        acc = acc.add(&u[n]).expect("velocity has state shape");
        out[n] = top.sub(&acc.scale(h)).expect("same shape");
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    pub tolerance: f64,
    pub max_iters: usize,
    #[serde(default)]
    pub parallel: bool,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iters: 1000,
            parallel: false,
        }
    }
}

/// Why a Picard run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PicardStop {
    /// The last sweep changed no entry by more than the tolerance.
    Tolerance,
    /// `N` sweeps were applied. Entry `n` depends only on entries above it,
    /// so after `k` sweeps the top `k + 1` entries are final; after `N`
    /// sweeps the sequence is the fixed point, bit for bit.
    Exhausted,
    /// `max_iters` reached first.
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub trajectory: Trajectory,
    pub iters_used: usize,
    /// Infinity-norm change of each sweep.
    pub residuals: Vec<f64>,
    pub stop: PicardStop,
}

impl PicardOutcome {
    pub fn converged(&self) -> bool {
        self.stop != PicardStop::MaxIters
    }

    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }
}

/// Picard iteration from the constant initial guess `x_n = x_N`.
pub fn sample_picard<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    x_n: &DenseArray,
    config: &PicardConfig,
) -> Result<PicardOutcome, SamplerError> {
    if !(config.tolerance > 0.0) || config.max_iters == 0 {
        return Err(SamplerError::Settings(format!(
            "need tolerance > 0 and max_iters >= 1, got {} and {}",
            config.tolerance, config.max_iters
        )));
    }
    check_state_shape(x_n, field.data_dim())?;
    let mut seq = vec![x_n.clone(); schedule.steps + 1];
    let mut residuals = Vec::new();
    let mut stop = PicardStop::MaxIters;
    for k in 1..=config.max_iters {
        let next = picard_update(field, schedule, &seq, config.parallel)?;
        if let Some(bad) = next.iter().position(|s| !s.is_finite()) {
            return Err(SamplerError::NonFinite { step: bad });
        }
        let residual = next
            .iter()
            .zip(&seq)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max);
        residuals.push(residual);
        seq = next;
        if residual <= config.tolerance {
            stop = PicardStop::Tolerance;
            break;
        }
        if k == schedule.steps {
            stop = PicardStop::Exhausted;
            break;
        }
    }
    Ok(PicardOutcome {
        iters_used: residuals.len(),
        residuals,
        stop,
        trajectory: Trajectory::new(*schedule, seq),
    })
}

#[derive(Debug, Clone)]
pub struct PicardCheckReport {
    /// Max over grid indices of `|x_n^seq - x_n^picard|_inf`.
    pub max_deviation: f64,
    pub picard: PicardOutcome,
    pub sequential: Trajectory,
}

/// Compare sequential DDIM with the Picard fixed point from the same noise.
pub fn verify_prop1<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    x_n: &DenseArray,
    config: &PicardConfig,
) -> Result<PicardCheckReport, SamplerError> {
    let sequential = sample_sequential(field, schedule, x_n)?;
    let picard = sample_picard(field, schedule, x_n, config)?;
    Ok(PicardCheckReport {
        max_deviation: sequential.max_deviation(&picard.trajectory),
        picard,
        sequential,
    })
}

/// Max over steps of `|x_{n-1} - ddim_step(x_n, n)|_inf` for a sequence.
pub fn ddim_recurrence_residual<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    seq: &[DenseArray],
) -> Result<f64, SamplerError> {
    let mut worst: f64 = 0.0;
    for n in 1..seq.len() {
        let step = ddim_step(field, schedule, &seq[n], n)?;
        worst = worst.max(step.max_abs_diff(&seq[n - 1]));
    }
    Ok(worst)
}
