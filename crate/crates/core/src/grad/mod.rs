//! Gradient engines for objectives of the sampled `x_0`.
//!
//! All engines share one chain runner that replays the DDIM recurrence on a
//! [`Tape`], choosing per step how much of the computation stays
//! differentiable:
//!
//! * backprop-through-time records every step;
//! * the one-step (SDO) latent gradient records only the first step's
//!   velocity, the parameter variant only the selected step's parameter
//!   dependence;
//! * truncated backprop records the last `k` steps;
//! * the implicit-function and finite-difference oracles recompute the same
//!   quantities independently.

mod bounds;
mod engines;
mod oracle;
mod sweep;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::DenseArray;
use crate::model::{ModelError, Schedule, VelocityField};
use crate::opt::{Objective, ObjectiveError};
use crate::sampler::{sample_from, SamplerError};
use crate::tape::TapeError;

pub use bounds::{evaluate_bounds, BoundReport};
pub use engines::{compute_gradient, grad_bptt, grad_sdo_latent, grad_sdo_params, grad_truncated};
pub use oracle::{grad_fd_oracle, grad_ift_oracle, relative_error, FdMap, IFT_DIM_LIMIT};
pub use sweep::{grad_norm_sweep, write_sweep_csv, SweepConfig, SweepRow};

#[derive(Debug, Error)]
pub enum GradError {
    #[error("invalid gradient request: {0}")]
    Request(String),
    #[error("stacked system of size {size} exceeds the oracle limit {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("stacked fixed-point system is singular")]
    Singular,
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// What the gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GradTarget {
    /// The state `x_m` at grid index `m`; the chain runs from `m` to 0.
    Latent { step: usize },
    /// The network parameters; the chain runs from `x_N`.
    Parameters,
}

impl GradTarget {
    /// Grid index of the state the chain starts from.
    pub fn start_step(&self, schedule: &Schedule) -> usize {
        match self {
            GradTarget::Latent { step } => *step,
            GradTarget::Parameters => schedule.steps,
        }
    }

    pub fn validate(&self, schedule: &Schedule) -> Result<(), GradError> {
        if let GradTarget::Latent { step } = self {
            if *step == 0 || *step > schedule.steps {
                return Err(GradError::Request(format!(
                    "latent step {step} outside 1..={}",
                    schedule.steps
                )));
            }
        }
        Ok(())
    }
}

/// Which single step carries the parameter dependence in the one-step
/// parameter gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestepSelection {
    /// `i' ~ Uniform{1..N}` from the timestep stream, per call.
    RandomUniform,
    Fixed(usize),
    /// Every step at once (the un-sampled sum).
    FullSum,
}

/// A gradient estimator. Serialized as its display name (`"sdo"`,
/// `"truncated-5"`, ...); the finite-difference step is not part of the
/// name and deserializes to [`DEFAULT_FD_STEP`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EstimatorSpec {
    Bptt,
    Sdo { selection: TimestepSelection },
    IftOracle,
    FdOracle { h: f64 },
    LastStep,
    /// Backprop through the last `k` steps; `k` drawn uniformly per call
    /// when absent.
    Truncated { k: Option<usize> },
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

impl TryFrom<String> for EstimatorSpec {
    type Error = GradError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<EstimatorSpec> for String {
    fn from(e: EstimatorSpec) -> Self {
        e.to_string()
    }
}

impl EstimatorSpec {
    pub fn sdo() -> Self {
        EstimatorSpec::Sdo {
            selection: TimestepSelection::RandomUniform,
        }
    }

    pub fn fd() -> Self {
        EstimatorSpec::FdOracle { h: DEFAULT_FD_STEP }
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorSpec::Bptt => write!(f, "bptt"),
            EstimatorSpec::Sdo { selection } => match selection {
                TimestepSelection::RandomUniform => write!(f, "sdo"),
                TimestepSelection::Fixed(i) => write!(f, "sdo-fixed-{i}"),
                TimestepSelection::FullSum => write!(f, "sdo-full-sum"),
            },
            EstimatorSpec::IftOracle => write!(f, "ift-oracle"),
            EstimatorSpec::FdOracle { .. } => write!(f, "fd-oracle"),
            EstimatorSpec::LastStep => write!(f, "last-step"),
            EstimatorSpec::Truncated { k: Some(k) } => write!(f, "truncated-{k}"),
            EstimatorSpec::Truncated { k: None } => write!(f, "truncated-uniform"),
        }
    }
}

impl FromStr for EstimatorSpec {
    type Err = GradError;

    /// Parses the names produced by `Display`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GradError::Request(format!("unknown estimator {s:?}"));
        let number = |rest: &str| rest.parse::<usize>().map_err(|_| bad());
        Ok(match s {
            "bptt" => EstimatorSpec::Bptt,
            "sdo" => EstimatorSpec::sdo(),
            "sdo-full-sum" => EstimatorSpec::Sdo {
                selection: TimestepSelection::FullSum,
            },
            "ift-oracle" => EstimatorSpec::IftOracle,
            "fd-oracle" => EstimatorSpec::fd(),
            "last-step" => EstimatorSpec::LastStep,
            "truncated-uniform" => EstimatorSpec::Truncated { k: None },
            _ => {
                if let Some(rest) = s.strip_prefix("sdo-fixed-") {
                    EstimatorSpec::Sdo {
                        selection: TimestepSelection::Fixed(number(rest)?),
                    }
                } else if let Some(rest) = s.strip_prefix("truncated-") {
                    EstimatorSpec::Truncated {
                        k: Some(number(rest)?),
                    }
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

/// Everything a gradient engine needs besides the estimator.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a, V> {
    pub field: &'a V,
    pub schedule: &'a Schedule,
    pub objective: &'a Objective,
    /// The chain's starting state: `x_m` for a latent target at step `m`,
    /// `x_N` for a parameter target.
    pub start: &'a DenseArray,
    /// Master seed of the run, recorded in reports.
    pub seed: u64,
}

impl<'a, V: VelocityField> Problem<'a, V> {
    pub fn new(
        field: &'a V,
        schedule: &'a Schedule,
        objective: &'a Objective,
        start: &'a DenseArray,
    ) -> Self {
        Self {
            field,
            schedule,
            objective,
            start,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A gradient and its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    /// Shaped like the latent for latent targets; flat for parameters.
    pub gradient: DenseArray,
    pub l2_norm: f64,
    pub tape_node_count: usize,
    pub wall_time_seconds: f64,
    pub estimator: EstimatorSpec,
    pub seed: u64,
    pub finite: bool,
    /// The step `i'` or window length `k` actually used by randomized
    /// estimators.
    pub selected_step: Option<usize>,
    /// Objective at the sampled `x_0`.
    pub objective_value: f64,
}

impl GradientReport {
    pub(crate) fn new(
        gradient: DenseArray,
        estimator: EstimatorSpec,
        seed: u64,
        objective_value: f64,
    ) -> Self {
        Self {
            l2_norm: gradient.l2_norm(),
            finite: gradient.is_finite(),
            gradient,
            tape_node_count: 0,
            wall_time_seconds: 0.0,
            estimator,
            seed,
            selected_step: None,
            objective_value,
        }
    }
}

/// `x_m` reached from `x_N` by sequential sampling.
pub fn state_at_step<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    x_n: &DenseArray,
    m: usize,
) -> Result<DenseArray, GradError> {
    if m > schedule.steps {
        return Err(GradError::Request(format!("step {m} outside 0..={}", schedule.steps)));
    }
    let mut x = x_n.clone();
    for n in ((m + 1)..=schedule.steps).rev() {
        x = crate::sampler::ddim_step(field, schedule, &x, n)?;
    }
    Ok(x)
}

/// `x_0` reached from `start` at grid index `top`.
pub(crate) fn final_state<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    start: &DenseArray,
    top: usize,
) -> Result<DenseArray, GradError> {
    let mut states = sample_from(field, schedule, start, top)?;
    Ok(states.swap_remove(0))
}
