use std::time::Instant;

use rand::Rng;

use super::{
    oracle, EstimatorSpec, GradError, GradTarget, GradientReport, Problem, TimestepSelection,
};
use crate::array::DenseArray;
use crate::model::VelocityField;
use crate::tape::{Tape, Var};

/// How one DDIM step is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StepMode {
    /// Velocity and update fully differentiable.
    Live,
    /// Velocity differentiable in the parameters only: its state input
    /// passes through stop-gradient.
    ParamsOnly,
    /// Velocity evaluated with recording off; the update stays live, so
    /// the state Jacobian of the step is the identity.
    Detached,
    /// Whole step evaluated with recording off; everything below it sees a
    /// constant state.
    Frozen,
}

fn ddim_update(tape: &mut Tape, x: Var, u: Var, h: f64) -> Result<Var, GradError> {
    let su = tape.scale(u, h)?;
    Ok(tape.sub(x, su)?)
}

/// Replay the DDIM chain from `start` (at grid index `top`) down to `x_0`.
pub(crate) fn run_chain<V: VelocityField>(
    tape: &mut Tape,
    problem: &Problem<'_, V>,
    params: &[Var],
    start: Var,
    top: usize,
    mode: impl Fn(usize) -> StepMode,
) -> Result<Var, GradError> {
    let (field, schedule) = (problem.field, problem.schedule);
    let h = schedule.step_size();
    let mut x = start;
    for n in (1..=top).rev() {
        let t = schedule.time(n);
        x = match mode(n) {
            StepMode::Live => {
                let u = field.velocity_on_tape(schedule, tape, params, x, t)?;
                ddim_update(tape, x, u, h)?
            }
            StepMode::ParamsOnly => {
                let xs = tape.stop_gradient(x);
                let u = field.velocity_on_tape(schedule, tape, params, xs, t)?;
                ddim_update(tape, x, u, h)?
            }
            StepMode::Detached => {
                let u = tape.with_recording(false, |tp| {
                    field.velocity_on_tape(schedule, tp, params, x, t)
                })?;
                ddim_update(tape, x, u, h)?
            }
            StepMode::Frozen => tape.with_recording(false, |tp| {
                let u = field.velocity_on_tape(schedule, tp, params, x, t)?;
                ddim_update(tp, x, u, h)
            })?,
        };
        if !tape.value(x).is_finite() {
            return Err(GradError::NonFinite { step: n - 1 });
        }
    }
    Ok(x)
}

/// Run the chain with the given per-step modes and pull `dJ/dx_0` back to
/// the target.
fn chain_gradient<V: VelocityField>(
    problem: &Problem<'_, V>,
    target: GradTarget,
    estimator: EstimatorSpec,
    mode: impl Fn(usize) -> StepMode,
) -> Result<GradientReport, GradError> {
    target.validate(problem.schedule)?;
    let top = target.start_step(problem.schedule);
    let mut tape = Tape::new();
    let (params, start) = match target {
        GradTarget::Latent { .. } => {
            let params: Vec<Var> = problem
                .field
                .param_arrays()
                .into_iter()
                .map(|p| tape.constant(p))
                .collect();
            (params, tape.variable(problem.start.clone()))
        }
        GradTarget::Parameters => {
            let params = problem.field.bind_params(&mut tape);
            (params, tape.constant(problem.start.clone()))
        }
    };
    let x0 = run_chain(&mut tape, problem, &params, start, top, mode)?;
    let (value, cotangent) = problem.objective.value_and_gradient(tape.value(x0))?;
    let grads = tape.vjp(x0, &cotangent)?;
    let gradient = match target {
        GradTarget::Latent { .. } => grads.wrt(start).clone(),
        GradTarget::Parameters => DenseArray::vector(grads.flatten(&params)),
    };
    let mut report = GradientReport::new(gradient, estimator, problem.seed, value);
    report.tape_node_count = tape.node_count();
    Ok(report)
}

/// Exact gradient through every step.
pub fn grad_bptt<V: VelocityField>(
    problem: &Problem<'_, V>,
    target: GradTarget,
) -> Result<GradientReport, GradError> {
    chain_gradient(problem, target, EstimatorSpec::Bptt, |_| StepMode::Live)
}

/// One-step latent gradient at the chain's start `m`:
/// `dJ/dx_0 (I - (1/N) du(x_m, m/N)/dx_m)`.
pub fn grad_sdo_latent<V: VelocityField>(
    problem: &Problem<'_, V>,
    m: usize,
) -> Result<GradientReport, GradError> {
    chain_gradient(problem, GradTarget::Latent { step: m }, EstimatorSpec::sdo(), |n| {
        if n == m {
            StepMode::Live
        } else {
            StepMode::Detached
        }
    })
}

/// One-step parameter gradient `-(1/N) dJ/dx_0 du(x_i', i'/N)/dtheta`, or
/// its sum over all `i'`.
pub fn grad_sdo_params<V: VelocityField>(
    problem: &Problem<'_, V>,
    selection: TimestepSelection,
    rng: &mut impl Rng,
) -> Result<GradientReport, GradError> {
    let n_steps = problem.schedule.steps;
    let estimator = EstimatorSpec::Sdo { selection };
    let chosen = match selection {
        TimestepSelection::RandomUniform => Some(rng.random_range(1..=n_steps)),
        TimestepSelection::Fixed(i) => {
            if i == 0 || i > n_steps {
                return Err(GradError::Request(format!("step {i} outside 1..={n_steps}")));
            }
            Some(i)
        }
        TimestepSelection::FullSum => None,
    };
    let mut report = chain_gradient(problem, GradTarget::Parameters, estimator, |n| match chosen {
        Some(i) if n != i => StepMode::Detached,
        _ => StepMode::ParamsOnly,
    })?;
    report.selected_step = chosen;
    Ok(report)
}

/// Backprop through the last `k` steps only; the state entering the window
/// is a constant. `k = None` draws `k ~ Uniform{1..N}` from `rng`.
pub fn grad_truncated<V: VelocityField>(
    problem: &Problem<'_, V>,
    target: GradTarget,
    k: Option<usize>,
    rng: &mut impl Rng,
) -> Result<GradientReport, GradError> {
    target.validate(problem.schedule)?;
    let top = target.start_step(problem.schedule);
    let window = match k {
        Some(k) if k == 0 || k > top => {
            return Err(GradError::Request(format!("window {k} outside 1..={top}")));
        }
        Some(k) => k,
        None => rng.random_range(1..=top),
    };
    let estimator = EstimatorSpec::Truncated { k };
    let mut report = chain_gradient(problem, target, estimator, |n| {
        if n <= window {
            StepMode::Live
        } else {
            StepMode::Frozen
        }
    })?;
    report.selected_step = Some(window);
    Ok(report)
}

/// Dispatch on `estimator`, timing the call.
pub fn compute_gradient<V: VelocityField>(
    problem: &Problem<'_, V>,
    target: GradTarget,
    estimator: &EstimatorSpec,
    rng: &mut impl Rng,
) -> Result<GradientReport, GradError> {
    let started = Instant::now();
    let mut report = match *estimator {
        EstimatorSpec::Bptt => grad_bptt(problem, target)?,
        EstimatorSpec::Sdo { selection } => match target {
            GradTarget::Latent { step } => {
                let mut r = grad_sdo_latent(problem, step)?;
                r.estimator = *estimator;
                r
            }
            GradTarget::Parameters => grad_sdo_params(problem, selection, rng)?,
        },
        EstimatorSpec::LastStep => {
            let mut r = grad_truncated(problem, target, Some(1), rng)?;
            r.estimator = EstimatorSpec::LastStep;
            r
        }
        EstimatorSpec::Truncated { k } => grad_truncated(problem, target, k, rng)?,
        EstimatorSpec::IftOracle => oracle::grad_ift_oracle(problem, target)?,
        EstimatorSpec::FdOracle { h } => {
            let map = oracle::FdMap::TrueMap;
            let gradient = oracle::grad_fd_oracle(problem, target, map, h)?;
            let x0 = super::final_state(
                problem.field,
                problem.schedule,
                problem.start,
                target.start_step(problem.schedule),
            )?;
            let value = problem.objective.value(&x0)?;
            GradientReport::new(gradient, *estimator, problem.seed, value)
        }
    };
    report.wall_time_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}
