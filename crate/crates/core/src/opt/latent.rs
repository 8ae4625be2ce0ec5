use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Objective};
use crate::array::DenseArray;
use crate::grad::{compute_gradient, state_at_step, EstimatorSpec, GradError, GradTarget, Problem};
use crate::model::{Schedule, VelocityField};
use crate::sampler::sample_from;

/// Largest number of coordinates a driver will hand to the
/// finite-difference oracle.
pub const FD_DRIVER_LIMIT: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentOptConfig {
    /// Grid index `m` of the optimized state; `None` means `N`.
    #[serde(default)]
    pub start_step: Option<usize>,
    #[serde(default = "EstimatorSpec::sdo")]
    pub estimator: EstimatorSpec,
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default)]
    pub optimizer: LatentOptimizer,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Radius of the infinity-norm ball around the initial latent.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "yes")]
    pub track_best: bool,
}

fn yes() -> bool {
    true
}

/// Update rule for the latent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentOptimizer {
    #[default]
    Adam,
    /// Plain gradient descent, `x <- x - lr * g`.
    GradientDescent,
}

impl LatentOptConfig {
    pub fn new(learning_rate: f64, steps: usize) -> Self {
        Self {
            start_step: None,
            estimator: EstimatorSpec::sdo(),
            learning_rate,
            steps,
            optimizer: LatentOptimizer::Adam,
            adam: AdamConfig::default(),
            tau: None,
            track_best: true,
        }
    }

    pub fn validate(&self, schedule: &Schedule) -> Result<(), GradError> {
        let bad = |m: String| Err(GradError::Request(m));
        if let Some(m) = self.start_step {
            if m == 0 || m > schedule.steps {
                return bad(format!("start step {m} outside 1..={}", schedule.steps));
            }
        }
        match self.estimator {
            EstimatorSpec::Sdo { .. } | EstimatorSpec::Bptt | EstimatorSpec::FdOracle { .. } => {}
            other => return bad(format!("latent optimization supports sdo, bptt and fd-oracle, not {other}")),
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return bad(format!("tau must be positive, got {tau}"));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        Ok(())
    }
}

/// Clamp every coordinate of `x` into `[c - tau, c + tau]`, so that
/// `|x - c| <= tau` holds as computed in floating point.
pub fn project_linf(x: &mut [f64], center: &[f64], tau: f64) {
    for (v, &c) in x.iter_mut().zip(center) {
        *v = v.clamp(c - tau, c + tau);
        // the rounded bound can sit one ulp outside
        while (*v - c).abs() > tau {
            *v = if *v > c { v.next_down() } else { v.next_up() };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentRecord {
    pub step: usize,
    /// Objective at the iterate before this step's update.
    pub loss: f64,
    /// `None` for the final, un-updated iterate.
    pub grad_l2: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentOutcome {
    /// The initial state at step `m` (the ball center).
    pub initial_latent: DenseArray,
    /// The final state at step `m`.
    pub latent: DenseArray,
    /// One record per evaluated iterate, the last one without a gradient.
    pub history: Vec<LatentRecord>,
    pub final_x0: DenseArray,
    /// Lowest-loss `x_0` seen (the final one when tracking is off).
    pub best_x0: DenseArray,
    pub best_loss: f64,
    /// Step at which a non-finite loss or gradient stopped the run.
    pub aborted_at: Option<usize>,
    /// Largest `|x - x_initial|_inf` over all iterates.
    pub max_deviation: f64,
}

impl LatentOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.history[0].loss
    }

    pub fn final_loss(&self) -> f64 {
        self.history.last().expect("non-empty history").loss
    }
}

/// Steer `x_m` (reached from `x_init = x_N` along the unperturbed
/// trajectory) to lower the objective of `x_0`.
pub fn optimize_latent<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    x_init: &DenseArray,
    objective: &Objective,
    config: &LatentOptConfig,
    rng: &mut impl Rng,
) -> Result<LatentOutcome, GradError> {
    config.validate(schedule)?;
    if matches!(config.estimator, EstimatorSpec::FdOracle { .. }) && x_init.len() > FD_DRIVER_LIMIT {
        return Err(GradError::TooLarge {
            size: x_init.len(),
            limit: FD_DRIVER_LIMIT,
        });
    }
    let m = config.start_step.unwrap_or(schedule.steps);
    let target = GradTarget::Latent { step: m };
    let center = state_at_step(field, schedule, x_init, m)?;
    let mut latent = center.data().to_vec();
    let shape = center.shape().to_vec();
    let mut adam = Adam::new(latent.len(), config.adam);
    let started = Instant::now();

    let mut history = Vec::with_capacity(config.steps + 1);
    let mut best: Option<(f64, DenseArray)> = None;
    let mut aborted_at = None;
    let mut last_x0 = None;
    let mut max_deviation = 0.0f64;

    for step in 0..=config.steps {
        let x = DenseArray::new(shape.clone(), latent.clone()).expect("latent shape");
        let x0 = sample_from(field, schedule, &x, m)?.swap_remove(0);
        let loss = objective.value(&x0)?;
        if config.track_best && loss.is_finite() && best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, x0.clone()));
        }
        last_x0 = Some(x0);
        if !loss.is_finite() {
            history.push(LatentRecord { step, loss, grad_l2: None, elapsed_s: started.elapsed().as_secs_f64() });
            aborted_at = Some(step);
            break;
        }
        if step == config.steps {
            history.push(LatentRecord { step, loss, grad_l2: None, elapsed_s: started.elapsed().as_secs_f64() });
            break;
        }
        let problem = Problem::new(field, schedule, objective, &x);
        let report = compute_gradient(&problem, target, &config.estimator, rng)?;
        history.push(LatentRecord {
            step,
            loss,
            grad_l2: Some(report.l2_norm),
            elapsed_s: started.elapsed().as_secs_f64(),
        });
        if !report.finite {
            aborted_at = Some(step);
            break;
        }
        match config.optimizer {
            LatentOptimizer::Adam => adam.step(&mut latent, report.gradient.data(), config.learning_rate),
            LatentOptimizer::GradientDescent => {
                for (v, g) in latent.iter_mut().zip(report.gradient.data()) {
                    *v -= config.learning_rate * g;
                }
            }
        }
        if let Some(tau) = config.tau {
            project_linf(&mut latent, center.data(), tau);
        }
        for (v, c) in latent.iter().zip(center.data()) {
            max_deviation = max_deviation.max((v - c).abs());
        }
    }

    let final_x0 = last_x0.expect("at least one iterate");
    let (best_loss, best_x0) = match best {
        Some(b) if config.track_best => b,
        _ => (history.last().expect("non-empty history").loss, final_x0.clone()),
    };
    Ok(LatentOutcome {
        latent: DenseArray::new(shape, latent).expect("latent shape"),
        initial_latent: center,
        history,
        final_x0,
        best_x0,
        best_loss,
        aborted_at,
        max_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Denoiser, ZeroVelocity};
    use crate::rng::{normal_array, stream_rng, Stream};

    fn quad(target: Vec<f64>) -> Objective {
        Objective::QuadraticTarget { target }
    }

    #[test]
    fn identity_map_reaches_target() {
        let s = Schedule::straight_line(10).unwrap();
        let f = ZeroVelocity::new(2);
        let x = DenseArray::vector(vec![-1.0, 2.0]);
        let j = quad(vec![0.5, 0.25]);
        let cfg = LatentOptConfig::new(0.05, 200);
        let out = optimize_latent(&f, &s, &x, &j, &cfg, &mut stream_rng(0, Stream::Timestep)).unwrap();
        let miss = out.final_x0.sub(&DenseArray::vector(vec![0.5, 0.25])).unwrap().l2_norm();
        assert!(miss <= 1e-3, "{miss}");
        assert_eq!(out.history.len(), 201);
        assert!(out.aborted_at.is_none());
    }

    #[test]
    fn projection_holds_every_iterate() {
        let s = Schedule::vp_linear(0.1, 20.0, 6).unwrap();
        let d = Denoiser::default_toy(&mut stream_rng(1, Stream::Init));
        let x = normal_array(&mut stream_rng(1, Stream::Noise), &[4, 2]);
        let j = quad(vec![3.0, 3.0]);
        let mut cfg = LatentOptConfig::new(0.05, 1);
        cfg.tau = Some(0.1);
        let mut latent = x.clone();
        for _ in 0..15 {
            let out = optimize_latent(&d, &s, &latent, &j, &cfg, &mut stream_rng(1, Stream::Timestep)).unwrap();
            latent = out.latent;
            assert!(latent.max_abs_diff(&out.initial_latent) <= 0.1);
        }
        let mut cfg = LatentOptConfig::new(0.05, 15);
        cfg.tau = Some(0.1);
        let out = optimize_latent(&d, &s, &x, &j, &cfg, &mut stream_rng(1, Stream::Timestep)).unwrap();
        assert!(out.latent.max_abs_diff(&x) <= 0.1);
        assert!(out.latent.max_abs_diff(&x) > 0.09);
        assert!(out.max_deviation <= 0.1);
        cfg.optimizer = LatentOptimizer::GradientDescent;
        cfg.learning_rate = 10.0;
        let out = optimize_latent(&d, &s, &x, &j, &cfg, &mut stream_rng(1, Stream::Timestep)).unwrap();
        assert!(out.max_deviation <= 0.1);
    }

    #[test]
    fn projection_is_idempotent() {
        let c = [0.0, 1.0, -1.0];
        let mut once = vec![5.0, 1.05, -3.0];
        project_linf(&mut once, &c, 0.1);
        let mut twice = once.clone();
        project_linf(&mut twice, &c, 0.1);
        assert_eq!(once, twice);
        assert_eq!(once[..2], [0.1, 1.05]);
        assert!(once.iter().zip(&c).all(|(v, c)| (v - c).abs() <= 0.1));
    }

    #[test]
    fn zero_learning_rate_is_inert() {
        let s = Schedule::vp_linear(0.1, 20.0, 5).unwrap();
        let d = Denoiser::default_toy(&mut stream_rng(3, Stream::Init));
        let x = normal_array(&mut stream_rng(3, Stream::Noise), &[3, 2]);
        let cfg = LatentOptConfig::new(0.0, 5);
        let out = optimize_latent(&d, &s, &x, &quad(vec![1.0, 0.0]), &cfg, &mut stream_rng(3, Stream::Timestep)).unwrap();
        assert_eq!(out.latent, x);
        let first = out.history[0].loss;
        assert!(out.history.iter().all(|r| r.loss == first));
    }

    #[test]
    fn gradient_descent_step_on_identity_map() {
        let s = Schedule::straight_line(2).unwrap();
        let f = ZeroVelocity::new(1);
        let x = DenseArray::vector(vec![1.0]);
        let mut cfg = LatentOptConfig::new(0.25, 1);
        cfg.optimizer = LatentOptimizer::GradientDescent;
        let out = optimize_latent(&f, &s, &x, &quad(vec![0.0]), &cfg, &mut stream_rng(0, Stream::Timestep)).unwrap();
        // gradient of x^2 / 2 is x
        assert_eq!(out.latent.data(), &[0.75]);
    }

    #[test]
    fn zero_steps_reports_the_initial_state() {
        let s = Schedule::straight_line(3).unwrap();
        let f = ZeroVelocity::new(2);
        let x = DenseArray::vector(vec![1.0, 1.0]);
        let out = optimize_latent(&f, &s, &x, &quad(vec![0.0, 0.0]), &LatentOptConfig::new(0.1, 0), &mut stream_rng(0, Stream::Timestep)).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.latent, x);
        assert_eq!(out.final_x0, x);
    }

    #[test]
    fn best_loss_never_exceeds_final() {
        let s = Schedule::vp_linear(0.1, 20.0, 5).unwrap();
        let d = Denoiser::default_toy(&mut stream_rng(4, Stream::Init));
        let x = normal_array(&mut stream_rng(4, Stream::Noise), &[2, 2]);
        let j = quad(vec![1.0, -1.0]);
        let out = optimize_latent(&d, &s, &x, &j, &LatentOptConfig::new(0.3, 20), &mut stream_rng(4, Stream::Timestep)).unwrap();
        assert!(out.best_loss <= out.final_loss());
        assert_eq!(j.value(&out.best_x0).unwrap(), out.best_loss);
    }

    #[test]
    fn intermediate_start_keeps_prefix_fixed() {
        let s = Schedule::vp_linear(0.1, 20.0, 6).unwrap();
        let d = Denoiser::default_toy(&mut stream_rng(5, Stream::Init));
        let x = normal_array(&mut stream_rng(5, Stream::Noise), &[2, 2]);
        let mut cfg = LatentOptConfig::new(0.0, 0);
        cfg.start_step = Some(3);
        let out = optimize_latent(&d, &s, &x, &quad(vec![0.0, 0.0]), &cfg, &mut stream_rng(5, Stream::Timestep)).unwrap();
        assert_eq!(out.initial_latent, state_at_step(&d, &s, &x, 3).unwrap());
        assert_eq!(out.final_x0, state_at_step(&d, &s, &x, 0).unwrap());
    }

    #[test]
    fn unsupported_estimators_rejected() {
        let s = Schedule::straight_line(3).unwrap();
        let mut cfg = LatentOptConfig::new(0.1, 1);
        cfg.estimator = EstimatorSpec::LastStep;
        assert!(cfg.validate(&s).is_err());
        cfg.estimator = EstimatorSpec::Bptt;
        cfg.tau = Some(0.0);
        assert!(cfg.validate(&s).is_err());
        cfg.tau = None;
        cfg.start_step = Some(4);
        assert!(cfg.validate(&s).is_err());
    }

    #[test]
    fn large_fd_request_is_guarded() {
        let s = Schedule::straight_line(2).unwrap();
        let f = ZeroVelocity::new(2);
        let x = DenseArray::zeros(&[FD_DRIVER_LIMIT, 2]);
        let mut cfg = LatentOptConfig::new(0.1, 1);
        cfg.estimator = EstimatorSpec::fd();
        let err = optimize_latent(&f, &s, &x, &quad(vec![0.0, 0.0]), &cfg, &mut stream_rng(0, Stream::Timestep));
        assert!(matches!(err, Err(GradError::TooLarge { .. })));
    }

    #[test]
    fn fd_driver_tracks_bptt_driver() {
        let s = Schedule::vp_linear(0.1, 20.0, 4).unwrap();
        let d = Denoiser::default_toy(&mut stream_rng(6, Stream::Init));
        let x = normal_array(&mut stream_rng(6, Stream::Noise), &[2, 2]);
        let j = quad(vec![1.0, 0.5]);
        let run = |est| {
            let mut cfg = LatentOptConfig::new(0.05, 10);
            cfg.estimator = est;
            optimize_latent(&d, &s, &x, &j, &cfg, &mut stream_rng(6, Stream::Timestep)).unwrap()
        };
        let a = run(EstimatorSpec::Bptt);
        let b = run(EstimatorSpec::fd());
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert!((ra.loss - rb.loss).abs() <= 1e-4);
        }
        assert!(a.latent.max_abs_diff(&b.latent) <= 1e-4);
    }
}
