use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Objective};
use crate::array::DenseArray;
use crate::grad::{compute_gradient, EstimatorSpec, GradError, GradTarget, Problem};
use crate::model::{Schedule, VelocityField};
use crate::rng::{normal_array, stream_rng, Stream};
use crate::sampler::{csv_io, format_f64, sample_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "EstimatorSpec::sdo")]
    pub estimator: EstimatorSpec,
    /// Fresh noises per optimizer step.
    pub batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Rescale gradients whose norm exceeds this.
    #[serde(default)]
    pub clip: Option<f64>,
    /// Held-out evaluation every this many steps (and at the end).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Size of the fixed held-out noise set.
    #[serde(default = "default_held_out")]
    pub held_out: usize,
}

fn default_eval_every() -> usize {
    25
}

fn default_held_out() -> usize {
    256
}

impl FinetuneConfig {
    pub fn new(estimator: EstimatorSpec, batch: usize, steps: usize, learning_rate: f64) -> Self {
        Self {
            estimator,
            batch,
            steps,
            learning_rate,
            adam: AdamConfig::default(),
            clip: None,
            eval_every: default_eval_every(),
            held_out: default_held_out(),
        }
    }

    pub fn validate(&self) -> Result<(), GradError> {
        let bad = |m: String| Err(GradError::Request(m));
        match self.estimator {
            EstimatorSpec::Sdo { .. }
            | EstimatorSpec::LastStep
            | EstimatorSpec::Truncated { .. }
            | EstimatorSpec::Bptt => {}
            other => {
                return bad(format!(
                    "{other} is an oracle and too costly for fine-tuning; use sdo, last-step, truncated-k or bptt"
                ))
            }
        }
        if self.batch == 0 || self.held_out == 0 || self.eval_every == 0 {
            return bad("batch, held_out and eval_every must be positive".into());
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return bad(format!("clip threshold must be positive, got {c}"));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneRecord {
    pub step: usize,
    /// Mean reward `-J` on this step's training batch.
    pub reward: f64,
    pub grad_l2: f64,
    /// Step `i'` or window `k` the estimator used.
    pub selected_step: Option<usize>,
    /// Non-finite gradient; no update was applied.
    pub skipped: bool,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeldOutRecord {
    /// Optimizer steps taken before the evaluation.
    pub step: usize,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<V> {
    pub field: V,
    pub estimator: EstimatorSpec,
    pub history: Vec<FinetuneRecord>,
    pub held_out: Vec<HeldOutRecord>,
}

impl<V> FinetuneOutcome<V> {
    pub fn initial_held_out(&self) -> f64 {
        self.held_out[0].reward
    }

    pub fn final_held_out(&self) -> f64 {
        self.held_out.last().expect("held-out history").reward
    }

    pub fn skipped_steps(&self) -> usize {
        self.history.iter().filter(|r| r.skipped).count()
    }

    /// Run log with columns `step,loss_or_reward,grad_l2,estimator,elapsed_s`.
    pub fn write_log_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss_or_reward", "grad_l2", "estimator", "elapsed_s"])
            .map_err(csv_io)?;
        let name = self.estimator.to_string();
        for r in &self.history {
            w.write_record([
                r.step.to_string(),
                format_f64(r.reward),
                format_f64(r.grad_l2),
                name.clone(),
                format_f64(r.elapsed_s),
            ])
            .map_err(csv_io)?;
        }
        w.flush()
    }

    /// Held-out curve with columns `step,held_out_reward`.
    pub fn write_held_out_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "held_out_reward"]).map_err(csv_io)?;
        for r in &self.held_out {
            w.write_record([r.step.to_string(), format_f64(r.reward)]).map_err(csv_io)?;
        }
        w.flush()
    }
}

/// Mean reward `-J(x_0)` over a noise batch.
pub fn mean_reward<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    objective: &Objective,
    noise: &DenseArray,
) -> Result<f64, GradError> {
    let x0 = sample_from(field, schedule, noise, schedule.steps)?.swap_remove(0);
    Ok(-objective.value(&x0)?)
}

/// Fine-tune the velocity field's parameters to maximize `-J`. Training
/// noises come from the noise stream, `i'` draws from the timestep stream
/// and the held-out set from the held-out stream of `seed`.
pub fn finetune_params<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    objective: &Objective,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome<V>, GradError> {
    config.validate()?;
    let dim = field.data_dim();
    let held_out_noise = normal_array(&mut stream_rng(seed, Stream::HeldOut), &[config.held_out, dim]);
    let mut noise_rng = stream_rng(seed, Stream::Noise);
    let mut step_rng = stream_rng(seed, Stream::Timestep);

    let mut field = field.clone();
    let mut params = field.flat_params();
    let mut adam = Adam::new(params.len(), config.adam);
    let mut history = Vec::with_capacity(config.steps);
    let mut held_out = vec![HeldOutRecord {
        step: 0,
        reward: mean_reward(&field, schedule, objective, &held_out_noise)?,
    }];
    let started = Instant::now();

    for step in 0..config.steps {
        let noise = normal_array(&mut noise_rng, &[config.batch, dim]);
        let problem = Problem::new(&field, schedule, objective, &noise).with_seed(seed);
        let report = compute_gradient(&problem, GradTarget::Parameters, &config.estimator, &mut step_rng)?;
        let mut grad = report.gradient.into_data();
        let skipped = !report.finite;
        if !skipped {
            if let Some(c) = config.clip {
                if report.l2_norm > c {
                    let s = c / report.l2_norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            adam.step(&mut params, &grad, config.learning_rate);
            field.set_flat_params(&params)?;
        }
        history.push(FinetuneRecord {
            step,
            reward: -report.objective_value,
            grad_l2: report.l2_norm,
            selected_step: report.selected_step,
            skipped,
            elapsed_s: started.elapsed().as_secs_f64(),
        });
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            held_out.push(HeldOutRecord {
                step: done,
                reward: mean_reward(&field, schedule, objective, &held_out_noise)?,
            });
        }
    }

    Ok(FinetuneOutcome {
        field,
        estimator: config.estimator,
        history,
        held_out,
    })
}
