use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::denoiser::TIME_FEATURES;
use super::{
    time_features, DatasetKind, DatasetSpec, Denoiser, Mlp, ModelError, Parameterization,
    Schedule, ScheduleKind, VelocityField,
};
use crate::array::DenseArray;
use crate::opt::{Adam, AdamConfig};
use crate::rng::{stream_rng, Stream};
use crate::tape::{Tape, Var};

/// Denoising score-matching training setup. Only `dataset` is required
/// when deserializing; every other key falls back to [`Default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    #[serde(default)]
    pub schedule: ScheduleKind,
    /// Sampling step count stored with the checkpoint.
    #[serde(default = "defaults::sampling_steps")]
    pub sampling_steps: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub parameterization: Parameterization,
    #[serde(default = "defaults::train_steps")]
    pub train_steps: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::t_min")]
    pub t_min: f64,
    #[serde(default)]
    pub adam: AdamConfig,
}

mod defaults {
    pub fn sampling_steps() -> usize {
        50
    }

    pub fn hidden() -> Vec<usize> {
        vec![64, 64]
    }

    pub fn train_steps() -> usize {
        6000
    }

    pub fn batch_size() -> usize {
        256
    }

    pub fn learning_rate() -> f64 {
        2e-3
    }

    pub fn t_min() -> f64 {
        1e-3
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::default(),
            schedule: ScheduleKind::default(),
            sampling_steps: defaults::sampling_steps(),
            hidden: defaults::hidden(),
            parameterization: Parameterization::default(),
            train_steps: defaults::train_steps(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            t_min: defaults::t_min(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::Spec("batch_size must be at least 1".into()));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(ModelError::Spec(format!("t_min must lie in (0, 1), got {}", self.t_min)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Spec(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Schedule::new(self.schedule, self.sampling_steps)?;
        DatasetSpec::new(self.dataset, 0)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub denoiser: Denoiser,
    pub schedule: Schedule,
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
}

/// A fixed draw of diffusion times and noises for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmDraw {
    pub times: Vec<f64>,
    /// `[rows, d]`.
    pub noise: DenseArray,
}

impl DsmDraw {
    pub fn sample(rows: usize, dim: usize, t_min: f64, rng: &mut impl Rng) -> Self {
        let times = (0..rows).map(|_| rng.random_range(t_min..1.0)).collect();
        let noise = (0..rows * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            times,
            noise: DenseArray::matrix(rows, dim, noise).expect("noise shape"),
        }
    }
}

/// Noisy inputs, time features and regression targets for one batch.
fn dsm_batch(
    denoiser: &Denoiser,
    schedule: &Schedule,
    x0: &DenseArray,
    draw: &DsmDraw,
) -> Result<(DenseArray, DenseArray, DenseArray), ModelError> {
    let rows = x0.rows();
    let d = x0.last_dim();
    if rows == 0 || x0.shape().len() != 2 || d != denoiser.data_dim() {
        return Err(ModelError::StateShape {
            shape: x0.shape().to_vec(),
            dim: denoiser.data_dim(),
        });
    }
    if draw.times.len() != rows || draw.noise.shape() != x0.shape() {
        return Err(ModelError::Spec("noise draw does not match the batch".into()));
    }
    let mut xt = Vec::with_capacity(rows * d);
    let mut tf = Vec::with_capacity(rows * TIME_FEATURES);
    let mut target = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let t = draw.times[r];
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let (f, g2) = schedule.drift_diffusion(t)?;
        let (x, e) = (x0.row(r), draw.noise.row(r));
        for k in 0..d {
            xt.push(alpha * x[k] + sigma * e[k]);
        }
        tf.extend_from_slice(&time_features(t));
        match denoiser.parameterization {
            Parameterization::Epsilon => target.extend_from_slice(e),
            Parameterization::Velocity => {
                // d/dt (alpha x0 + sigma eps)
                let da = f * alpha;
                let ds = (g2 + 2.0 * f * sigma * sigma) / (2.0 * sigma);
                for k in 0..d {
                    target.push(da * x[k] + ds * e[k]);
                }
            }
        }
    }
    Ok((
        DenseArray::matrix(rows, d, xt).expect("xt shape"),
        DenseArray::matrix(rows, TIME_FEATURES, tf).expect("tf shape"),
        DenseArray::matrix(rows, d, target).expect("target shape"),
    ))
}

/// Batch-mean squared error of the network output against the regression
/// target (the noise, for epsilon models) on a fixed draw.
pub fn dsm_loss_with(
    denoiser: &Denoiser,
    schedule: &Schedule,
    x0: &DenseArray,
    draw: &DsmDraw,
) -> Result<f64, ModelError> {
    let (xt, tf, target) = dsm_batch(denoiser, schedule, x0, draw)?;
    let pred = denoiser.mlp.forward(&xt, &tf);
    let diff = pred.sub(&target).expect("same shape");
    Ok(diff.squared_norm() * (1.0 / x0.rows() as f64))
}

/// [`dsm_loss_with`] with `t ~ U(t_min, 1)` and `eps ~ N(0, I)` drawn from `rng`.
pub fn dsm_loss(
    denoiser: &Denoiser,
    schedule: &Schedule,
    x0: &DenseArray,
    t_min: f64,
    rng: &mut impl Rng,
) -> Result<f64, ModelError> {
    let draw = DsmDraw::sample(x0.rows(), x0.last_dim(), t_min, rng);
    dsm_loss_with(denoiser, schedule, x0, &draw)
}

/// Record the loss of [`dsm_loss_with`] on `tape`.
pub(crate) fn dsm_loss_on_tape(
    denoiser: &Denoiser,
    schedule: &Schedule,
    tape: &mut Tape,
    params: &[Var],
    x0: &DenseArray,
    draw: &DsmDraw,
) -> Result<Var, ModelError> {
    let (xt, tf, target) = dsm_batch(denoiser, schedule, x0, draw)?;
    let xt = tape.constant(xt);
    let tf = tape.constant(tf);
    let target = tape.constant(target);
    let pred = denoiser.mlp.forward_on_tape(tape, params, xt, tf)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.squared_norm(diff)?;
    Ok(tape.scale(sq, 1.0 / x0.rows() as f64)?)
}

/// Train a fresh denoiser. Parameters come from the `Init` stream, data from
/// `Data`, and the `(t, eps)` draws from `Training`.
pub fn train_denoiser(config: &TrainConfig, seed: u64) -> Result<TrainOutcome, ModelError> {
    train_denoiser_with(config, seed, |_, _| {})
}

/// [`train_denoiser`] with a callback receiving `(step, loss)`.
pub fn train_denoiser_with(
    config: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    let schedule = Schedule::new(config.schedule, config.sampling_steps)?;
    let dataset = DatasetSpec::new(config.dataset, seed)?;
    let mlp = Mlp::init(2, &config.hidden, &mut stream_rng(seed, Stream::Init))?;
    let mut denoiser = Denoiser::new(mlp, config.parameterization);
    let mut data_rng = stream_rng(seed, Stream::Data);
    let mut train_rng = stream_rng(seed, Stream::Training);
    let mut adam = Adam::new(denoiser.param_count(), config.adam);
    let mut flat = denoiser.flat_params();
    let mut losses = Vec::with_capacity(config.train_steps);
    for step in 0..config.train_steps {
        let (x0, _) = dataset.sample_with(config.batch_size, &mut data_rng);
        let draw = DsmDraw::sample(config.batch_size, 2, config.t_min, &mut train_rng);
        let mut tape = Tape::new();
        let params = denoiser.bind_params(&mut tape);
        let loss = dsm_loss_on_tape(&denoiser, &schedule, &mut tape, &params, &x0, &draw)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(ModelError::Diverged { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let g = grads.flatten(&params);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Diverged { step, loss: value });
        }
        adam.step(&mut flat, &g, config.learning_rate);
        denoiser.set_flat_params(&flat)?;
        losses.push(value);
        on_step(step, value);
    }
    Ok(TrainOutcome {
        denoiser,
        schedule,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            dataset: DatasetKind::StandardNormal,
            hidden: vec![8],
            train_steps: 20,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    fn zero_denoiser(hidden: &[usize]) -> Denoiser {
        let mlp = Mlp::init(2, hidden, &mut stream_rng(0, Stream::Init)).unwrap();
        let mut d = Denoiser::new(mlp, Parameterization::Epsilon);
        let n = d.param_count();
        d.set_flat_params(&vec![0.0; n]).unwrap();
        d
    }

    #[test]
    fn zero_network_loss_is_noise_energy() {
        let d = zero_denoiser(&[4]);
        let s = Schedule::vp_linear(0.1, 20.0, 10).unwrap();
        let x0 = DenseArray::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let draw = DsmDraw {
            times: vec![0.4],
            noise: DenseArray::matrix(1, 2, vec![1.0, -1.0]).unwrap(),
        };
        assert!((dsm_loss_with(&d, &s, &x0, &draw).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        // Single affine layer with only a bias: predicts the bias everywhere.
        let mut d = zero_denoiser(&[]);
        let n = d.param_count();
        let mut flat = vec![0.0; n];
        flat[n - 2] = 0.5;
        flat[n - 1] = -1.5;
        d.set_flat_params(&flat).unwrap();
        let s = Schedule::vp_linear(0.1, 20.0, 10).unwrap();
        let x0 = DenseArray::matrix(1, 2, vec![2.0, 1.0]).unwrap();
        let draw = DsmDraw {
            times: vec![0.8],
            noise: DenseArray::matrix(1, 2, vec![0.5, -1.5]).unwrap(),
        };
        assert_eq!(dsm_loss_with(&d, &s, &x0, &draw).unwrap(), 0.0);
    }

    #[test]
    fn tape_loss_gradient_matches_finite_differences() {
        let d = Denoiser::new(
            Mlp::init(2, &[5], &mut stream_rng(4, Stream::Init)).unwrap(),
            Parameterization::Epsilon,
        );
        let s = Schedule::vp_linear(0.1, 20.0, 10).unwrap();
        let mut rng = stream_rng(4, Stream::Data);
        let (x0, _) = DatasetSpec::new(DatasetKind::default(), 4).unwrap().sample_with(6, &mut rng);
        let draw = DsmDraw::sample(6, 2, 1e-3, &mut rng);
        let mut tape = Tape::new();
        let p = d.bind_params(&mut tape);
        let loss = dsm_loss_on_tape(&d, &s, &mut tape, &p, &x0, &draw).unwrap();
        assert_eq!(tape.value(loss).item(), dsm_loss_with(&d, &s, &x0, &draw).unwrap());
        let g = tape.backward(loss).unwrap().flatten(&p);
        let flat = d.flat_params();
        let h = 1e-5;
        let mut fd = Vec::with_capacity(flat.len());
        for j in 0..flat.len() {
            let eval = |delta: f64| {
                let mut q = flat.clone();
                q[j] += delta;
                let mut e = d.clone();
                e.set_flat_params(&q).unwrap();
                dsm_loss_with(&e, &s, &x0, &draw).unwrap()
            };
            fd.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-5, "relative error {}", num / den);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_denoiser(&tiny(), 7).unwrap();
        let b = train_denoiser(&tiny(), 7).unwrap();
        assert_eq!(a.denoiser, b.denoiser);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny()
        };
        let out = train_denoiser(&cfg, 3).unwrap();
        let init = Mlp::init(2, &cfg.hidden, &mut stream_rng(3, Stream::Init)).unwrap();
        assert_eq!(out.denoiser.mlp, init);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            learning_rate: 1e300,
            train_steps: 50,
            ..tiny()
        };
        assert!(matches!(
            train_denoiser(&cfg, 1),
            Err(ModelError::Diverged { .. })
        ));
    }
}
