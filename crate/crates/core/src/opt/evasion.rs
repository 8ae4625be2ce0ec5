use rand::Rng;
use serde::{Deserialize, Serialize};

use super::latent::{optimize_latent, LatentOptConfig, LatentOptimizer};
use super::{LogisticClassifier, Objective};
use crate::array::DenseArray;
use crate::grad::{EstimatorSpec, GradError};
use crate::model::{DatasetSpec, Schedule, VelocityField};
use crate::sampler::sample_from;

/// Per-sample classifier evasion inside an infinity-norm ball around each
/// initial latent `x_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvasionConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: LatentOptimizer,
    #[serde(default = "EstimatorSpec::sdo")]
    pub estimator: EstimatorSpec,
}

fn default_tau() -> f64 {
    0.1
}

fn default_steps() -> usize {
    30
}

fn default_lr() -> f64 {
    0.1
}

impl Default for EvasionConfig {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            steps: default_steps(),
            learning_rate: default_lr(),
            optimizer: LatentOptimizer::GradientDescent,
            estimator: EstimatorSpec::sdo(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvasionSample {
    pub index: usize,
    /// Class of the initial sample under the dataset's labelling rule.
    pub label: u8,
    pub initially_correct: bool,
    pub flipped: bool,
    /// Largest `|x - x_N|_inf` over all iterates.
    pub max_deviation: f64,
    pub initial_x0: Vec<f64>,
    pub final_x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvasionReport {
    pub samples: Vec<EvasionSample>,
    pub initially_correct: usize,
    pub flipped: usize,
    /// `flipped / initially_correct`; 0 when nothing was correct.
    pub flip_rate: f64,
    /// Every iterate of every sample stayed in the ball.
    pub constraint_held: bool,
}

/// Push each row of `noise` (taken as `x_N`) so the frozen classifier
/// misclassifies its sample. Only initially correct samples are optimized.
pub fn run_evasion<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    classifier: &LogisticClassifier,
    dataset: &DatasetSpec,
    noise: &DenseArray,
    config: &EvasionConfig,
    rng: &mut impl Rng,
) -> Result<EvasionReport, GradError> {
    let dim = field.data_dim();
    let x0 = sample_from(field, schedule, noise, schedule.steps)?.swap_remove(0);
    let mut samples = Vec::with_capacity(noise.rows());
    for r in 0..noise.rows() {
        let start = x0.row(r);
        let label = dataset.label_of(start).ok_or_else(|| {
            GradError::Request("evasion needs a dataset with a point labelling rule".into())
        })?;
        let initially_correct = classifier.predict(start) == label;
        let mut sample = EvasionSample {
            index: r,
            label,
            initially_correct,
            flipped: false,
            max_deviation: 0.0,
            initial_x0: start.to_vec(),
            final_x0: start.to_vec(),
        };
        if initially_correct {
            let objective = Objective::ClassifierMargin {
                classifier: classifier.clone(),
                label,
                evade: true,
            };
            let mut cfg = LatentOptConfig::new(config.learning_rate, config.steps);
            cfg.estimator = config.estimator;
            cfg.optimizer = config.optimizer;
            cfg.tau = Some(config.tau);
            cfg.track_best = false;
            let x_n = DenseArray::new(vec![1, dim], noise.row(r).to_vec()).expect("row shape");
            let out = optimize_latent(field, schedule, &x_n, &objective, &cfg, rng)?;
            sample.flipped = classifier.predict(out.final_x0.data()) != label;
            sample.max_deviation = out.max_deviation;
            sample.final_x0 = out.final_x0.into_data();
        }
        samples.push(sample);
    }
    let initially_correct = samples.iter().filter(|s| s.initially_correct).count();
    let flipped = samples.iter().filter(|s| s.flipped).count();
    Ok(EvasionReport {
        initially_correct,
        flipped,
        flip_rate: if initially_correct == 0 {
            0.0
        } else {
            flipped as f64 / initially_correct as f64
        },
        constraint_held: samples.iter().all(|s| s.max_deviation <= config.tau),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DatasetKind, ZeroVelocity};
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn identity_map_flips_points_near_the_boundary() {
        // With u == 0 the sample is the latent itself, so a point within
        // tau of the decision line flips and a far one cannot.
        let s = Schedule::straight_line(3).unwrap();
        let f = ZeroVelocity::new(2);
        let clf = LogisticClassifier { w: vec![1.0, 0.0], b: 0.0 };
        let ds = DatasetSpec::new(DatasetKind::StandardNormal, 0).unwrap();
        let noise = DenseArray::matrix(3, 2, vec![0.05, 1.0, 2.0, 0.0, -0.5, 0.0]).unwrap();
        let report = run_evasion(&f, &s, &clf, &ds, &noise, &EvasionConfig::default(), &mut stream_rng(0, Stream::Timestep)).unwrap();
        assert_eq!(report.initially_correct, 3);
        let flips: Vec<bool> = report.samples.iter().map(|s| s.flipped).collect();
        assert_eq!(flips, vec![true, false, false]);
        assert!(report.constraint_held);
        assert!((report.flip_rate - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn misclassified_samples_are_skipped() {
        let s = Schedule::straight_line(2).unwrap();
        let f = ZeroVelocity::new(2);
        let clf = LogisticClassifier { w: vec![-1.0, 0.0], b: 0.0 };
        let ds = DatasetSpec::new(DatasetKind::StandardNormal, 0).unwrap();
        let noise = DenseArray::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let report = run_evasion(&f, &s, &clf, &ds, &noise, &EvasionConfig::default(), &mut stream_rng(0, Stream::Timestep)).unwrap();
        assert_eq!(report.initially_correct, 0);
        assert_eq!(report.flip_rate, 0.0);
        assert_eq!(report.samples[0].max_deviation, 0.0);
    }
}
