use serde::{Deserialize, Serialize};

use super::objective::sigmoid;
use crate::model::DatasetSpec;

/// `p(label = 1 | x) = sigmoid(w . x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticClassifier {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LogisticClassifier {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.logit(x) > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub samples: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            steps: 500,
            learning_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    pub classifier: LogisticClassifier,
    /// Training accuracy.
    pub accuracy: f64,
    /// Accuracy reached the 95% floor.
    pub meets_floor: bool,
}

pub const ACCURACY_FLOOR: f64 = 0.95;

/// Full-batch gradient descent on the mean cross-entropy over
/// `config.samples` labelled points from `dataset`, starting from zero.
pub fn train_toy_classifier(dataset: &DatasetSpec, config: &ClassifierConfig) -> ClassifierReport {
    let (x, labels) = dataset.sample(config.samples);
    let d = x.last_dim();
    let n = x.rows();
    let mut clf = LogisticClassifier {
        w: vec![0.0; d],
        b: 0.0,
    };
    let inv = 1.0 / n as f64;
    for _ in 0..config.steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = x.row(r);
            let dz = clf.probability(row) - f64::from(label);
            for k in 0..d {
                gw[k] += dz * row[k];
            }
            gb += dz;
        }
        for k in 0..d {
            clf.w[k] -= config.learning_rate * gw[k] * inv;
        }
        clf.b -= config.learning_rate * gb * inv;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &label)| clf.predict(x.row(*r)) == label)
        .count();
    let accuracy = correct as f64 * inv;
    ClassifierReport {
        classifier: clf,
        accuracy,
        meets_floor: accuracy >= ACCURACY_FLOOR,
    }
}
