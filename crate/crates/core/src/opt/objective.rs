use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::classifier::LogisticClassifier;
use crate::array::DenseArray;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("objective expects samples of dimension {expected}, got shape {shape:?}")]
    Dim { expected: usize, shape: Vec<usize> },
    #[error("{kind} needs a batch of at least {min} samples, got shape {shape:?}")]
    NeedsBatch {
        kind: &'static str,
        min: usize,
        shape: Vec<usize>,
    },
    #[error("invalid objective: {0}")]
    Invalid(String),
}

/// Scalar objective of a generated sample (`[d]`) or batch (`[rows, d]`).
///
/// Per-sample objectives are averaged over rows. Every objective provides
/// its exact gradient with respect to `x_0`; the gradient engines pull that
/// cotangent back through the sampling chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Objective {
    /// `1/2 |x_0 - target|^2`.
    QuadraticTarget { target: Vec<f64> },
    /// `|mean - mean_ref|^2 + |M - M_ref|_F^2` with `M` the second-moment
    /// matrix `(1/B) X^T X` of the batch.
    MomentMatch { reference: Vec<Vec<f64>> },
    /// `-exp(-|x_0 - center|^2 / (2 width^2))`.
    RbfReward { center: Vec<f64>, width: f64 },
    /// Cross-entropy of a frozen logistic classifier toward `label`, or its
    /// negative when `evade` is set.
    ClassifierMargin {
        classifier: LogisticClassifier,
        label: u8,
        evade: bool,
    },
    /// `weight * metric + (1 - weight) * |x_0 - reference|`. `reference` is
    /// one point (shared by all rows) or one point per row.
    Composite {
        metric: Box<Objective>,
        reference: Vec<f64>,
        weight: f64,
    },
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn second_moments(x: &DenseArray) -> (Vec<f64>, Vec<f64>) {
    let (b, d) = (x.rows(), x.last_dim());
    let mut mean = vec![0.0; d];
    let mut m = vec![0.0; d * d];
    for r in 0..b {
        let row = x.row(r);
        for j in 0..d {
            mean[j] += row[j];
            for k in 0..d {
                m[j * d + k] += row[j] * row[k];
            }
        }
    }
    let inv = 1.0 / b as f64;
    (mean.iter().map(|v| v * inv).collect(), m.iter().map(|v| v * inv).collect())
}

impl Objective {
    /// Sample dimension the objective expects, if it fixes one.
    pub fn data_dim(&self) -> Option<usize> {
        match self {
            Objective::QuadraticTarget { target } => Some(target.len()),
            Objective::MomentMatch { reference } => reference.first().map(Vec::len),
            Objective::RbfReward { center, .. } => Some(center.len()),
            Objective::ClassifierMargin { classifier, .. } => Some(classifier.w.len()),
            Objective::Composite { metric, .. } => metric.data_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        match self {
            Objective::QuadraticTarget { target } if target.is_empty() => {
                Err(ObjectiveError::Invalid("empty quadratic target".into()))
            }
            Objective::MomentMatch { reference } => {
                let d = reference.first().map(Vec::len).unwrap_or(0);
                if reference.len() < 2 || d == 0 || reference.iter().any(|r| r.len() != d) {
                    return Err(ObjectiveError::Invalid(
                        "moment-match reference needs at least two equal-length rows".into(),
                    ));
                }
                Ok(())
            }
            Objective::RbfReward { width, .. } if !(*width > 0.0) => {
                Err(ObjectiveError::Invalid(format!("rbf width must be positive, got {width}")))
            }
            Objective::ClassifierMargin { label, .. } if *label > 1 => {
                Err(ObjectiveError::Invalid(format!("label must be 0 or 1, got {label}")))
            }
            Objective::Composite { metric, weight, .. } => {
                if !(0.0..=1.0).contains(weight) {
                    return Err(ObjectiveError::Invalid(format!(
                        "composite weight must lie in [0, 1], got {weight}"
                    )));
                }
                metric.validate()
            }
            _ => Ok(()),
        }
    }

    fn check(&self, x: &DenseArray) -> Result<(), ObjectiveError> {
        let dim_ok = match self.data_dim() {
            Some(d) => x.last_dim() == d,
            None => true,
        };
        if x.shape().is_empty() || x.shape().len() > 2 || !dim_ok {
            return Err(ObjectiveError::Dim {
                expected: self.data_dim().unwrap_or(0),
                shape: x.shape().to_vec(),
            });
        }
        if let Objective::MomentMatch { .. } = self {
            if x.shape().len() != 2 || x.rows() < 2 {
                return Err(ObjectiveError::NeedsBatch {
                    kind: "moment-match",
                    min: 2,
                    shape: x.shape().to_vec(),
                });
            }
        }
        if let Objective::Composite { reference, .. } = self {
            let d = x.last_dim();
            if reference.len() != d && reference.len() != x.len() {
                return Err(ObjectiveError::Invalid(format!(
                    "composite reference has {} entries; need {d} or {}",
                    reference.len(),
                    x.len()
                )));
            }
        }
        Ok(())
    }

    /// Objective value.
    pub fn value(&self, x: &DenseArray) -> Result<f64, ObjectiveError> {
        Ok(self.value_and_gradient(x)?.0)
    }

    /// Gradient with respect to `x_0`, shaped like `x`.
    pub fn gradient(&self, x: &DenseArray) -> Result<DenseArray, ObjectiveError> {
        Ok(self.value_and_gradient(x)?.1)
    }

    pub fn value_and_gradient(&self, x: &DenseArray) -> Result<(f64, DenseArray), ObjectiveError> {
        self.check(x)?;
        let (rows, d) = (x.rows(), x.last_dim());
        let inv = 1.0 / rows as f64;
        let mut grad = vec![0.0; x.len()];
        let value = match self {
            Objective::MomentMatch { reference } => {
                let flat: Vec<f64> = reference.iter().flatten().copied().collect();
                let r = DenseArray::matrix(reference.len(), d, flat).expect("reference shape");
                let (mean, m) = second_moments(x);
                let (mean_r, m_r) = second_moments(&r);
                let dm: Vec<f64> = mean.iter().zip(&mean_r).map(|(a, b)| a - b).collect();
                let dd: Vec<f64> = m.iter().zip(&m_r).map(|(a, b)| a - b).collect();
                for row in 0..rows {
                    let xr = x.row(row);
                    for l in 0..d {
                        let mut g = 2.0 * dm[l] * inv;
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += dd[l * d + k] * xr[k];
                        }
                        g += 4.0 * inv * acc;
                        grad[row * d + l] = g;
                    }
                }
                dm.iter().map(|v| v * v).sum::<f64>() + dd.iter().map(|v| v * v).sum::<f64>()
            }
            Objective::Composite {
                metric,
                reference,
                weight,
            } => {
                let (mv, mg) = metric.value_and_gradient(x)?;
                let mut fid = 0.0;
                for r in 0..rows {
                    let xr = x.row(r);
                    let rr = if reference.len() == d {
                        &reference[..]
                    } else {
                        &reference[r * d..(r + 1) * d]
                    };
                    let norm = xr
                        .iter()
                        .zip(rr)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    fid += norm;
                    for k in 0..d {
                        let g = if norm > 0.0 { (xr[k] - rr[k]) / norm } else { 0.0 };
                        grad[r * d + k] = weight * mg.data()[r * d + k] + (1.0 - weight) * g * inv;
                    }
                }
                weight * mv + (1.0 - weight) * fid * inv
            }
            _ => {
                let mut total = 0.0;
                for r in 0..rows {
                    let (v, g) = self.per_sample(x.row(r));
                    total += v;
                    for k in 0..d {
                        grad[r * d + k] = g[k] * inv;
                    }
                }
                total * inv
            }
        };
        Ok((
            value,
            DenseArray::new(x.shape().to_vec(), grad).expect("gradient shape"),
        ))
    }

    fn per_sample(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self {
            Objective::QuadraticTarget { target } => {
                let diff: Vec<f64> = x.iter().zip(target).map(|(a, b)| a - b).collect();
                (0.5 * diff.iter().map(|v| v * v).sum::<f64>(), diff)
            }
            Objective::RbfReward { center, width } => {
                let diff: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
                let s2 = width * width;
                let e = (-diff.iter().map(|v| v * v).sum::<f64>() / (2.0 * s2)).exp();
                (-e, diff.iter().map(|v| e * v / s2).collect())
            }
            Objective::ClassifierMargin {
                classifier,
                label,
                evade,
            } => {
                let z = classifier.logit(x);
                let y = f64::from(*label);
                let ce = if *label == 1 { softplus(-z) } else { softplus(z) };
                let dz = sigmoid(z) - y;
                let sign = if *evade { -1.0 } else { 1.0 };
                (sign * ce, classifier.w.iter().map(|w| sign * dz * w).collect())
            }
            Objective::MomentMatch { .. } | Objective::Composite { .. } => {
                unreachable!("batch-level objectives are handled in value_and_gradient")
            }
        }
    }
}
