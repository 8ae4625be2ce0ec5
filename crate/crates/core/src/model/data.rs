use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::array::DenseArray;
use crate::rng::{stream_rng, Stream};

/// Synthetic 2D distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetKind {
    /// `modes` isotropic Gaussians of std `noise` centred on a circle of
    /// radius `radius`, at angles `2 pi (k + 1/2) / modes`.
    GaussianMixtureRing {
        modes: usize,
        radius: f64,
        noise: f64,
    },
    /// Two interleaved half circles with Gaussian jitter.
    TwoMoons { noise: f64 },
    /// `N(0, I)`; the closed-form reference case for training.
    StandardNormal,
}

impl Default for DatasetKind {
    fn default() -> Self {
        DatasetKind::GaussianMixtureRing {
            modes: 8,
            radius: 2.0,
            noise: 0.1,
        }
    }
}

/// A dataset kind together with the seed of its data stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, seed: u64) -> Result<Self, ModelError> {
        let ok = match kind {
            DatasetKind::GaussianMixtureRing {
                modes,
                radius,
                noise,
            } => modes >= 1 && radius.is_finite() && noise >= 0.0 && noise.is_finite(),
            DatasetKind::TwoMoons { noise } => noise >= 0.0 && noise.is_finite(),
            DatasetKind::StandardNormal => true,
        };
        if !ok {
            return Err(ModelError::Spec(format!("invalid dataset parameters {kind:?}")));
        }
        Ok(Self { kind, seed })
    }

    /// Centres of the mixture components (empty for other kinds).
    pub fn mode_centers(&self) -> Vec<[f64; 2]> {
        match self.kind {
            DatasetKind::GaussianMixtureRing { modes, radius, .. } => (0..modes)
                .map(|k| {
                    let a = 2.0 * PI * (k as f64 + 0.5) / modes as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Draw one labelled point. Labels: ring modes in the upper half plane
    /// are 1; the upper moon is 1; for the standard normal, `x > 0` is 1.
    pub fn draw(&self, rng: &mut impl Rng) -> ([f64; 2], u8) {
        match self.kind {
            DatasetKind::GaussianMixtureRing {
                modes,
                radius,
                noise,
            } => {
                let k = rng.random_range(0..modes);
                let a = 2.0 * PI * (k as f64 + 0.5) / modes as f64;
                let ex: f64 = rng.sample(StandardNormal);
                let ey: f64 = rng.sample(StandardNormal);
                let label = u8::from(a.sin() > 0.0);
                ([radius * a.cos() + noise * ex, radius * a.sin() + noise * ey], label)
            }
            DatasetKind::TwoMoons { noise } => {
                let upper = rng.random_bool(0.5);
                let s = rng.random_range(0.0..PI);
                let ex: f64 = rng.sample(StandardNormal);
                let ey: f64 = rng.sample(StandardNormal);
                let (x, y) = if upper {
                    (s.cos(), s.sin())
                } else {
                    (1.0 - s.cos(), 0.5 - s.sin())
                };
                ([x + noise * ex, y + noise * ey], u8::from(upper))
            }
            DatasetKind::StandardNormal => {
                let x: f64 = rng.sample(StandardNormal);
                let y: f64 = rng.sample(StandardNormal);
                ([x, y], u8::from(x > 0.0))
            }
        }
    }

    /// Class of an arbitrary point under the labelling rule of [`draw`]:
    /// the nearest ring mode's label, or `x > 0` for the standard normal.
    /// `None` for the moons, whose classes overlap near the tips.
    ///
    /// [`draw`]: DatasetSpec::draw
    pub fn label_of(&self, p: &[f64]) -> Option<u8> {
        match self.kind {
            DatasetKind::GaussianMixtureRing { .. } => {
                let centers = self.mode_centers();
                let d2 = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                let nearest = centers
                    .iter()
                    .min_by(|a, b| d2(a).total_cmp(&d2(b)))
                    .expect("at least one mode");
                Some(u8::from(nearest[1] > 0.0))
            }
            DatasetKind::TwoMoons { .. } => None,
            DatasetKind::StandardNormal => Some(u8::from(p[0] > 0.0)),
        }
    }

    /// `n` points as an `[n, 2]` array plus labels, drawn from `rng`.
    pub fn sample_with(&self, n: usize, rng: &mut impl Rng) -> (DenseArray, Vec<u8>) {
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (p, l) = self.draw(rng);
            data.extend_from_slice(&p);
            labels.push(l);
        }
        (DenseArray::matrix(n, 2, data).expect("dataset shape"), labels)
    }

    /// `n` points from the dataset's own seeded stream.
    pub fn sample(&self, n: usize) -> (DenseArray, Vec<u8>) {
        self.sample_with(n, &mut stream_rng(self.seed, Stream::Data))
    }
}
