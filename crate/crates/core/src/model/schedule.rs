use serde::{Deserialize, Serialize};

use super::ModelError;

/// Noise schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `beta(t)` linear from `beta_min` to `beta_max`; variance preserving.
    VpLinear { beta_min: f64, beta_max: f64 },
    /// `alpha = 1 - t`, `sigma = t`.
    StraightLine,
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::VpLinear {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

/// Forward-kernel coefficients plus the discretization count `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self, ModelError> {
        if steps == 0 {
            return Err(ModelError::InvalidSchedule("step count must be at least 1".into()));
        }
        if let ScheduleKind::VpLinear { beta_min, beta_max } = kind {
            if !(beta_min >= 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
                return Err(ModelError::InvalidSchedule(format!(
                    "need 0 <= beta_min <= beta_max, got ({beta_min}, {beta_max})"
                )));
            }
        }
        Ok(Self { kind, steps })
    }

    pub fn vp_linear(beta_min: f64, beta_max: f64, steps: usize) -> Result<Self, ModelError> {
        Self::new(ScheduleKind::VpLinear { beta_min, beta_max }, steps)
    }

    pub fn straight_line(steps: usize) -> Result<Self, ModelError> {
        Self::new(ScheduleKind::StraightLine, steps)
    }

    /// Same family with a different step count.
    pub fn with_steps(&self, steps: usize) -> Result<Self, ModelError> {
        Self::new(self.kind, steps)
    }

    /// Step length `1 / N`.
    pub fn step_size(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Time of grid index `n`, i.e. `n / N`.
    pub fn time(&self, n: usize) -> f64 {
        n as f64 / self.steps as f64
    }

    fn check_time(t: f64) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(ModelError::TimeOutOfRange(t));
        }
        Ok(())
    }

    /// `beta(t)` for the VP family; `g^2(t)` in general.
    pub fn beta(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpLinear { beta_min, beta_max } => beta_min + t * (beta_max - beta_min),
            ScheduleKind::StraightLine => 2.0 * t / (1.0 - t),
        }
    }

    fn log_alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpLinear { beta_min, beta_max } => {
                -0.5 * (beta_min * t + 0.5 * (beta_max - beta_min) * t * t)
            }
            ScheduleKind::StraightLine => (1.0 - t).ln(),
        }
    }

    /// Kernel coefficients `(alpha_t, sigma_t)` of `q(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I)`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64), ModelError> {
        Self::check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::VpLinear { .. } => {
                let la = self.log_alpha(t);
                // sigma^2 = 1 - alpha^2 = -expm1(2 log alpha), accurate near t = 0
                (la.exp(), (-(2.0 * la).exp_m1()).sqrt())
            }
            ScheduleKind::StraightLine => (1.0 - t, t),
        })
    }

    /// Drift `f(t) = d log(alpha)/dt` and squared diffusion
    /// `g^2(t) = d(sigma^2)/dt - 2 f(t) sigma^2`.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64), ModelError> {
        Self::check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::VpLinear { .. } => {
                let b = self.beta(t);
                (-0.5 * b, b)
            }
            ScheduleKind::StraightLine => (-1.0 / (1.0 - t), 2.0 * t / (1.0 - t)),
        })
    }
}
