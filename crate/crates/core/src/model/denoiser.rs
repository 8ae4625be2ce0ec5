use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_state_shape as check_state, ModelError, Schedule, VelocityField};
use crate::array::{kernels, DenseArray};
use crate::rng::normal_array;
use crate::tape::{Tape, Var};

/// Width of the time embedding `[t, sin(2 pi t), cos(2 pi t)]`.
pub const TIME_FEATURES: usize = 3;

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    [t, (2.0 * PI * t).sin(), (2.0 * PI * t).cos()]
}

/// Time features tiled to match the leading shape of `x`.
fn time_feature_array(x: &DenseArray, t: f64) -> DenseArray {
    let tf = time_features(t);
    if x.shape().len() == 1 {
        return DenseArray::vector(tf.to_vec());
    }
    let rows = x.rows();
    let data = (0..rows).flat_map(|_| tf).collect();
    DenseArray::matrix(rows, TIME_FEATURES, data).expect("time feature shape")
}

/// What the network output means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// Noise prediction; the velocity is assembled from the schedule.
    #[default]
    Epsilon,
    /// The network output is the velocity itself.
    Velocity,
}

/// Tanh MLP on `[x, time features]`.
///
/// Parameter declaration order: first layer `w_x: [h, d]`, `w_t: [h, 3]`,
/// `b: [h]`; every later layer `w: [out, in]`, `b: [out]`. The first layer is
/// stored split so that the state and the time features enter through two
/// affine maps instead of a concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    data_dim: usize,
    hidden: Vec<usize>,
    params: Vec<DenseArray>,
}

impl Mlp {
    pub fn param_shapes(data_dim: usize, hidden: &[usize]) -> Vec<Vec<usize>> {
        let mut widths = hidden.to_vec();
        widths.push(data_dim);
        let mut shapes = vec![
            vec![widths[0], data_dim],
            vec![widths[0], TIME_FEATURES],
            vec![widths[0]],
        ];
        for pair in widths.windows(2) {
            shapes.push(vec![pair[1], pair[0]]);
            shapes.push(vec![pair[1]]);
        }
        shapes
    }

    /// Gaussian init with variance `1 / fan_in`; the output layer is scaled
    /// down by 10 so the untrained field starts near zero.
    pub fn init(data_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self, ModelError> {
        if data_dim == 0 || hidden.contains(&0) {
            return Err(ModelError::Spec(format!(
                "layer widths must be positive (data_dim {data_dim}, hidden {hidden:?})"
            )));
        }
        let shapes = Self::param_shapes(data_dim, hidden);
        let last_weight = shapes.len() - 2;
        let mut params = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            if shape.len() == 1 {
                params.push(DenseArray::zeros(shape));
                continue;
            }
            let fan_in = if i == 0 || i == 1 {
                data_dim + TIME_FEATURES
            } else {
                shape[1]
            };
            let mut std = (1.0 / fan_in as f64).sqrt();
            if i == last_weight {
                std *= 0.1;
            }
            params.push(normal_array(rng, shape).scale(std));
        }
        Ok(Self {
            data_dim,
            hidden: hidden.to_vec(),
            params,
        })
    }

    pub fn from_params(
        data_dim: usize,
        hidden: &[usize],
        flat: &[f64],
    ) -> Result<Self, ModelError> {
        let shapes = Self::param_shapes(data_dim, hidden);
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                actual: flat.len(),
            });
        }
        let mut mlp = Self {
            data_dim,
            hidden: hidden.to_vec(),
            params: shapes.iter().map(|s| DenseArray::zeros(s)).collect(),
        };
        mlp.set_flat(flat)?;
        Ok(mlp)
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn params(&self) -> &[DenseArray] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(DenseArray::len).sum()
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.len();
            *p = DenseArray::new(p.shape().to_vec(), flat[offset..offset + n].to_vec())
                .expect("param shape");
            offset += n;
        }
        Ok(())
    }

    /// Network output for state `x` (`[d]` or `[rows, d]`) and matching time
    /// features (`[3]` or `[rows, 3]`).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        tf: Var,
    ) -> Result<Var, ModelError> {
        let h = tape.affine(params[0], x, Some(params[2]))?;
        let ht = tape.affine(params[1], tf, None)?;
        let mut h = tape.add(h, ht)?;
        let mut i = 3;
        while i < params.len() {
            h = tape.tanh(h)?;
            h = tape.affine(params[i], h, Some(params[i + 1]))?;
            i += 2;
        }
        Ok(h)
    }

    /// Value-only twin of [`Mlp::forward_on_tape`].
    pub fn forward(&self, x: &DenseArray, tf: &DenseArray) -> DenseArray {
        let rows = x.rows();
        let p = &self.params;
        let affine = |w: &DenseArray, x: &[f64], b: Option<&DenseArray>| {
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            kernels::affine(w.data(), x, b.map(|b| b.data()), rows, inp, out)
        };
        let h = affine(&p[0], x.data(), Some(&p[2]));
        let ht = affine(&p[1], tf.data(), None);
        let mut h: Vec<f64> = h.iter().zip(&ht).map(|(a, b)| a + b).collect();
        let mut i = 3;
        while i < p.len() {
            h = kernels::tanh(&h);
            h = affine(&p[i], &h, Some(&p[i + 1]));
            i += 2;
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-scalar state") = self.data_dim;
        DenseArray::new(shape, h).expect("mlp output shape")
    }
}

/// Trained network plus the meaning of its output.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub mlp: Mlp,
    pub parameterization: Parameterization,
}

impl Denoiser {
    pub fn new(mlp: Mlp, parameterization: Parameterization) -> Self {
        Self {
            mlp,
            parameterization,
        }
    }

    /// Default toy architecture: `2+3 -> 64 -> 64 -> 2`, tanh.
    pub fn default_toy(rng: &mut impl Rng) -> Self {
        Self::new(
            Mlp::init(2, &[64, 64], rng).expect("valid default widths"),
            Parameterization::Epsilon,
        )
    }

    /// Raw network output (noise or velocity prediction).
    pub fn predict(&self, x: &DenseArray, t: f64) -> DenseArray {
        self.mlp.forward(x, &time_feature_array(x, t))
    }

    /// Coefficients `(f(t), g^2(t) / (2 sigma_t))` of the epsilon velocity
    /// `u = f(t) x + g^2(t) / (2 sigma_t) * eps`.
    fn epsilon_coefficients(schedule: &Schedule, t: f64) -> Result<(f64, f64), ModelError> {
        let (_, sigma) = schedule.alpha_sigma(t)?;
        if sigma <= 0.0 {
            return Err(ModelError::SingularTime(t));
        }
        let (f, g2) = schedule.drift_diffusion(t)?;
        let c = g2 / (2.0 * sigma);
        if !f.is_finite() || !c.is_finite() {
            return Err(ModelError::SingularTime(t));
        }
        Ok((f, c))
    }
}

impl VelocityField for Denoiser {
    fn data_dim(&self) -> usize {
        self.mlp.data_dim
    }

    fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    fn param_arrays(&self) -> Vec<DenseArray> {
        self.mlp.params.clone()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        self.mlp.set_flat(flat)
    }

    fn velocity_on_tape(
        &self,
        schedule: &Schedule,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        t: f64,
    ) -> Result<Var, ModelError> {
        check_state(tape.value(x), self.data_dim())?;
        let coeffs = match self.parameterization {
            Parameterization::Epsilon => Some(Self::epsilon_coefficients(schedule, t)?),
            Parameterization::Velocity => None,
        };
        let tf = tape.constant(time_feature_array(tape.value(x), t));
        let out = self.mlp.forward_on_tape(tape, params, x, tf)?;
        match coeffs {
            Some((f, c)) => {
                let fx = tape.scale(x, f)?;
                let ce = tape.scale(out, c)?;
                Ok(tape.add(fx, ce)?)
            }
            None => Ok(out),
        }
    }

    fn velocity(&self, schedule: &Schedule, x: &DenseArray, t: f64) -> Result<DenseArray, ModelError> {
        check_state(x, self.data_dim())?;
        let coeffs = match self.parameterization {
            Parameterization::Epsilon => Some(Self::epsilon_coefficients(schedule, t)?),
            Parameterization::Velocity => None,
        };
        let out = self.predict(x, t);
        Ok(match coeffs {
            Some((f, c)) => x.scale(f).add(&out.scale(c)).expect("same shape"),
            None => out,
        })
    }
}

/// `u(x, t) = a x` with the single parameter `a`. Closed-form oracle model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearVelocity {
    pub a: f64,
    pub dim: usize,
}

impl LinearVelocity {
    pub fn new(a: f64, dim: usize) -> Self {
        Self { a, dim }
    }
}

impl VelocityField for LinearVelocity {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn param_count(&self) -> usize {
        1
    }

    fn param_arrays(&self) -> Vec<DenseArray> {
        vec![DenseArray::scalar(self.a)]
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        match flat {
            [a] => {
                self.a = *a;
                Ok(())
            }
            _ => Err(ModelError::ParamCount {
                expected: 1,
                actual: flat.len(),
            }),
        }
    }

    fn velocity_on_tape(
        &self,
        _schedule: &Schedule,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        _t: f64,
    ) -> Result<Var, ModelError> {
        check_state(tape.value(x), self.dim)?;
        Ok(tape.mul(params[0], x)?)
    }

    fn velocity(&self, _schedule: &Schedule, x: &DenseArray, _t: f64) -> Result<DenseArray, ModelError> {
        check_state(x, self.dim)?;
        Ok(DenseArray::scalar(self.a).mul(x).expect("scalar broadcast"))
    }
}

/// `u == 0`; parameter free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroVelocity {
    pub dim: usize,
}

impl ZeroVelocity {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl VelocityField for ZeroVelocity {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn param_count(&self) -> usize {
        0
    }

    fn param_arrays(&self) -> Vec<DenseArray> {
        Vec::new()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if !flat.is_empty() {
            return Err(ModelError::ParamCount {
                expected: 0,
                actual: flat.len(),
            });
        }
        Ok(())
    }

    fn velocity_on_tape(
        &self,
        _schedule: &Schedule,
        tape: &mut Tape,
        _params: &[Var],
        x: Var,
        _t: f64,
    ) -> Result<Var, ModelError> {
        check_state(tape.value(x), self.dim)?;
        let zeros = DenseArray::zeros(tape.value(x).shape());
        Ok(tape.constant(zeros))
    }

    fn velocity(&self, _schedule: &Schedule, x: &DenseArray, _t: f64) -> Result<DenseArray, ModelError> {
        check_state(x, self.dim)?;
        Ok(DenseArray::zeros(x.shape()))
    }
}
