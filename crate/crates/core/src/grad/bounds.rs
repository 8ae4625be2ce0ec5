use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::oracle::stacked_system;
use super::{grad_bptt, grad_sdo_latent, grad_sdo_params, GradError, GradTarget, Problem};
use super::TimestepSelection;
use crate::model::VelocityField;

/// Contraction constants of the stacked fixed-point map and the gradient
/// error bounds they imply, next to the measured errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    /// Largest singular value of `dF/ds` (state `x_0 .. x_{N-1}`).
    pub lambda_hat: f64,
    /// `|dJ/ds|`.
    pub rho_hat: f64,
    /// Largest singular value of `dF/dtheta`.
    pub l_f_hat: f64,
    /// Largest singular value of `dF/dx_N`.
    pub dfdx_norm: f64,
    /// `|latent BPTT - latent one-step|` at `m = N`.
    pub measured_error_latent: f64,
    /// `|parameter BPTT - full-sum one-step|`.
    pub measured_error_params: f64,
    /// `lambda^2 rho / (1 - lambda)`; assumes `|dF/dx_N| <= lambda`.
    pub bound_latent: Option<f64>,
    /// `lambda rho L_F / (1 - lambda)`.
    pub bound_params: Option<f64>,
    /// `lambda rho |dF/dx_N| / (1 - lambda)`; valid with `x_N` outside the
    /// state.
    pub bound_latent_external: Option<f64>,
    pub bound_valid: bool,
}

fn largest_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    // eigenvalues of the smaller Gram matrix
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    let top = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, &b| a.max(b));
    top.max(0.0).sqrt()
}

/// Evaluate the bound constants at the trajectory from `problem.start`
/// (taken as `x_N`).
pub fn evaluate_bounds<V: VelocityField>(problem: &Problem<'_, V>) -> Result<BoundReport, GradError> {
    let n = problem.schedule.steps;
    let sys = stacked_system(problem, n, true)?;
    let lambda = largest_singular_value(&sys.dfds);
    let rho = sys.djds.norm();
    let l_f = largest_singular_value(sys.dfdtheta.as_ref().expect("parameter block"));
    let dfdx_norm = largest_singular_value(&sys.dfdx);

    let latent = GradTarget::Latent { step: n };
    let exact_latent = grad_bptt(problem, latent)?.gradient;
    let one_step_latent = grad_sdo_latent(problem, n)?.gradient;
    let exact_params = grad_bptt(problem, GradTarget::Parameters)?.gradient;
    // the full-sum selection is deterministic; the generator is never drawn
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let one_step_params =
        grad_sdo_params(problem, TimestepSelection::FullSum, &mut unused)?.gradient;
    let dist = |a: &crate::array::DenseArray, b: &crate::array::DenseArray| {
        a.sub(b).expect("same shape").l2_norm()
    };

    let bound_valid = lambda < 1.0;
    let when_valid = |v: f64| bound_valid.then_some(v);
    Ok(BoundReport {
        lambda_hat: lambda,
        rho_hat: rho,
        l_f_hat: l_f,
        dfdx_norm,
        measured_error_latent: dist(&exact_latent, &one_step_latent),
        measured_error_params: dist(&exact_params, &one_step_params),
        bound_latent: when_valid(lambda * lambda * rho / (1.0 - lambda)),
        bound_params: when_valid(lambda * rho * l_f / (1.0 - lambda)),
        bound_latent_external: when_valid(lambda * rho * dfdx_norm / (1.0 - lambda)),
        bound_valid,
    })
}
