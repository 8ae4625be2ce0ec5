//! Contraction constants and gradient error bounds, on the scalar linear
//! field and on the bundled checkpoint at a short step count.

use sdo_lab::cli::{ModelSource, TOY_MODE_CENTER};
use sdo_lab::grad::{evaluate_bounds, Problem};
use sdo_lab::model::{LinearVelocity, Schedule};
use sdo_lab::opt::Objective;
use sdo_lab::DenseArray;

fn show(name: &str, r: &sdo_lab::grad::BoundReport) {
    println!("{name}");
    println!("  lambda {:.4}  rho {:.4}  L_F {:.4}  |dF/dx_N| {:.4}", r.lambda_hat, r.rho_hat, r.l_f_hat, r.dfdx_norm);
    println!("  latent error {:.4e}, bound {:?}, bound with x_N outside the state {:?}", r.measured_error_latent, r.bound_latent, r.bound_latent_external);
    println!("  parameter error {:.4e}, bound {:?}", r.measured_error_params, r.bound_params);
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let field = LinearVelocity::new(0.1, 1);
    let schedule = Schedule::straight_line(4)?;
    let objective = Objective::QuadraticTarget { target: vec![0.0] };
    let x_n = DenseArray::vector(vec![1.0]);
    show("linear u = 0.1 x, N = 4", &evaluate_bounds(&Problem::new(&field, &schedule, &objective, &x_n))?);

    let (model, schedule) = ModelSource::Bundled { steps: Some(10) }.load()?;
    let objective = Objective::QuadraticTarget {
        target: TOY_MODE_CENTER.to_vec(),
    };
    let x_n = DenseArray::vector(vec![0.4, -0.2]);
    show("bundled checkpoint, N = 10", &evaluate_bounds(&Problem::new(&model, &schedule, &objective, &x_n))?);
    Ok(())
}
