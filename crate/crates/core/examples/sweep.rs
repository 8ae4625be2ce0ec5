//! Gradient norm, tape size and timing over step counts, printed as CSV.
//!
//! ```text
//! cargo run --release --example sweep > sweep.csv
//! ```

use sdo_lab::cli::{toy_reward, ModelSource};
use sdo_lab::grad::{grad_norm_sweep, write_sweep_csv, EstimatorSpec, SweepConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (model, schedule) = ModelSource::default().load()?;
    let estimators = ["bptt", "sdo", "sdo-full-sum", "last-step", "truncated-5"]
        .iter()
        .map(|s| s.parse())
        .collect::<Result<Vec<EstimatorSpec>, _>>()?;
    let config = SweepConfig::new(vec![10, 25, 50, 100], estimators, 0);
    let rows = grad_norm_sweep(&model, &schedule, &toy_reward(), &config)?;
    write_sweep_csv(&rows, std::io::stdout())?;
    Ok(())
}
