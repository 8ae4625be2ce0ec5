//! Reward fine-tuning of the bundled checkpoint toward one ring mode, with
//! the one-step estimator and the last-step baseline.

use sdo_lab::cli::{toy_reward, ModelSource};
use sdo_lab::grad::EstimatorSpec;
use sdo_lab::opt::{finetune_params, FinetuneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (model, schedule) = ModelSource::default().load()?;
    let reward = toy_reward();
    for seed in 0..2u64 {
        for est in [EstimatorSpec::sdo(), EstimatorSpec::LastStep] {
            let config = FinetuneConfig::new(est, 32, 300, 1e-3);
            let out = finetune_params(&model, &schedule, &reward, &config, seed)?;
            let curve: Vec<String> = out.held_out.iter().map(|r| format!("{:.3}", r.reward)).collect();
            println!("seed {seed} {:<9} held-out reward {}", est.to_string(), curve.join(" "));
        }
    }
    Ok(())
}
