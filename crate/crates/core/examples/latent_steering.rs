//! Steer one latent so its sample lands on a ring mode, with the one-step
//! latent gradient and with full backpropagation.

use sdo_lab::cli::{ModelSource, TOY_MODE_CENTER};
use sdo_lab::grad::EstimatorSpec;
use sdo_lab::opt::{optimize_latent, LatentOptConfig, Objective};
use sdo_lab::rng::{normal_array, stream_rng, Stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (model, schedule) = ModelSource::default().load()?;
    let objective = Objective::QuadraticTarget {
        target: TOY_MODE_CENTER.to_vec(),
    };
    for seed in 0..3u64 {
        let x_n = normal_array(&mut stream_rng(seed, Stream::Noise), &[1, 2]);
        for est in [EstimatorSpec::sdo(), EstimatorSpec::Bptt] {
            let mut config = LatentOptConfig::new(0.05, 300);
            config.estimator = est;
            let out = optimize_latent(&model, &schedule, &x_n, &objective, &config, &mut stream_rng(seed, Stream::Timestep))?;
            let secs = out.history.last().map_or(0.0, |r| r.elapsed_s);
            println!(
                "seed {seed} {:<5} loss {:.3e} -> {:.3e} ({:.1}% of initial) in {secs:.2}s, x0 = {:.4?}",
                est.to_string(),
                out.initial_loss(),
                out.best_loss,
                100.0 * out.best_loss / out.initial_loss(),
                out.best_x0.data()
            );
        }
    }
    Ok(())
}
