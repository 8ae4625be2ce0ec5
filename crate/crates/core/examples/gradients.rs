//! Every gradient estimator on one problem, next to the exact oracles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdo_lab::cli::{ModelSource, TOY_MODE_CENTER};
use sdo_lab::grad::{
    compute_gradient, grad_fd_oracle, relative_error, EstimatorSpec, FdMap, GradTarget, Problem,
};
use sdo_lab::opt::Objective;
use sdo_lab::rng::{normal_array, stream_rng, Stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (model, schedule) = ModelSource::Bundled { steps: Some(8) }.load()?;
    let objective = Objective::QuadraticTarget {
        target: TOY_MODE_CENTER.to_vec(),
    };
    let x_n = normal_array(&mut stream_rng(3, Stream::Noise), &[2, 2]);
    let problem = Problem::new(&model, &schedule, &objective, &x_n).with_seed(3);
    let n = schedule.steps;

    for (label, target) in [("latent x_N", GradTarget::Latent { step: n }), ("parameters", GradTarget::Parameters)] {
        let exact = compute_gradient(&problem, target, &EstimatorSpec::Bptt, &mut ChaCha8Rng::seed_from_u64(0))?;
        let fd = grad_fd_oracle(&problem, target, FdMap::TrueMap, 1e-5)?;
        println!("{label}: |bptt| = {:.4e}, bptt vs finite differences {:.2e}", exact.l2_norm, relative_error(&exact.gradient, &fd));
        for est in ["ift-oracle", "sdo", "sdo-full-sum", "last-step", "truncated-3"] {
            let est: EstimatorSpec = est.parse()?;
            // truncated windows and the full sum only apply to parameters
            let latent = matches!(target, GradTarget::Latent { .. });
            if latent && !matches!(est, EstimatorSpec::IftOracle | EstimatorSpec::Sdo { .. }) {
                continue;
            }
            if latent && est.to_string() == "sdo-full-sum" {
                continue;
            }
            let r = compute_gradient(&problem, target, &est, &mut ChaCha8Rng::seed_from_u64(0))?;
            println!(
                "  {:<14} |g| {:.4e}  rel. diff to bptt {:.3e}  tape nodes {:>5}  cosine {:+.3}",
                est.to_string(),
                r.l2_norm,
                relative_error(&r.gradient, &exact.gradient),
                r.tape_node_count,
                r.gradient.dot(&exact.gradient) / (r.l2_norm * exact.l2_norm)
            );
        }
    }
    Ok(())
}
