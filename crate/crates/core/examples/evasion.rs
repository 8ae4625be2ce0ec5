//! Push generated ring samples across a frozen logistic classifier's
//! decision line while each latent stays in an infinity-norm ball.

use sdo_lab::cli::ModelSource;
use sdo_lab::grad::EstimatorSpec;
use sdo_lab::model::{DatasetKind, DatasetSpec};
use sdo_lab::opt::{run_evasion, train_toy_classifier, ClassifierConfig, EvasionConfig, LatentOptimizer};
use sdo_lab::rng::{normal_array, stream_rng, Stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (model, schedule) = ModelSource::Bundled { steps: Some(30) }.load()?;
    let dataset = DatasetSpec::new(DatasetKind::default(), 7)?;
    let clf = train_toy_classifier(&dataset, &ClassifierConfig::default());
    println!("classifier w = {:.3?}, b = {:.3}, accuracy {:.3}", clf.classifier.w, clf.classifier.b, clf.accuracy);

    let noise = normal_array(&mut stream_rng(0, Stream::Noise), &[100, 2]);
    for tau in [0.1, 0.5, 1.0] {
        for (opt, est) in [
            (LatentOptimizer::GradientDescent, EstimatorSpec::sdo()),
            (LatentOptimizer::GradientDescent, EstimatorSpec::Bptt),
            (LatentOptimizer::Adam, EstimatorSpec::sdo()),
        ] {
            let config = EvasionConfig {
                tau,
                estimator: est,
                optimizer: opt,
                ..EvasionConfig::default()
            };
            let r = run_evasion(&model, &schedule, &clf.classifier, &dataset, &noise, &config, &mut stream_rng(0, Stream::Timestep))?;
            println!(
                "tau {tau} {:<16} {:<5} flipped {:>3}/{} ({:.1}%), ball respected: {}",
                format!("{opt:?}"),
                est.to_string(),
                r.flipped,
                r.initially_correct,
                100.0 * r.flip_rate,
                r.constraint_held
            );
        }
    }
    Ok(())
}
