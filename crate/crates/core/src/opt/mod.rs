//! Optimizers, objectives and the latent / fine-tuning drivers.

mod adam;
mod classifier;
mod evasion;
mod finetune;
mod latent;
mod objective;

pub use adam::{Adam, AdamConfig};
pub use classifier::{
    train_toy_classifier, ClassifierConfig, ClassifierReport, LogisticClassifier, ACCURACY_FLOOR,
};
pub use evasion::{run_evasion, EvasionConfig, EvasionReport, EvasionSample};
pub use finetune::{
    finetune_params, mean_reward, FinetuneConfig, FinetuneOutcome, FinetuneRecord, HeldOutRecord,
};
pub use latent::{
    optimize_latent, project_linf, LatentOptConfig, LatentOptimizer, LatentOutcome, LatentRecord,
    FD_DRIVER_LIMIT,
};
pub use objective::{Objective, ObjectiveError};
