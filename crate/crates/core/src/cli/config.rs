use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::array::DenseArray;
use crate::grad::{EstimatorSpec, GradTarget};
use crate::model::{
    from_bytes, load_checkpoint, DatasetKind, Denoiser, LinearVelocity, ModelError, Schedule, TrainConfig,
    VelocityField, ZeroVelocity,
};
use crate::opt::{AdamConfig, ClassifierConfig, EvasionConfig, LatentOptimizer, Objective};
use crate::tape::{Tape, Var};

/// The trained ring model shipped with the crate.
pub static BUNDLED_CHECKPOINT: &[u8] = include_bytes!("../../assets/toy_ring.ckpt");

/// Centre of the first mode of the default ring, `2 (cos pi/8, sin pi/8)`.
pub const TOY_MODE_CENTER: [f64; 2] = [1.8477590650225735, 0.7653668647301796];

/// One document for every subcommand; each reads its own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub optimize: OptimizeSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: None,
            model: ModelSource::default(),
            train: TrainConfig::default(),
            verify: VerifySection::default(),
            bench: BenchSection::default(),
            optimize: OptimizeSection::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.model.resolve_paths(base);
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Where the velocity field comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSource {
    /// The checkpoint compiled into the crate.
    Bundled {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<usize>,
    },
    Checkpoint {
        /// Relative paths are taken from the config file's directory.
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<usize>,
    },
    /// `u = a x` on a straight-line schedule.
    Linear {
        a: f64,
        #[serde(default = "one")]
        dim: usize,
        steps: usize,
    },
    /// `u = 0` on a straight-line schedule.
    Zero {
        #[serde(default = "two")]
        dim: usize,
        steps: usize,
    },
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Bundled { steps: None }
    }
}

impl ModelSource {
    fn resolve_paths(&mut self, base: &Path) {
        if let ModelSource::Checkpoint { path, .. } = self {
            if path.is_relative() {
                let joined = base.join(&*path);
                *path = std::path::absolute(&joined).unwrap_or(joined);
            }
        }
    }

    /// Load the field and its schedule.
    pub fn load(&self) -> Result<(Model, Schedule), CliError> {
        let with_steps = |s: Schedule, steps: Option<usize>| match steps {
            Some(n) => s.with_steps(n).map_err(|e| CliError::Config(e.to_string())),
            None => Ok(s),
        };
        match self {
            ModelSource::Bundled { steps } => {
                let (d, s, _) = from_bytes(BUNDLED_CHECKPOINT)
                    .map_err(|e| CliError::Config(format!("bundled checkpoint: {e}")))?;
                Ok((Model::Mlp(d), with_steps(s, *steps)?))
            }
            ModelSource::Checkpoint { path, steps } => {
                let (d, s) = load_checkpoint(path).map_err(|e| CliError::Config(e.to_string()))?;
                Ok((Model::Mlp(d), with_steps(s, *steps)?))
            }
            ModelSource::Linear { a, dim, steps } => Ok((
                Model::Linear(LinearVelocity::new(*a, *dim)),
                Schedule::straight_line(*steps).map_err(|e| CliError::Config(e.to_string()))?,
            )),
            ModelSource::Zero { dim, steps } => Ok((
                Model::Zero(ZeroVelocity::new(*dim)),
                Schedule::straight_line(*steps).map_err(|e| CliError::Config(e.to_string()))?,
            )),
        }
    }
}

/// Any of the velocity fields the runner can load.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mlp(Denoiser),
    Linear(LinearVelocity),
    Zero(ZeroVelocity),
}

macro_rules! each_model {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            Model::Mlp($m) => $body,
            Model::Linear($m) => $body,
            Model::Zero($m) => $body,
        }
    };
}

impl VelocityField for Model {
    fn data_dim(&self) -> usize {
        each_model!(self, m => m.data_dim())
    }

    fn param_count(&self) -> usize {
        each_model!(self, m => m.param_count())
    }

    fn param_arrays(&self) -> Vec<DenseArray> {
        each_model!(self, m => m.param_arrays())
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        each_model!(self, m => m.set_flat_params(flat))
    }

    fn velocity_on_tape(
        &self,
        schedule: &Schedule,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        t: f64,
    ) -> Result<Var, ModelError> {
        each_model!(self, m => m.velocity_on_tape(schedule, tape, params, x, t))
    }

    fn velocity(&self, schedule: &Schedule, x: &DenseArray, t: f64) -> Result<DenseArray, ModelError> {
        each_model!(self, m => m.velocity(schedule, x, t))
    }
}

/// `verify`: Picard equivalence plus the gradient oracle suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Steps for the Picard comparison (model default when absent).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picard_steps: Option<usize>,
    pub picard_batch: usize,
    pub picard_tolerance: f64,
    /// Steps for the gradient checks; small, because the oracles are dense.
    pub grad_steps: usize,
    pub grad_batch: usize,
    /// Random (noise, objective) draws for the gradient checks.
    pub draws: usize,
    pub fd_step: f64,
    /// Rows of the noise batch for the single-step decomposition check,
    /// which runs on the model's own grid.
    pub decomposition_batch: usize,
    pub picard_deviation_tolerance: f64,
    /// Relative error against finite differences.
    pub fd_tolerance: f64,
    /// Relative error between the implicit-function oracle and BPTT.
    pub ift_tolerance: f64,
    /// Relative error of the summed single-step gradients.
    pub decomposition_tolerance: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            picard_steps: None,
            picard_batch: 64,
            picard_tolerance: 1e-10,
            grad_steps: 6,
            grad_batch: 2,
            draws: 3,
            fd_step: crate::grad::DEFAULT_FD_STEP,
            decomposition_batch: 16,
            picard_deviation_tolerance: 1e-8,
            fd_tolerance: 1e-5,
            ift_tolerance: 1e-8,
            decomposition_tolerance: 1e-10,
        }
    }
}

/// `bench`: gradient norm, tape size and timing over step counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub n_list: Vec<usize>,
    pub estimators: Vec<EstimatorSpec>,
    pub target: GradTarget,
    pub objective: Objective,
    pub batch: usize,
    pub repeats: usize,
    pub concurrent: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            n_list: vec![10, 25, 50, 100],
            estimators: vec![
                EstimatorSpec::Bptt,
                EstimatorSpec::sdo(),
                EstimatorSpec::Sdo {
                    selection: crate::grad::TimestepSelection::FullSum,
                },
                EstimatorSpec::LastStep,
            ],
            target: GradTarget::Parameters,
            objective: toy_reward(),
            batch: 64,
            repeats: 5,
            concurrent: false,
        }
    }
}

/// The rbf reward centred on the first ring mode.
pub fn toy_reward() -> Objective {
    Objective::RbfReward {
        center: TOY_MODE_CENTER.to_vec(),
        width: 0.5,
    }
}

/// `optimize`: latent steering, or classifier evasion when `evade` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSection {
    /// Number of latents optimized together.
    pub batch: usize,
    pub objective: Objective,
    pub estimator: EstimatorSpec,
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub optimizer: LatentOptimizer,
    pub track_best: bool,
    pub adam: AdamConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evade: Option<EvadeSection>,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        Self {
            batch: 1,
            objective: Objective::QuadraticTarget {
                target: TOY_MODE_CENTER.to_vec(),
            },
            estimator: EstimatorSpec::sdo(),
            learning_rate: 0.05,
            steps: 300,
            start_step: None,
            tau: None,
            optimizer: LatentOptimizer::Adam,
            track_best: true,
            adam: AdamConfig::default(),
            evade: None,
        }
    }
}

/// Evade a logistic classifier trained on `dataset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvadeSection {
    /// Number of latents drawn, one per sample.
    pub samples: usize,
    pub dataset: DatasetKind,
    pub dataset_seed: u64,
    pub classifier: ClassifierConfig,
    pub settings: EvasionConfig,
}

impl Default for EvadeSection {
    fn default() -> Self {
        Self {
            samples: 200,
            dataset: DatasetKind::default(),
            dataset_seed: 7,
            classifier: ClassifierConfig::default(),
            settings: EvasionConfig::default(),
        }
    }
}

/// `finetune`: reward fine-tuning of the network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub objective: Objective,
    pub estimator: EstimatorSpec,
    pub batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    pub eval_every: usize,
    pub held_out: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            objective: toy_reward(),
            estimator: EstimatorSpec::sdo(),
            batch: 32,
            steps: 300,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            clip: None,
            eval_every: 25,
            held_out: 256,
        }
    }
}
