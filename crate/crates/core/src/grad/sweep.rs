use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_gradient, EstimatorSpec, GradError, GradTarget, Problem};
use crate::array::DenseArray;
use crate::model::{Schedule, VelocityField};
use crate::opt::Objective;
use crate::rng::{normal_array, stream_rng, Stream};
use crate::sampler::{csv_io, format_f64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub n_list: Vec<usize>,
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default = "default_target")]
    pub target: GradTarget,
    /// Rows of the fixed noise batch `x_N`.
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Timed repetitions per configuration; the median is reported.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub seed: u64,
    /// Run configurations on the rayon pool. Wall times are not reported.
    #[serde(default)]
    pub concurrent: bool,
}

fn default_target() -> GradTarget {
    GradTarget::Parameters
}

fn default_batch() -> usize {
    64
}

fn default_repeats() -> usize {
    5
}

impl SweepConfig {
    pub fn new(n_list: Vec<usize>, estimators: Vec<EstimatorSpec>, seed: u64) -> Self {
        Self {
            n_list,
            estimators,
            target: default_target(),
            batch: default_batch(),
            repeats: default_repeats(),
            seed,
            concurrent: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub estimator: String,
    pub grad_l2: f64,
    pub tape_nodes: usize,
    /// Median over the repetitions; `None` in concurrent mode.
    pub wall_time_s: Option<f64>,
    pub finite: bool,
    pub seed: u64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Gradient norm, tape size and timing for every `(N, estimator)` pair on
/// one fixed noise batch. Latent targets refer to the top state `x_N`.
pub fn grad_norm_sweep<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    objective: &Objective,
    config: &SweepConfig,
) -> Result<Vec<SweepRow>, GradError> {
    if config.n_list.is_empty() || config.estimators.is_empty() {
        return Err(GradError::Request("sweep needs at least one N and one estimator".into()));
    }
    if config.batch == 0 || config.repeats == 0 {
        return Err(GradError::Request("sweep batch and repeats must be positive".into()));
    }
    let noise = normal_array(
        &mut stream_rng(config.seed, Stream::Noise),
        &[config.batch, field.data_dim()],
    );
    let jobs: Vec<(usize, EstimatorSpec)> = config
        .n_list
        .iter()
        .flat_map(|&n| config.estimators.iter().map(move |e| (n, *e)))
        .collect();
    let run = |&(n, est): &(usize, EstimatorSpec)| {
        sweep_one(field, schedule, objective, &noise, config, n, est)
    };
    if config.concurrent {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    }
}

fn sweep_one<V: VelocityField>(
    field: &V,
    schedule: &Schedule,
    objective: &Objective,
    noise: &DenseArray,
    config: &SweepConfig,
    n: usize,
    estimator: EstimatorSpec,
) -> Result<SweepRow, GradError> {
    let schedule = schedule.with_steps(n)?;
    let target = match config.target {
        GradTarget::Latent { .. } => GradTarget::Latent { step: n },
        GradTarget::Parameters => GradTarget::Parameters,
    };
    let problem = Problem::new(field, &schedule, objective, noise).with_seed(config.seed);
    let repeats = if config.concurrent { 1 } else { config.repeats };
    let mut times = Vec::with_capacity(repeats);
    let mut first = None;
    for _ in 0..repeats {
        // every repetition sees the same random draws
        let mut rng = stream_rng(config.seed, Stream::Timestep);
        let report = compute_gradient(&problem, target, &estimator, &mut rng)?;
        times.push(report.wall_time_seconds);
        first.get_or_insert(report);
    }
    let report = first.expect("at least one repetition");
    Ok(SweepRow {
        n,
        estimator: estimator.to_string(),
        grad_l2: report.l2_norm,
        tape_nodes: report.tape_node_count,
        wall_time_s: (!config.concurrent).then(|| median(times)),
        finite: report.finite && report.l2_norm.is_finite(),
        seed: config.seed,
    })
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["N", "estimator", "grad_l2", "tape_nodes", "wall_time_s", "finite", "seed"])
        .map_err(csv_io)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.estimator.clone(),
            format_f64(r.grad_l2),
            r.tape_nodes.to_string(),
            r.wall_time_s.map(format_f64).unwrap_or_default(),
            r.finite.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::TimestepSelection;
    use crate::model::{Denoiser, ZeroVelocity};

    fn quad() -> Objective {
        Objective::QuadraticTarget {
            target: vec![1.0, -1.0],
        }
    }

    #[test]
    fn zero_velocity_rows() {
        let s = Schedule::straight_line(4).unwrap();
        let f = ZeroVelocity::new(2);
        let mut cfg = SweepConfig::new(vec![3, 7], vec![EstimatorSpec::Bptt, EstimatorSpec::sdo()], 9);
        cfg.repeats = 1;
        let rows = grad_norm_sweep(&f, &s, &quad(), &cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.grad_l2 == 0.0 && r.finite));

        cfg.target = GradTarget::Latent { step: 0 };
        let rows = grad_norm_sweep(&f, &s, &quad(), &cfg).unwrap();
        // x_0 = x_N, so the latent gradient is the objective gradient at the noise
        let noise = normal_array(&mut stream_rng(9, Stream::Noise), &[cfg.batch, 2]);
        let direct = quad().gradient(&noise).unwrap().l2_norm();
        for r in rows {
            assert_eq!(r.grad_l2, direct);
        }
    }

    #[test]
    fn full_truncation_matches_bptt() {
        let s = Schedule::vp_linear(0.1, 20.0, 5).unwrap();
        let d = Denoiser::default_toy(&mut stream_rng(2, Stream::Init));
        let mut rows = Vec::new();
        for n in [3, 5] {
            let mut cfg = SweepConfig::new(
                vec![n],
                vec![EstimatorSpec::Bptt, EstimatorSpec::Truncated { k: Some(n) }],
                4,
            );
            cfg.batch = 8;
            cfg.repeats = 1;
            rows.extend(grad_norm_sweep(&d, &s, &quad(), &cfg).unwrap());
        }
        for pair in rows.chunks(2) {
            assert_eq!(pair[0].grad_l2.to_bits(), pair[1].grad_l2.to_bits());
        }
    }

    #[test]
    fn concurrent_mode_matches_serial_values() {
        let s = Schedule::vp_linear(0.1, 20.0, 5).unwrap();
        let d = Denoiser::default_toy(&mut stream_rng(2, Stream::Init));
        let ests = vec![
            EstimatorSpec::Bptt,
            EstimatorSpec::Sdo {
                selection: TimestepSelection::RandomUniform,
            },
        ];
        let mut cfg = SweepConfig::new(vec![2, 4], ests, 1);
        cfg.batch = 4;
        cfg.repeats = 1;
        let serial = grad_norm_sweep(&d, &s, &quad(), &cfg).unwrap();
        cfg.concurrent = true;
        let conc = grad_norm_sweep(&d, &s, &quad(), &cfg).unwrap();
        for (a, b) in serial.iter().zip(&conc) {
            assert_eq!(a.grad_l2, b.grad_l2);
            assert_eq!(a.tape_nodes, b.tape_nodes);
            assert!(a.wall_time_s.is_some() && b.wall_time_s.is_none());
        }
    }

    #[test]
    fn csv_layout() {
        let rows = vec![SweepRow {
            n: 10,
            estimator: "bptt".into(),
            grad_l2: f64::NAN,
            tape_nodes: 3,
            wall_time_s: None,
            finite: false,
            seed: 1,
        }];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "N,estimator,grad_l2,tape_nodes,wall_time_s,finite,seed\n10,bptt,NaN,3,,false,1\n"
        );
    }

    #[test]
    fn empty_lists_rejected() {
        let s = Schedule::straight_line(2).unwrap();
        let cfg = SweepConfig::new(vec![], vec![EstimatorSpec::Bptt], 0);
        assert!(grad_norm_sweep(&ZeroVelocity::new(2), &s, &quad(), &cfg).is_err());
    }
}
