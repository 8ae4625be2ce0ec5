use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::config::{ExperimentConfig, Model, OptimizeSection, VerifySection};
use super::manifest::{sha256_hex, stable_digest, ArtifactRecord, RunManifest};
use super::plot::LinePlot;
use super::{CliError, Command, RunContext, RESOLVED_CONFIG_FILE};
use crate::array::DenseArray;
use crate::grad::{
    evaluate_bounds, grad_bptt, grad_fd_oracle, grad_ift_oracle,
    grad_norm_sweep, grad_sdo_latent, grad_sdo_params, relative_error, write_sweep_csv,
    EstimatorSpec, FdMap, GradTarget, Problem, SweepConfig, SweepRow, TimestepSelection,
};
use crate::model::{to_bytes, train_denoiser_with, DatasetSpec, VelocityField};
use crate::opt::{
    finetune_params, optimize_latent, run_evasion, train_toy_classifier, FinetuneConfig,
    LatentOptConfig, LatentOutcome, LogisticClassifier, Objective,
};
use crate::rng::{normal_array, stream_rng, Stream};
use crate::sampler::{format_f64, sample_from, verify_prop1, PicardConfig, Trajectory};

/// Files written by one run, in order.
struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<(String, bool)>,
}

impl Outputs<'_> {
    fn write(&mut self, name: &str, bytes: &[u8], timing: bool) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.written.retain(|(n, _)| n != name);
        self.written.push((name.to_string(), timing));
        Ok(())
    }

    fn write_csv(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf, false)
    }

    fn records(&self) -> Vec<ArtifactRecord> {
        self.written
            .iter()
            .map(|(name, timing)| {
                let bytes = std::fs::read(self.dir.join(name)).unwrap_or_default();
                ArtifactRecord {
                    path: name.clone(),
                    sha256: stable_digest(name, &bytes),
                    timing: *timing,
                }
            })
            .collect()
    }
}

pub(super) fn execute(ctx: &RunContext, config: &ExperimentConfig) -> Result<(), CliError> {
    let started = Instant::now();
    std::fs::create_dir_all(&ctx.out)?;
    let resolved = config.to_toml();
    let mut out = Outputs {
        dir: &ctx.out,
        written: Vec::new(),
    };
    out.write(RESOLVED_CONFIG_FILE, resolved.as_bytes(), false)?;
    let result = match ctx.command {
        Command::Train => cmd_train(ctx, config, &mut out),
        Command::Verify => cmd_verify(ctx, config, &mut out),
        Command::Bench => cmd_bench(ctx, config, &mut out),
        Command::Optimize => cmd_optimize(ctx, config, &mut out),
        Command::Finetune => cmd_finetune(ctx, config, &mut out),
    };
    let (status, exit_code) = match &result {
        Ok(()) => ("ok", 0),
        Err(CliError::Verify(_)) => ("verify-failed", 1),
        Err(CliError::Numeric(_)) => ("numeric-abort", 3),
        Err(e) => ("config-error", e.exit_code()),
    };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: ctx.command.name().to_string(),
        config_hash: sha256_hex(resolved.as_bytes()),
        seed: ctx.seed,
        artifacts: out.records(),
        wall_time_s: started.elapsed().as_secs_f64(),
        status: status.to_string(),
        exit_code,
    };
    manifest.append(&ctx.out)?;
    if result.is_ok() {
        ctx.say(format!(
            "wrote {} artifacts to {}",
            manifest.artifacts.len(),
            ctx.out.display()
        ));
    }
    result
}

fn cmd_train(ctx: &RunContext, config: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let cfg = &config.train;
    let mut losses = Vec::with_capacity(cfg.train_steps);
    let every = (cfg.train_steps / 10).max(1);
    let outcome = train_denoiser_with(cfg, ctx.seed, |step, loss| {
        losses.push(loss);
        if step % every == 0 {
            ctx.say(format!("step {step:>6}  loss {loss:.6}"));
        }
    });
    let write_losses = |out: &mut Outputs, losses: &[f64]| {
        out.write_csv("loss.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["step", "loss"]).map_err(std::io::Error::other)?;
            for (i, l) in losses.iter().enumerate() {
                w.write_record([i.to_string(), format_f64(*l)]).map_err(std::io::Error::other)?;
            }
            w.flush()
        })
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            write_losses(out, &losses)?;
            return Err(e.into());
        }
    };
    write_losses(out, &outcome.losses)?;
    out.write("model.ckpt", &to_bytes(&outcome.denoiser, &outcome.schedule), false)?;
    let mut plot = LinePlot::new("Score-matching loss", "step", "loss").log_y();
    plot.push("loss", outcome.losses.iter().enumerate().map(|(i, l)| (i as f64, *l)).collect());
    out.write("loss.svg", plot.to_svg().as_bytes(), false)?;
    match outcome.losses.last() {
        Some(l) => ctx.say(format!("final loss {}", format_f64(*l))),
        None => ctx.say("no training steps run"),
    }
    Ok(())
}

/// One row of the verification table.
#[derive(Debug, Clone, Serialize)]
struct Check {
    name: String,
    value: f64,
    tolerance: f64,
}

impl Check {
    fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

/// Random objective for gradient checks, cycling through the families.
fn random_objective(draw: usize, dim: usize, rng: &mut impl Rng) -> Objective {
    let point = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
    };
    match draw % 3 {
        0 => Objective::QuadraticTarget { target: point(rng) },
        1 => Objective::RbfReward {
            center: point(rng),
            width: rng.random_range(0.5..2.0),
        },
        _ => Objective::ClassifierMargin {
            classifier: LogisticClassifier {
                w: point(rng),
                b: rng.random_range(-0.5..0.5),
            },
            label: rng.random_range(0..2),
            evade: false,
        },
    }
}

fn cmd_verify(ctx: &RunContext, config: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let v: &VerifySection = &config.verify;
    if v.draws == 0 || v.grad_steps == 0 || v.grad_batch == 0 || v.picard_batch == 0 {
        return Err(CliError::Config("verify needs positive draws, grad_steps and batches".into()));
    }
    let (model, base) = config.model.load()?;
    let dim = model.data_dim();
    let mut checks = Vec::new();
    let mut noise_rng = stream_rng(ctx.seed, Stream::Noise);

    let picard_schedule = match v.picard_steps {
        Some(n) => base.with_steps(n)?,
        None => base,
    };
    let x_n = normal_array(&mut noise_rng, &[v.picard_batch, dim]);
    let picard = PicardConfig {
        tolerance: v.picard_tolerance,
        max_iters: picard_schedule.steps,
        parallel: false,
    };
    let check = verify_prop1(&model, &picard_schedule, &x_n, &picard)?;
    ctx.say(format!(
        "picard: {} sweeps, stop {:?}, max deviation {:.3e}",
        check.picard.iters_used, check.picard.stop, check.max_deviation
    ));
    checks.push(Check {
        name: "picard_vs_sequential".into(),
        value: check.max_deviation,
        tolerance: v.picard_deviation_tolerance,
    });

    let schedule = base.with_steps(v.grad_steps)?;
    let n = schedule.steps;
    let mut obj_rng = stream_rng(ctx.seed, Stream::Probe);
    let mut step_rng = stream_rng(ctx.seed, Stream::Timestep);
    let worst = |name: &str, value: f64, tolerance: f64, checks: &mut Vec<Check>| {
        match checks.iter_mut().find(|c| c.name == name) {
            Some(c) => c.value = c.value.max(value.abs()),
            None => checks.push(Check {
                name: name.into(),
                value: value.abs(),
                tolerance,
            }),
        }
    };
    let mut bounds = None;
    for draw in 0..v.draws {
        let objective = random_objective(draw, dim, &mut obj_rng);
        let x_n = normal_array(&mut noise_rng, &[v.grad_batch, dim]);
        let p = Problem::new(&model, &schedule, &objective, &x_n).with_seed(ctx.seed);
        let latent = GradTarget::Latent { step: n };
        let params = GradTarget::Parameters;

        let bptt_l = grad_bptt(&p, latent)?.gradient;
        let bptt_p = grad_bptt(&p, params)?.gradient;
        let fd_l = grad_fd_oracle(&p, latent, FdMap::TrueMap, v.fd_step)?;
        let fd_p = grad_fd_oracle(&p, params, FdMap::TrueMap, v.fd_step)?;
        worst("bptt_vs_fd_latent", relative_error(&bptt_l, &fd_l), v.fd_tolerance, &mut checks);
        worst("bptt_vs_fd_params", relative_error(&bptt_p, &fd_p), v.fd_tolerance, &mut checks);

        let ift_l = grad_ift_oracle(&p, latent)?.gradient;
        let ift_p = grad_ift_oracle(&p, params)?.gradient;
        worst("ift_vs_bptt_latent", relative_error(&ift_l, &bptt_l), v.ift_tolerance, &mut checks);
        worst("ift_vs_bptt_params", relative_error(&ift_p, &bptt_p), v.ift_tolerance, &mut checks);

        let sdo_l = grad_sdo_latent(&p, n)?.gradient;
        let sur_l = grad_fd_oracle(&p, latent, FdMap::SdoLatentSurrogate, v.fd_step)?;
        worst("sdo_latent_vs_surrogate", relative_error(&sdo_l, &sur_l), v.fd_tolerance, &mut checks);

        let i = step_rng.random_range(1..=n);
        let sdo_i = grad_sdo_params(&p, TimestepSelection::Fixed(i), &mut step_rng)?.gradient;
        let sur_i = grad_fd_oracle(&p, params, FdMap::SdoStepSurrogate(i), v.fd_step)?;
        worst("sdo_step_vs_surrogate", relative_error(&sdo_i, &sur_i), v.fd_tolerance, &mut checks);

        if bounds.is_none() {
            bounds = Some(evaluate_bounds(&p)?);
        }
    }

    // full-sum decomposition on the model's own grid
    let objective = random_objective(0, dim, &mut obj_rng);
    let x_n = normal_array(&mut noise_rng, &[v.decomposition_batch, dim]);
    let p = Problem::new(&model, &base, &objective, &x_n).with_seed(ctx.seed);
    let full = grad_sdo_params(&p, TimestepSelection::FullSum, &mut step_rng)?.gradient;
    let mut sum = DenseArray::zeros(full.shape());
    for i in 1..=base.steps {
        let g = grad_sdo_params(&p, TimestepSelection::Fixed(i), &mut step_rng)?.gradient;
        sum = sum.add(&g).expect("matching gradient shapes");
    }
    checks.push(Check {
        name: "single_step_sum_vs_full_sum".into(),
        value: relative_error(&sum, &full).abs(),
        tolerance: v.decomposition_tolerance,
    });

    out.write_csv("verify.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["check", "value", "tolerance", "pass"]).map_err(std::io::Error::other)?;
        for c in &checks {
            w.write_record([
                c.name.clone(),
                format!("{:e}", c.value),
                format!("{:e}", c.tolerance),
                c.passed().to_string(),
            ])
            .map_err(std::io::Error::other)?;
        }
        w.flush()
    })?;
    if let Some(b) = &bounds {
        let json = serde_json::to_string_pretty(b).map_err(std::io::Error::other)?;
        out.write("bounds.json", json.as_bytes(), false)?;
    }
    for c in &checks {
        ctx.say(format!(
            "{:<28} {:>11.3e}  <= {:<8.1e} {}",
            c.name,
            c.value,
            c.tolerance,
            if c.passed() { "pass" } else { "FAIL" }
        ));
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}

fn cmd_bench(ctx: &RunContext, config: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let b = &config.bench;
    let (model, schedule) = config.model.load()?;
    let sweep = SweepConfig {
        n_list: b.n_list.clone(),
        estimators: b.estimators.clone(),
        target: b.target,
        batch: b.batch,
        repeats: b.repeats,
        seed: ctx.seed,
        concurrent: b.concurrent,
    };
    let rows = grad_norm_sweep(&model, &schedule, &b.objective, &sweep)?;
    out.write_csv("sweep.csv", |buf| write_sweep_csv(&rows, buf))?;

    let curves = |f: &dyn Fn(&SweepRow) -> Option<f64>| {
        b.estimators
            .iter()
            .map(|e| {
                let name = e.to_string();
                let pts = rows
                    .iter()
                    .filter(|r| r.estimator == name)
                    .map(|r| (r.n as f64, f(r).unwrap_or(f64::NAN)))
                    .collect::<Vec<_>>();
                (name, pts)
            })
            .collect::<Vec<_>>()
    };
    let mut norm = LinePlot::new("Gradient norm", "N", "l2 norm").log_y();
    for (name, pts) in curves(&|r| r.finite.then_some(r.grad_l2)) {
        let (lo, hi) = pts.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        ctx.say(format!("{name:<14} grad norm max/min over N {:.3}", hi / lo));
        norm.push(&name, pts);
    }
    out.write("grad_norm.svg", norm.to_svg().as_bytes(), false)?;
    let mut nodes = LinePlot::new("Tape size", "N", "tape nodes").log_y();
    for (name, pts) in curves(&|r| Some(r.tape_nodes as f64)) {
        nodes.push(&name, pts);
    }
    out.write("tape_nodes.svg", nodes.to_svg().as_bytes(), false)?;
    if !b.concurrent {
        let mut time = LinePlot::new("Median gradient time", "N", "seconds").log_y();
        for (name, pts) in curves(&|r| r.wall_time_s) {
            time.push(&name, pts);
        }
        out.write("wall_time.svg", time.to_svg().as_bytes(), true)?;
    }
    Ok(())
}

fn latent_config(o: &OptimizeSection) -> LatentOptConfig {
    let mut c = LatentOptConfig::new(o.learning_rate, o.steps);
    c.start_step = o.start_step;
    c.estimator = o.estimator;
    c.optimizer = o.optimizer;
    c.adam = o.adam;
    c.tau = o.tau;
    c.track_best = o.track_best;
    c
}

fn write_latent_log(outcome: &LatentOutcome, estimator: EstimatorSpec, buf: &mut Vec<u8>) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["step", "loss_or_reward", "grad_l2", "estimator", "elapsed_s"])
        .map_err(std::io::Error::other)?;
    let name = estimator.to_string();
    for r in &outcome.history {
        w.write_record([
            r.step.to_string(),
            format_f64(r.loss),
            r.grad_l2.map(format_f64).unwrap_or_default(),
            name.clone(),
            format_f64(r.elapsed_s),
        ])
        .map_err(std::io::Error::other)?;
    }
    w.flush()
}

fn cmd_optimize(ctx: &RunContext, config: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let o = &config.optimize;
    let (model, schedule) = config.model.load()?;
    let dim = model.data_dim();
    let mut step_rng = stream_rng(ctx.seed, Stream::Timestep);
    let mut noise_rng = stream_rng(ctx.seed, Stream::Noise);

    if let Some(ev) = &o.evade {
        let dataset = DatasetSpec::new(ev.dataset, ev.dataset_seed)?;
        let clf = train_toy_classifier(&dataset, &ev.classifier);
        ctx.say(format!("classifier training accuracy {:.4}", clf.accuracy));
        if !clf.meets_floor {
            return Err(CliError::Config(format!(
                "classifier accuracy {:.3} below the floor; the dataset is not linearly separable enough",
                clf.accuracy
            )));
        }
        if ev.samples == 0 {
            return Err(CliError::Config("evade.samples must be positive".into()));
        }
        let noise = normal_array(&mut noise_rng, &[ev.samples, dim]);
        let report = run_evasion(&model, &schedule, &clf.classifier, &dataset, &noise, &ev.settings, &mut step_rng)?;
        out.write_csv("evasion.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            let mut header = vec!["index", "label", "initially_correct", "flipped", "max_deviation"]
                .into_iter()
                .map(String::from)
                .collect::<Vec<_>>();
            header.extend((0..dim).map(|k| format!("initial_x{k}")));
            header.extend((0..dim).map(|k| format!("final_x{k}")));
            w.write_record(&header).map_err(std::io::Error::other)?;
            for s in &report.samples {
                let mut row = vec![
                    s.index.to_string(),
                    s.label.to_string(),
                    s.initially_correct.to_string(),
                    s.flipped.to_string(),
                    format_f64(s.max_deviation),
                ];
                row.extend(s.initial_x0.iter().chain(&s.final_x0).map(|v| format_f64(*v)));
                w.write_record(&row).map_err(std::io::Error::other)?;
            }
            w.flush()
        })?;
        ctx.say(format!(
            "flipped {}/{} initially correct samples (rate {:.3}); ball constraint held: {}",
            report.flipped, report.initially_correct, report.flip_rate, report.constraint_held
        ));
        return Ok(());
    }

    if o.batch == 0 {
        return Err(CliError::Config("optimize.batch must be positive".into()));
    }
    let cfg = latent_config(o);
    let x_n = normal_array(&mut noise_rng, &[o.batch, dim]);
    let outcome = optimize_latent(&model, &schedule, &x_n, &o.objective, &cfg, &mut step_rng)?;
    out.write_csv("history.csv", |buf| write_latent_log(&outcome, o.estimator, buf))?;
    // the final latent at step m, sampled down to x_0
    let m = o.start_step.unwrap_or(schedule.steps);
    let traj = Trajectory::new(schedule, sample_from(&model, &schedule, &outcome.latent, m)?);
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    out.write("trajectory.csv", &buf, false)?;
    let mut plot = LinePlot::new("Latent optimization", "step", "objective");
    plot.push(
        &o.estimator.to_string(),
        outcome.history.iter().map(|r| (r.step as f64, r.loss)).collect(),
    );
    out.write("loss.svg", plot.to_svg().as_bytes(), false)?;
    ctx.say(format!(
        "objective {} -> {} (best {})",
        format_f64(outcome.initial_loss()),
        format_f64(outcome.final_loss()),
        format_f64(outcome.best_loss)
    ));
    if let Some(step) = outcome.aborted_at {
        return Err(CliError::Numeric(format!("non-finite loss or gradient at step {step}")));
    }
    Ok(())
}

fn cmd_finetune(ctx: &RunContext, config: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let f = &config.finetune;
    let (model, schedule) = config.model.load()?;
    let mut cfg = FinetuneConfig::new(f.estimator, f.batch, f.steps, f.learning_rate);
    cfg.adam = f.adam;
    cfg.clip = f.clip;
    cfg.eval_every = f.eval_every;
    cfg.held_out = f.held_out;
    let outcome = finetune_params(&model, &schedule, &f.objective, &cfg, ctx.seed)?;
    out.write_csv("history.csv", |buf| outcome.write_log_csv(buf))?;
    out.write_csv("held_out.csv", |buf| outcome.write_held_out_csv(buf))?;
    match &outcome.field {
        Model::Mlp(d) => out.write("model.ckpt", &to_bytes(d, &schedule), false)?,
        other => {
            let json = serde_json::to_string(&other.flat_params()).map_err(std::io::Error::other)?;
            out.write("params.json", json.as_bytes(), false)?;
        }
    }
    let mut plot = LinePlot::new("Reward fine-tuning", "step", "mean reward");
    plot.push(
        "train batch",
        outcome.history.iter().map(|r| (r.step as f64, r.reward)).collect(),
    );
    plot.push(
        "held out",
        outcome.held_out.iter().map(|r| (r.step as f64, r.reward)).collect(),
    );
    out.write("reward.svg", plot.to_svg().as_bytes(), false)?;
    ctx.say(format!(
        "held-out reward {} -> {} ({} skipped steps)",
        format_f64(outcome.initial_held_out()),
        format_f64(outcome.final_held_out()),
        outcome.skipped_steps()
    ));
    Ok(())
}
