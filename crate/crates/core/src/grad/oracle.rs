use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{final_state, EstimatorSpec, GradError, GradTarget, GradientReport, Problem};
use crate::array::DenseArray;
use crate::model::VelocityField;
use crate::sampler::sample_from;
use crate::tape::Tape;

/// Largest stacked state `(m + 1) * D` the implicit-function oracle will
/// materialize.
pub const IFT_DIM_LIMIT: usize = 4096;

/// `|a - b| / |b|`, or `|a - b|` when `b` vanishes.
pub fn relative_error(a: &DenseArray, b: &DenseArray) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = b.l2_norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Jacobians of `u(x_i, t_i)` at one state: `(du/dx [D x D], du/dtheta [D x P])`.
pub(crate) fn velocity_jacobians<V: VelocityField>(
    problem: &Problem<'_, V>,
    x: &DenseArray,
    n: usize,
    with_params: bool,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>), GradError> {
    let mut tape = Tape::new();
    let params = if with_params {
        problem.field.bind_params(&mut tape)
    } else {
        problem
            .field
            .param_arrays()
            .into_iter()
            .map(|p| tape.constant(p))
            .collect()
    };
    let xv = tape.variable(x.clone());
    let u = problem.field.velocity_on_tape(
        problem.schedule,
        &mut tape,
        &params,
        xv,
        problem.schedule.time(n),
    )?;
    let dim = x.len();
    let p = problem.field.param_count();
    let mut jx = DMatrix::zeros(dim, dim);
    let mut jt = with_params.then(|| DMatrix::zeros(dim, p));
    for c in 0..dim {
        let mut unit = vec![0.0; dim];
        unit[c] = 1.0;
        let e = DenseArray::new(x.shape().to_vec(), unit).expect("unit shape");
        let g = tape.vjp(u, &e)?;
        for (k, v) in g.wrt(xv).data().iter().enumerate() {
            jx[(c, k)] = *v;
        }
        if let Some(jt) = jt.as_mut() {
            for (k, v) in g.flatten(&params).iter().enumerate() {
                jt[(c, k)] = *v;
            }
        }
    }
    Ok((jx, jt))
}

/// The stacked fixed-point system at the sequential trajectory from
/// `start` (grid index `m`), with state `s = (x_0, ..., x_{m-1})` and `x_m`
/// treated as an external input:
/// `F_n(s) = x_m - (1/N) sum_{i=n+1..m} u(x_i, i/N)`.
pub(crate) struct StackedSystem {
    /// `dF/ds`, `[mD, mD]`, strictly block upper triangular.
    pub dfds: DMatrix<f64>,
    /// `dF/dx_m`, `[mD, D]`.
    pub dfdx: DMatrix<f64>,
    /// `dF/dtheta`, `[mD, P]`, when requested.
    pub dfdtheta: Option<DMatrix<f64>>,
    /// `dJ/ds`, nonzero only in the `x_0` block.
    pub djds: DVector<f64>,
    pub objective_value: f64,
}

pub(crate) fn stacked_system<V: VelocityField>(
    problem: &Problem<'_, V>,
    m: usize,
    with_params: bool,
) -> Result<StackedSystem, GradError> {
    let d = problem.start.len();
    let size = (m + 1) * d;
    if size > IFT_DIM_LIMIT {
        return Err(GradError::TooLarge {
            size,
            limit: IFT_DIM_LIMIT,
        });
    }
    let states = sample_from(problem.field, problem.schedule, problem.start, m)?;
    let h = problem.schedule.step_size();
    let p = problem.field.param_count();
    let mut jac_x = Vec::with_capacity(m);
    let mut jac_t = Vec::with_capacity(m);
    for (i, x) in states.iter().enumerate().skip(1) {
        let (jx, jt) = velocity_jacobians(problem, x, i, with_params)?;
        jac_x.push(jx);
        jac_t.push(jt);
    }
    let md = m * d;
    let mut dfds = DMatrix::zeros(md, md);
    let mut dfdx = DMatrix::zeros(md, d);
    for n in 0..m {
        for i in (n + 1)..m {
            let block = &jac_x[i - 1] * (-h);
            dfds.view_mut((n * d, i * d), (d, d)).copy_from(&block);
        }
        let top = DMatrix::identity(d, d) - &jac_x[m - 1] * h;
        dfdx.view_mut((n * d, 0), (d, d)).copy_from(&top);
    }
    let dfdtheta = if with_params {
        let mut out = DMatrix::zeros(md, p);
        // row block n = -(1/N) sum_{i>n} J_theta(i), accumulated from the top
        let mut acc = DMatrix::zeros(d, p);
        for n in (0..m).rev() {
            acc += jac_t[n].as_ref().expect("parameter jacobian");
            out.view_mut((n * d, 0), (d, p)).copy_from(&(&acc * (-h)));
        }
        Some(out)
    } else {
        None
    };
    let (value, g) = problem.objective.value_and_gradient(&states[0])?;
    let mut djds = DVector::zeros(md);
    for (k, v) in g.data().iter().enumerate() {
        djds[k] = *v;
    }
    Ok(StackedSystem {
        dfds,
        dfdx,
        dfdtheta,
        djds,
        objective_value: value,
    })
}

/// Solve `(I - dF/ds)^T v = dJ/ds`.
pub(crate) fn adjoint(sys: &StackedSystem) -> Result<DVector<f64>, GradError> {
    let n = sys.dfds.nrows();
    let lhs = (DMatrix::identity(n, n) - &sys.dfds).transpose();
    lhs.lu().solve(&sys.djds).ok_or(GradError::Singular)
}

/// Implicit-function gradient: `v^T dF/d(target)` with `v` from the
/// stacked linear system. Exact, because the system is triangular.
pub fn grad_ift_oracle<V: VelocityField>(
    problem: &Problem<'_, V>,
    target: GradTarget,
) -> Result<GradientReport, GradError> {
    let started = Instant::now();
    target.validate(problem.schedule)?;
    let m = target.start_step(problem.schedule);
    let with_params = matches!(target, GradTarget::Parameters);
    let sys = stacked_system(problem, m, with_params)?;
    let v = adjoint(&sys)?;
    let gradient = match target {
        GradTarget::Latent { .. } => {
            let g = sys.dfdx.tr_mul(&v);
            DenseArray::new(problem.start.shape().to_vec(), g.iter().copied().collect())
                .expect("latent shape")
        }
        GradTarget::Parameters => {
            let g = sys.dfdtheta.as_ref().expect("parameter block").tr_mul(&v);
            DenseArray::vector(g.iter().copied().collect())
        }
    };
    let mut report =
        GradientReport::new(gradient, EstimatorSpec::IftOracle, problem.seed, sys.objective_value);
    report.wall_time_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Forward map differentiated by the finite-difference oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdMap {
    /// The actual sampling chain.
    TrueMap,
    /// Latent surrogate: only the first step's velocity sees the perturbed
    /// start; every other velocity is frozen at its unperturbed value.
    SdoLatentSurrogate,
    /// Parameter surrogate: velocity `i'` sees the perturbed parameters at
    /// its unperturbed input state; all other velocities are frozen.
    SdoStepSurrogate(usize),
    /// Parameter surrogate with every velocity seeing the perturbed
    /// parameters at unperturbed input states.
    SdoFullSumSurrogate,
}

/// Central differences of `J(x_0)` along every coordinate of the target.
pub fn grad_fd_oracle<V: VelocityField>(
    problem: &Problem<'_, V>,
    target: GradTarget,
    map: FdMap,
    h: f64,
) -> Result<DenseArray, GradError> {
    target.validate(problem.schedule)?;
    if !(h > 0.0) {
        return Err(GradError::Request(format!("finite-difference step must be positive, got {h}")));
    }
    let top = target.start_step(problem.schedule);
    let (field, schedule) = (problem.field, problem.schedule);
    match (target, map) {
        (GradTarget::Latent { .. }, FdMap::SdoStepSurrogate(_) | FdMap::SdoFullSumSurrogate)
        | (GradTarget::Parameters, FdMap::SdoLatentSurrogate) => {
            return Err(GradError::Request(format!("{map:?} does not apply to {target:?}")));
        }
        _ => {}
    }
    if let FdMap::SdoStepSurrogate(i) = map {
        if i == 0 || i > top {
            return Err(GradError::Request(format!("step {i} outside 1..={top}")));
        }
    }
    let base = sample_from(field, schedule, problem.start, top)?;
    let base_u: Vec<DenseArray> = (0..=top)
        .map(|n| {
            if n == 0 {
                Ok(DenseArray::zeros(problem.start.shape()))
            } else {
                field.velocity(schedule, &base[n], schedule.time(n))
            }
        })
        .collect::<Result<_, _>>()?;
    let step = schedule.step_size();

    // x_0 under the chosen map for a perturbed field and start.
    let forward = |f: &V, start: &DenseArray| -> Result<DenseArray, GradError> {
        if map == FdMap::TrueMap {
            return final_state(f, schedule, start, top);
        }
        let mut x = start.clone();
        for n in (1..=top).rev() {
            let live = match map {
                FdMap::SdoLatentSurrogate => n == top,
                FdMap::SdoStepSurrogate(i) => n == i,
                FdMap::SdoFullSumSurrogate => true,
                FdMap::TrueMap => unreachable!(),
            };
            let u = if !live {
                base_u[n].clone()
            } else if map == FdMap::SdoLatentSurrogate {
                f.velocity(schedule, &x, schedule.time(n))?
            } else {
                f.velocity(schedule, &base[n], schedule.time(n))?
            };
            x = x.sub(&u.scale(step)).expect("state shape");
        }
        Ok(x)
    };
    let objective = problem.objective;
    let eval = |j: usize, delta: f64| -> Result<f64, GradError> {
        let x0 = match target {
            GradTarget::Latent { .. } => {
                let mut data = problem.start.data().to_vec();
                data[j] += delta;
                let start = DenseArray::new(problem.start.shape().to_vec(), data)
                    .expect("latent shape");
                forward(field, &start)?
            }
            GradTarget::Parameters => {
                let mut flat = field.flat_params();
                flat[j] += delta;
                let mut f = field.clone();
                f.set_flat_params(&flat)?;
                forward(&f, problem.start)?
            }
        };
        Ok(objective.value(&x0)?)
    };
    let dims = match target {
        GradTarget::Latent { .. } => problem.start.len(),
        GradTarget::Parameters => field.param_count(),
    };
    let grads: Vec<f64> = (0..dims)
        .into_par_iter()
        .map(|j| Ok((eval(j, h)? - eval(j, -h)?) / (2.0 * h)))
        .collect::<Result<_, GradError>>()?;
    Ok(match target {
        GradTarget::Latent { .. } => {
            DenseArray::new(problem.start.shape().to_vec(), grads).expect("latent shape")
        }
        GradTarget::Parameters => DenseArray::vector(grads),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{grad_bptt, grad_sdo_latent, grad_sdo_params, TimestepSelection};
    use crate::model::{Denoiser, LinearVelocity, Mlp, Parameterization, Schedule, ZeroVelocity};
    use crate::opt::Objective;
    use crate::rng::{normal_array, stream_rng, Stream};

    fn half_square() -> Objective {
        Objective::QuadraticTarget { target: vec![0.0] }
    }

    #[test]
    fn fd_exact_on_quadratic_through_identity() {
        let s = Schedule::straight_line(3).unwrap();
        let f = ZeroVelocity::new(1);
        let j = half_square();
        let x = DenseArray::vector(vec![3.0]);
        let p = Problem::new(&f, &s, &j, &x);
        for h in [1e-5, 0.1, 1.0] {
            let g = grad_fd_oracle(&p, GradTarget::Latent { step: 3 }, FdMap::TrueMap, h).unwrap();
            assert!((g.item() - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_oracle_values() {
        let s = Schedule::straight_line(2).unwrap();
        let f = LinearVelocity::new(1.0, 1);
        let j = half_square();
        let x = DenseArray::vector(vec![1.0]);
        let p = Problem::new(&f, &s, &j, &x);
        let latent = GradTarget::Latent { step: 2 };
        let fd = grad_fd_oracle(&p, latent, FdMap::TrueMap, 1e-5).unwrap();
        assert!((fd.item() - 0.0625).abs() < 1e-10);
        let sur = grad_fd_oracle(&p, latent, FdMap::SdoLatentSurrogate, 1e-5).unwrap();
        assert!((sur.item() - 0.125).abs() < 1e-10);
        assert!((grad_ift_oracle(&p, latent).unwrap().gradient.item() - 0.0625).abs() < 1e-15);
        let ift = grad_ift_oracle(&p, GradTarget::Parameters).unwrap();
        assert!((ift.gradient.item() + 0.125).abs() < 1e-15);
    }

    #[test]
    fn ift_zero_velocity_is_objective_gradient() {
        let s = Schedule::vp_linear(0.1, 20.0, 5).unwrap();
        let f = ZeroVelocity::new(2);
        let j = Objective::QuadraticTarget {
            target: vec![1.0, 1.0],
        };
        let x = DenseArray::vector(vec![-2.0, 0.5]);
        let p = Problem::new(&f, &s, &j, &x);
        let g = grad_ift_oracle(&p, GradTarget::Latent { step: 5 }).unwrap();
        assert_eq!(g.gradient, j.gradient(&x).unwrap());
    }

    #[test]
    fn ift_guard_rejects_large_systems() {
        let s = Schedule::straight_line(3000).unwrap();
        let f = ZeroVelocity::new(2);
        let j = Objective::QuadraticTarget {
            target: vec![0.0, 0.0],
        };
        let x = DenseArray::vector(vec![0.0, 0.0]);
        let p = Problem::new(&f, &s, &j, &x);
        assert!(matches!(
            grad_ift_oracle(&p, GradTarget::Parameters),
            Err(GradError::TooLarge { .. })
        ));
    }

    #[test]
    fn small_network_oracles_agree() {
        let mlp = Mlp::init(2, &[6], &mut stream_rng(5, Stream::Init)).unwrap();
        let d = Denoiser::new(mlp, Parameterization::Epsilon);
        let s = Schedule::vp_linear(0.1, 20.0, 5).unwrap();
        let j = Objective::RbfReward {
            center: vec![0.3, -0.2],
            width: 1.0,
        };
        let x = normal_array(&mut stream_rng(5, Stream::Noise), &[2]);
        let p = Problem::new(&d, &s, &j, &x);
        for target in [GradTarget::Latent { step: 5 }, GradTarget::Parameters] {
            let bptt = grad_bptt(&p, target).unwrap().gradient;
            let ift = grad_ift_oracle(&p, target).unwrap().gradient;
            let fd = grad_fd_oracle(&p, target, FdMap::TrueMap, 1e-5).unwrap();
            assert!(relative_error(&ift, &bptt) < 1e-10);
            assert!(relative_error(&fd, &bptt) < 1e-6);
        }
        let sdo = grad_sdo_latent(&p, 5).unwrap().gradient;
        let fd = grad_fd_oracle(&p, GradTarget::Latent { step: 5 }, FdMap::SdoLatentSurrogate, 1e-5)
            .unwrap();
        assert!(relative_error(&sdo, &fd) < 1e-6);
        let mut rng = stream_rng(0, Stream::Timestep);
        for i in 1..=5 {
            let sdo = grad_sdo_params(&p, TimestepSelection::Fixed(i), &mut rng).unwrap().gradient;
            let fd = grad_fd_oracle(&p, GradTarget::Parameters, FdMap::SdoStepSurrogate(i), 1e-5)
                .unwrap();
            assert!(relative_error(&sdo, &fd) < 1e-6, "step {i}");
        }
        let full = grad_sdo_params(&p, TimestepSelection::FullSum, &mut rng).unwrap().gradient;
        let fd = grad_fd_oracle(&p, GradTarget::Parameters, FdMap::SdoFullSumSurrogate, 1e-5).unwrap();
        assert!(relative_error(&full, &fd) < 1e-6);
    }

    #[test]
    fn mismatched_surrogate_rejected() {
        let s = Schedule::straight_line(2).unwrap();
        let f = LinearVelocity::new(1.0, 1);
        let j = half_square();
        let x = DenseArray::vector(vec![1.0]);
        let p = Problem::new(&f, &s, &j, &x);
        assert!(grad_fd_oracle(&p, GradTarget::Parameters, FdMap::SdoLatentSurrogate, 1e-5).is_err());
        assert!(grad_fd_oracle(&p, GradTarget::Latent { step: 2 }, FdMap::TrueMap, 0.0).is_err());
    }
}
