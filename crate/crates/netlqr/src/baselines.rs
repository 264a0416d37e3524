//! Special-case reductions used as independent cross-checks.
//!
//! Each of these is a claim about the synthesized strategies in a degenerate
//! regime: always-active links reduce to centralized LQ control,
//! always-failed links make the deviation gains block-diagonal with no remote
//! deviation, structurally decoupled problems split into per-subsystem
//! problems, and controllers embedded as action-free take identically zero
//! actions. `centralized_lqr` is deliberately written as its own recursion
//! (joint Hessian + Schur complement) rather than through the `synthesis`
//! operators, so agreement between the two is a meaningful test.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fileio;
use crate::model::{
    assemble_global, symmetrize, ChannelSpec, CostSchedule, Dims, ModelSpec, NoiseCovariance,
    NoiseSpec, PlantBlock,
};
use crate::oracle::{exact_cost, LinearPolicy};
use crate::simulator::{simulate_episode, CustomNoise, NoiseSampler};
use crate::synthesis::{synthesize, trace_product, GainSchedule};

/// Standard finite-horizon LQ backward recursion on the assembled `(A, B)`,
/// treating every uplink as always active.
///
/// Independent code path from [`synthesize`]: each step forms the joint
/// quadratic `H = R + [A B]ᵀ P [A B]` and eliminates the action block by a
/// Schur complement. Drop-branch matrices are zero (they never engage when
/// every link delivers) and the stored failure probabilities are zero.
pub fn centralized_lqr(model: &ModelSpec) -> Result<GainSchedule> {
    let (a, b) = assemble_global(model)?;
    let dims = model.dims.clone();
    let horizon = dims.horizon;
    let dx = dims.total_state_dim();
    let du = dims.total_action_dim();

    let mut ab = DMatrix::zeros(dx, dx + du);
    ab.view_mut((0, 0), (dx, dx)).copy_from(&a);
    ab.view_mut((0, dx), (dx, du)).copy_from(&b);

    let mut p = vec![DMatrix::zeros(dx, dx); horizon + 2];
    let mut k = vec![DMatrix::zeros(du, dx); horizon + 1];
    let mut noise_offset = vec![0.0; horizon + 2];
    for t in (0..=horizon).rev() {
        let h = model.cost_at(t) + ab.tr_mul(&(&p[t + 1] * &ab));
        let hxx = h.view((0, 0), (dx, dx)).into_owned();
        let hxu = h.view((0, dx), (dx, du)).into_owned();
        let huu = h.view((dx, dx), (du, du)).into_owned();
        let chol = huu.cholesky().ok_or_else(|| Error::IllConditioned {
            context: format!("t = {t}, centralized recursion"),
            detail: "action block of the joint Hessian is not positive definite".to_string(),
        })?;
        k[t] = -chol.solve(&hxu.transpose());
        p[t] = symmetrize(&(&hxx + &hxu * &k[t]));

        let mut step = 0.0;
        for n in 0..dims.n_subsystems() {
            let off = dims.state_offset(n);
            let d = dims.state_dim(n);
            let p_nn = p[t + 1].view((off, off), (d, d)).into_owned();
            step += trace_product(&p_nn, model.noise.sigma_w_at(n, t));
        }
        noise_offset[t] = noise_offset[t + 1] + step;
    }

    let n_sub = dims.n_subsystems();
    Ok(GainSchedule {
        failure_probs: vec![0.0; n_sub],
        model_hash: fileio::model_hash(model),
        p,
        k,
        p_drop: (0..n_sub)
            .map(|n| vec![DMatrix::zeros(dims.state_dim(n), dims.state_dim(n)); horizon + 2])
            .collect(),
        k_drop: (0..n_sub)
            .map(|n| {
                vec![DMatrix::zeros(dims.local_action_dim(n), dims.state_dim(n)); horizon + 1]
            })
            .collect(),
        noise_offset,
        dims,
    })
}

/// Gain schedule for the regime where every uplink always fails: the
/// recursions with `p[n] = 1`. Exposed separately so the block structure of
/// the deviation gains can be inspected against the always-failed display.
pub fn always_failed_gains(model: &ModelSpec) -> Result<GainSchedule> {
    let mut failed = model.clone();
    failed.channel.failure_probs = vec![1.0; model.dims.n_subsystems()];
    synthesize(&failed)
}

#[derive(Debug, Clone, Serialize)]
pub struct DecoupledReport {
    pub subsystems: usize,
    pub episodes: usize,
    /// Largest entrywise gap between joint and per-subsystem actions across
    /// all shared episodes.
    pub max_action_gap: f64,
    pub pass: bool,
}

/// Replays the exact state/noise realization of a recorded joint episode
/// into a single-subsystem simulation.
struct ReplayNoise {
    initial: DVector<f64>,
    noises: Vec<DVector<f64>>,
}

impl CustomNoise for ReplayNoise {
    fn initial_state(&self, _n: usize, _rng: &mut ChaCha12Rng) -> DVector<f64> {
        self.initial.clone()
    }
    fn process_noise(&self, _n: usize, t: usize, _rng: &mut ChaCha12Rng) -> DVector<f64> {
        self.noises[t].clone()
    }
}

fn is_zero(m: nalgebra::DMatrixView<'_, f64>) -> bool {
    m.iter().all(|&v| v == 0.0)
}

/// Verify that a structurally decoupled model really does split into `N`
/// independent one-plant problems: synthesize the joint problem and each
/// subproblem, replay shared episodes through both, and compare actions.
///
/// Decoupled form requires the remote action to split into `N` equal slices
/// (`N` must divide `d_u[0]`), plant `n` to be driven only by slice `n`, and
/// the cost to be additive across subsystems. Anything else is rejected.
pub fn decoupled_check(model: &ModelSpec) -> Result<DecoupledReport> {
    model.require_valid()?;
    let dims = &model.dims;
    let n_sub = dims.n_subsystems();
    let du0 = dims.remote_action_dim();
    if n_sub == 1 {
        // one subsystem: the joint problem is its own subproblem
        return Ok(DecoupledReport {
            subsystems: 1,
            episodes: 0,
            max_action_gap: 0.0,
            pass: true,
        });
    }
    if !du0.is_multiple_of(n_sub) {
        return Err(Error::NotDecoupled(format!(
            "remote action dimension {du0} does not split into {n_sub} equal slices"
        )));
    }
    let slice = du0 / n_sub;
    for (n, plant) in model.plants.iter().enumerate() {
        for j in 0..du0 {
            if j / slice != n && plant.b_remote.column(j).iter().any(|&v| v != 0.0) {
                return Err(Error::NotDecoupled(format!(
                    "plant {n} is driven by remote slice {}",
                    j / slice
                )));
            }
        }
    }
    let dx = dims.total_state_dim();
    let stages: Vec<&DMatrix<f64>> = match &model.costs {
        CostSchedule::Shared(r) => vec![r],
        CostSchedule::PerStep(rs) => rs.iter().collect(),
    };
    for r in stages {
        for i in 0..n_sub {
            for j in 0..n_sub {
                if i == j {
                    continue;
                }
                let (di, dj) = (dims.state_dim(i), dims.state_dim(j));
                let (oi, oj) = (dims.state_offset(i), dims.state_offset(j));
                let (ui, uj) = (
                    dx + dims.local_action_offset(i),
                    dx + dims.local_action_offset(j),
                );
                let (dui, duj) = (dims.local_action_dim(i), dims.local_action_dim(j));
                let coupled = !is_zero(r.view((oi, oj), (di, dj)))
                    || !is_zero(r.view((ui, uj), (dui, duj)))
                    || !is_zero(r.view((oi, uj), (di, duj)))
                    || !is_zero(r.view((oi, dx + j * slice), (di, slice)))
                    || !is_zero(r.view((ui, dx + j * slice), (dui, slice)))
                    || !is_zero(r.view((dx + i * slice, dx + j * slice), (slice, slice)));
                if coupled {
                    return Err(Error::NotDecoupled(format!(
                        "cost couples subsystems {i} and {j}"
                    )));
                }
            }
        }
    }

    let joint_schedule = synthesize(model)?;
    let subproblems: Vec<ModelSpec> = (0..n_sub).map(|n| split_subproblem(model, n, slice)).collect();
    let sub_schedules = subproblems
        .iter()
        .map(synthesize)
        .collect::<Result<Vec<_>>>()?;

    let episodes = 5;
    let mut max_gap = 0.0f64;
    for seed in 0..episodes {
        let joint = simulate_episode(model, &joint_schedule, seed)?;
        for n in 0..n_sub {
            // recover subsystem n's noise realization from the joint trace
            let mut noises = Vec::with_capacity(dims.horizon);
            for t in 0..dims.horizon {
                let plant = &model.plants[n];
                let predicted = &plant.a * &joint.states[t][n]
                    + &plant.b_local * &joint.local_actions[t][n]
                    + &plant.b_remote * &joint.remote_actions[t];
                noises.push(&joint.states[t + 1][n] - predicted);
            }
            let replay = NoiseSampler::custom(Box::new(ReplayNoise {
                initial: joint.states[0][n].clone(),
                noises,
            }));
            let gammas: Vec<Vec<bool>> =
                joint.gammas.iter().map(|g| vec![g[n]]).collect();
            let sub = crate::simulator::simulate_episode_forced_with_sampler(
                &subproblems[n],
                &sub_schedules[n],
                &replay,
                seed,
                0,
                &gammas,
            )?;
            for t in 0..=dims.horizon {
                let joint_u0_slice = joint.remote_actions[t].rows(n * slice, slice);
                max_gap = max_gap.max((&sub.remote_actions[t] - joint_u0_slice).amax());
                max_gap = max_gap
                    .max((&sub.local_actions[t][0] - &joint.local_actions[t][n]).amax());
            }
        }
    }
    Ok(DecoupledReport {
        subsystems: n_sub,
        episodes: episodes as usize,
        max_action_gap: max_gap,
        pass: max_gap <= 1e-9,
    })
}

fn split_subproblem(model: &ModelSpec, n: usize, slice: usize) -> ModelSpec {
    let dims = &model.dims;
    let dx_n = dims.state_dim(n);
    let du_n = dims.local_action_dim(n);
    let dx = dims.total_state_dim();
    let sx = dims.state_offset(n);
    let su = dx + dims.local_action_offset(n);
    let s0 = dx + n * slice;

    let pick = |r: &DMatrix<f64>| -> DMatrix<f64> {
        // stage order of the subproblem: (x_n, u0 slice n, u_n)
        let spans = [(sx, dx_n), (s0, slice), (su, du_n)];
        let d = dx_n + slice + du_n;
        let mut out = DMatrix::zeros(d, d);
        let mut ro = 0;
        for (rs, rl) in spans {
            let mut co = 0;
            for (cs, cl) in spans {
                out.view_mut((ro, co), (rl, cl)).copy_from(&r.view((rs, cs), (rl, cl)));
                co += cl;
            }
            ro += rl;
        }
        out
    };

    ModelSpec {
        dims: Dims::new(vec![dx_n], vec![slice, du_n], dims.horizon),
        plants: vec![PlantBlock {
            a: model.plants[n].a.clone(),
            b_local: model.plants[n].b_local.clone(),
            b_remote: model.plants[n].b_remote.columns(n * slice, slice).into_owned(),
        }],
        costs: match &model.costs {
            CostSchedule::Shared(r) => CostSchedule::Shared(pick(r)),
            CostSchedule::PerStep(rs) => CostSchedule::PerStep(rs.iter().map(pick).collect()),
        },
        noise: NoiseSpec {
            mu0: vec![model.noise.mu0[n].clone()],
            sigma0: vec![model.noise.sigma0[n].clone()],
            sigma_w: match &model.noise.sigma_w {
                NoiseCovariance::Shared(ms) => NoiseCovariance::Shared(vec![ms[n].clone()]),
                NoiseCovariance::PerStep(ms) => NoiseCovariance::PerStep(vec![ms[n].clone()]),
            },
            family: model.noise.family,
        },
        channel: ChannelSpec {
            failure_probs: vec![model.channel.failure_probs[n]],
        },
    }
}

/// Embed controllers `idle_set` (0 = remote, `n >= 1` = local controller of
/// subsystem `n - 1`) as action-free: their input matrices become zero, their
/// action cost block becomes the identity, and every cross term involving
/// them is zeroed. Post-synthesis their optimal actions are identically zero.
pub fn no_action_embedding(model: &ModelSpec, idle_set: &[usize]) -> ModelSpec {
    let mut out = model.clone();
    let dims = &model.dims;
    let dx = dims.total_state_dim();

    let zero_controller = |r: &mut DMatrix<f64>, offset: usize, width: usize| {
        let total = r.nrows();
        for i in 0..width {
            for j in 0..total {
                r[(dx + offset + i, j)] = 0.0;
                r[(j, dx + offset + i)] = 0.0;
            }
        }
        for i in 0..width {
            r[(dx + offset + i, dx + offset + i)] = 1.0;
        }
    };

    let mut apply = |offset: usize, width: usize| match &mut out.costs {
        CostSchedule::Shared(r) => zero_controller(r, offset, width),
        CostSchedule::PerStep(rs) => {
            for r in rs.iter_mut() {
                zero_controller(r, offset, width);
            }
        }
    };

    for &idle in idle_set {
        if idle == 0 {
            apply(0, dims.remote_action_dim());
        } else {
            let n = idle - 1;
            apply(dims.local_action_offset(n), dims.local_action_dim(n));
        }
    }
    for &idle in idle_set {
        if idle == 0 {
            for plant in out.plants.iter_mut() {
                plant.b_remote.fill(0.0);
            }
        } else {
            out.plants[idle - 1].b_local.fill(0.0);
        }
    }
    out
}

/// Exact-cost comparison between the always-failed and always-active
/// regimes of the same `(A, B, R)`. The ordering is reported, not asserted:
/// cost monotonicity in the failure probability is not a claimed invariant.
pub fn failed_vs_active_costs(model: &ModelSpec) -> Result<(f64, f64)> {
    let mut active = model.clone();
    active.channel.failure_probs = vec![0.0; model.dims.n_subsystems()];
    let mut failed = model.clone();
    failed.channel.failure_probs = vec![1.0; model.dims.n_subsystems()];
    let active_cost = exact_cost(&active, &LinearPolicy::from_schedule(&synthesize(&active)?))?;
    let failed_cost = exact_cost(&failed, &LinearPolicy::from_schedule(&synthesize(&failed)?))?;
    Ok((failed_cost, active_cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::CommonEstimate;
    use crate::model::{random_model, Dims, NoiseFamily};
    use crate::simulator::simulate_episode_forced;
    use rand::{Rng, SeedableRng};

    #[test]
    fn one_step_centralized_gain() {
        let dims = Dims::new(vec![2], vec![1, 1], 0);
        let model = random_model(&dims, (0.0, 3.0), 3).unwrap();
        let schedule = centralized_lqr(&model).unwrap();
        let r = model.cost_at(0);
        let r_xu = r.view((0, 2), (2, 2)).into_owned();
        let r_uu = r.view((2, 2), (2, 2)).into_owned();
        let expect = -r_uu.cholesky().unwrap().solve(&r_xu.transpose());
        assert!((&schedule.k[0] - expect).amax() < 1e-12);
    }

    #[test]
    fn centralized_matches_synthesize_on_random_models() {
        for seed in 0..10 {
            let dims = Dims::new(vec![2, 1], vec![2, 1, 1], 12);
            let model = random_model(&dims, (0.0, 5.0), seed).unwrap();
            let decentralized = synthesize(&model).unwrap();
            let centralized = centralized_lqr(&model).unwrap();
            for t in 0..=dims.horizon {
                let scale = decentralized.k[t].amax().max(1.0);
                assert!(
                    (&decentralized.k[t] - &centralized.k[t]).amax() <= 1e-10 * scale,
                    "seed {seed}, t {t}"
                );
            }
        }
    }

    #[test]
    fn always_failed_equals_synthesis_at_p_one() {
        let dims = Dims::new(vec![1, 2], vec![1, 1, 1], 6);
        let model = random_model(&dims, (0.0, 4.0), 8).unwrap();
        let failed = always_failed_gains(&model).unwrap();
        let mut p1 = model.clone();
        p1.channel.failure_probs = vec![1.0, 1.0];
        let direct = synthesize(&p1).unwrap();
        assert_eq!(failed.k_drop, direct.k_drop);
        assert_eq!(failed.k, direct.k);
    }

    #[test]
    fn always_failed_deviations_have_no_remote_component() {
        // changing a local state with the estimate fixed must not move u0
        let dims = Dims::new(vec![1, 1], vec![2, 1, 1], 3);
        let model = random_model(&dims, (0.0, 2.0), 12).unwrap();
        let schedule = always_failed_gains(&model).unwrap();
        let est = CommonEstimate {
            xhat: vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
            t: 0,
        };
        let base = crate::controller::compute_actions(
            &schedule,
            0,
            &est,
            &[DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
        )
        .unwrap();
        let moved = crate::controller::compute_actions(
            &schedule,
            0,
            &est,
            &[DVector::from_element(1, 9.0), DVector::from_element(1, 4.0)],
        )
        .unwrap();
        assert_eq!(base.remote, moved.remote);
        assert_eq!(base.common_local, moved.common_local);
        // and the deviation only touches its own subsystem
        let one_moved = crate::controller::compute_actions(
            &schedule,
            0,
            &est,
            &[DVector::from_element(1, 9.0), DVector::from_element(1, -1.0)],
        )
        .unwrap();
        assert_eq!(one_moved.local[1], base.local[1]);
        assert_ne!(one_moved.local[0], base.local[0]);
    }

    #[test]
    fn forced_total_failure_never_resets_the_estimate() {
        let dims = Dims::new(vec![1], vec![1, 1], 5);
        let mut model = random_model(&dims, (0.0, 1.5), 14).unwrap();
        model.channel.failure_probs = vec![1.0];
        let schedule = synthesize(&model).unwrap();
        let gammas = vec![vec![false]; 6];
        let tr = simulate_episode_forced(&model, &schedule, 3, 0, &gammas).unwrap();
        // estimate follows the noiseless drop propagation, never the state
        for t in 0..5 {
            let plant = &model.plants[0];
            let predicted = &plant.a * &tr.estimates[t][0]
                + &plant.b_local * &tr.common_local_actions[t][0]
                + &plant.b_remote * &tr.remote_actions[t];
            assert_eq!(tr.estimates[t + 1][0], predicted);
            assert_ne!(tr.estimates[t + 1][0], tr.states[t + 1][0]);
        }
    }

    #[test]
    fn failed_vs_active_cost_ordering_is_reported() {
        let mut worse = 0;
        for seed in 0..10 {
            let dims = Dims::new(vec![1], vec![1, 1], 4);
            let model = random_model(&dims, (0.0, 2.0), seed).unwrap();
            let (failed, active) = failed_vs_active_costs(&model).unwrap();
            if failed >= active {
                worse += 1;
            }
        }
        // observation, not an invariant: losing all information has not
        // helped on any seed so far
        println!("always-failed cost >= always-active cost on {worse}/10 seeds");
    }

    fn decoupled_model(seed: u64) -> ModelSpec {
        let dims = Dims::new(vec![1, 1], vec![2, 1, 1], 4);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut r = DMatrix::zeros(6, 6);
        // stage order (x1, x2, u0a, u0b, u1, u2); couple only within
        // subsystem groups (x1, u0a, u1) and (x2, u0b, u2)
        for group in [[0usize, 2, 4], [1usize, 3, 5]] {
            let g = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let block = symmetrize(&(g.transpose() * &g)) + DMatrix::identity(3, 3) * 0.5;
            for (bi, &i) in group.iter().enumerate() {
                for (bj, &j) in group.iter().enumerate() {
                    r[(i, j)] = block[(bi, bj)];
                }
            }
        }
        let plant = |a: f64, bl: f64, br: (f64, f64)| PlantBlock {
            a: DMatrix::from_element(1, 1, a),
            b_local: DMatrix::from_element(1, 1, bl),
            b_remote: DMatrix::from_row_slice(1, 2, &[br.0, br.1]),
        };
        ModelSpec {
            dims,
            plants: vec![plant(1.1, 0.8, (0.7, 0.0)), plant(0.9, 1.2, (0.0, 0.5))],
            costs: CostSchedule::Shared(r),
            noise: NoiseSpec {
                mu0: vec![DVector::from_element(1, 0.4), DVector::from_element(1, -0.7)],
                sigma0: vec![DMatrix::identity(1, 1) * 0.5, DMatrix::identity(1, 1) * 0.3],
                sigma_w: NoiseCovariance::Shared(vec![
                    DMatrix::identity(1, 1) * 0.2,
                    DMatrix::identity(1, 1) * 0.4,
                ]),
                family: NoiseFamily::Gaussian,
            },
            channel: ChannelSpec {
                failure_probs: vec![0.3, 0.6],
            },
        }
    }

    #[test]
    fn decoupled_two_subsystem_actions_agree() {
        let model = decoupled_model(5);
        let report = decoupled_check(&model).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_action_gap <= 1e-9);
    }

    #[test]
    fn single_subsystem_is_trivially_decoupled() {
        let dims = Dims::new(vec![2], vec![1, 1], 3);
        let model = random_model(&dims, (0.0, 2.0), 6).unwrap();
        assert!(decoupled_check(&model).unwrap().pass);
    }

    #[test]
    fn coupled_cost_is_structurally_rejected() {
        let mut model = decoupled_model(7);
        match &mut model.costs {
            CostSchedule::Shared(r) => {
                r[(0, 1)] = 0.5;
                r[(1, 0)] = 0.5;
            }
            CostSchedule::PerStep(_) => unreachable!(),
        }
        assert!(matches!(decoupled_check(&model), Err(Error::NotDecoupled(_))));
    }

    #[test]
    fn idle_controllers_take_zero_actions() {
        let dims = Dims::new(vec![1, 1], vec![1, 1, 1], 4);
        let model = random_model(&dims, (0.0, 2.0), 9).unwrap();

        let idle_remote = no_action_embedding(&model, &[0]);
        assert!(idle_remote.validate().is_empty());
        let schedule = synthesize(&idle_remote).unwrap();
        for seed in 0..5 {
            let tr = simulate_episode(&idle_remote, &schedule, seed).unwrap();
            for t in 0..=4 {
                assert_eq!(tr.remote_actions[t].amax(), 0.0);
            }
        }

        let idle_local = no_action_embedding(&model, &[2]);
        assert!(idle_local.validate().is_empty());
        let schedule = synthesize(&idle_local).unwrap();
        for seed in 0..5 {
            let tr = simulate_episode(&idle_local, &schedule, seed).unwrap();
            for t in 0..=4 {
                assert_eq!(tr.local_actions[t][1].amax(), 0.0);
                assert_ne!(tr.local_actions[t][0].amax(), 0.0);
            }
        }

        assert_eq!(no_action_embedding(&model, &[]), model);
    }
}
