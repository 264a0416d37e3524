//! Exact (simulation-free) expected-cost evaluation.
//!
//! For any linear policy of the optimal structural form — common component
//! `vec(u0, ubar) = Kc[t] xhat`, local deviation `Kd[n][t] (x[n] - xhat[n])`
//! — the pair `(xhat, e)` with `e[n] = x[n] - xhat[n]` evolves linearly:
//!
//! - between observations, `xhat' = (A + B Kc) xhat` and, per subsystem,
//!   `e'[n] = (A[n] + B_local[n] Kd[n]) e[n] + w[n]`;
//! - each uplink then either resets its pair (`xhat[n] += e[n]`, `e[n] = 0`)
//!   with probability `1 - p[n]` or leaves it alone.
//!
//! The stage cost is a quadratic form in `(xhat, e)`, so propagating the
//! joint first and second moments through these maps gives `E[sum c_t]`
//! exactly (up to floating point). The channel expectation is applied one
//! subsystem at a time; because the resets act on disjoint blocks and the
//! outcomes are independent, this sequential application equals the full
//! `2^N` joint enumeration, which [`exact_cost_enumerated`] implements as an
//! independent reference.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{assemble_global, ModelSpec};
use crate::synthesis::{trace_product, GainSchedule};

/// An arbitrary (not necessarily optimal) gain assignment of the optimal
/// structural form.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    /// `Kc[t]`: maps the stacked estimate to `vec(u0, ubar[1..N])`.
    pub common_gain: Vec<DMatrix<f64>>,
    /// `Kd[n][t]`: maps subsystem `n`'s estimation error to its deviation.
    pub deviation_gain: Vec<Vec<DMatrix<f64>>>,
}

impl LinearPolicy {
    pub fn from_schedule(schedule: &GainSchedule) -> Self {
        Self {
            common_gain: schedule.k.clone(),
            deviation_gain: schedule.k_drop.clone(),
        }
    }

    fn check(&self, model: &ModelSpec) -> Result<()> {
        let dims = &model.dims;
        let horizon = dims.horizon;
        if self.common_gain.len() != horizon + 1 {
            return Err(Error::DimMismatch {
                context: "common gain count".to_string(),
                expected: horizon + 1,
                got: self.common_gain.len(),
            });
        }
        if self.deviation_gain.len() != dims.n_subsystems()
            || self.deviation_gain.iter().any(|g| g.len() != horizon + 1)
        {
            return Err(Error::DimMismatch {
                context: "deviation gain count".to_string(),
                expected: dims.n_subsystems(),
                got: self.deviation_gain.len(),
            });
        }
        for (t, k) in self.common_gain.iter().enumerate() {
            if k.nrows() != dims.total_action_dim() || k.ncols() != dims.total_state_dim() {
                return Err(Error::DimMismatch {
                    context: format!("common gain at t = {t}"),
                    expected: dims.total_action_dim(),
                    got: k.nrows(),
                });
            }
        }
        for n in 0..dims.n_subsystems() {
            for (t, k) in self.deviation_gain[n].iter().enumerate() {
                if k.nrows() != dims.local_action_dim(n) || k.ncols() != dims.state_dim(n) {
                    return Err(Error::DimMismatch {
                        context: format!("deviation gain for subsystem {n} at t = {t}"),
                        expected: dims.local_action_dim(n),
                        got: k.nrows(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// First and (non-central) second moment of the stacked `(xhat, e)` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMoment {
    pub mean: DVector<f64>,
    pub second: DMatrix<f64>,
}

impl JointMoment {
    /// Pre-observation initial moments: `xhat = mu0` deterministically,
    /// `e = x0 - mu0` zero-mean with the initial covariance.
    fn initial(model: &ModelSpec) -> Self {
        let dims = &model.dims;
        let dx = dims.total_state_dim();
        let mut mean = DVector::zeros(2 * dx);
        let mut second = DMatrix::zeros(2 * dx, 2 * dx);
        let mut mu = DVector::zeros(dx);
        for n in 0..dims.n_subsystems() {
            let off = dims.state_offset(n);
            let d = dims.state_dim(n);
            mu.rows_mut(off, d).copy_from(&model.noise.mu0[n]);
            second
                .view_mut((dx + off, dx + off), (d, d))
                .copy_from(&model.noise.sigma0[n]);
        }
        mean.rows_mut(0, dx).copy_from(&mu);
        second.view_mut((0, 0), (dx, dx)).copy_from(&(&mu * mu.transpose()));
        Self { mean, second }
    }
}

/// The reset map for subsystem `n`: `xhat[n] += e[n]`, `e[n] = 0`.
fn reset_map(model: &ModelSpec, n: usize) -> DMatrix<f64> {
    let dims = &model.dims;
    let dx = dims.total_state_dim();
    let mut g = DMatrix::identity(2 * dx, 2 * dx);
    let off = dims.state_offset(n);
    for i in 0..dims.state_dim(n) {
        g[(off + i, dx + off + i)] = 1.0;
        g[(dx + off + i, dx + off + i)] = 0.0;
    }
    g
}

fn apply_mixture_sequential(model: &ModelSpec, resets: &[DMatrix<f64>], m: &mut JointMoment) {
    for (n, reset) in resets.iter().enumerate() {
        let succeed = 1.0 - model.channel.failure_probs[n];
        let fail = model.channel.failure_probs[n];
        let reset_second = reset * &m.second * reset.transpose();
        m.second = reset_second * succeed + &m.second * fail;
        let reset_mean = reset * &m.mean;
        m.mean = reset_mean * succeed + &m.mean * fail;
    }
}

fn apply_mixture_enumerated(model: &ModelSpec, resets: &[DMatrix<f64>], m: &mut JointMoment) {
    let n_sub = model.dims.n_subsystems();
    let dx2 = m.mean.len();
    let mut second = DMatrix::zeros(dx2, dx2);
    let mut mean = DVector::zeros(dx2);
    for mask in 0u64..(1 << n_sub) {
        let mut weight = 1.0;
        let mut g = DMatrix::identity(dx2, dx2);
        for (n, reset) in resets.iter().enumerate() {
            if mask & (1 << n) != 0 {
                weight *= 1.0 - model.channel.failure_probs[n];
                g = reset * g;
            } else {
                weight *= model.channel.failure_probs[n];
            }
        }
        second += (&g * &m.second * g.transpose()) * weight;
        mean += (&g * &m.mean) * weight;
    }
    m.second = second;
    m.mean = mean;
}

/// How the per-subsystem channel expectation is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MixtureMode {
    Sequential,
    Enumerated,
}

fn exact_cost_inner(model: &ModelSpec, policy: &LinearPolicy, mode: MixtureMode) -> Result<f64> {
    model.require_valid()?;
    policy.check(model)?;
    let dims = &model.dims;
    let dx = dims.total_state_dim();
    let du = dims.total_action_dim();
    let horizon = dims.horizon;
    let (a_global, b_global) = assemble_global(model)?;
    let resets: Vec<DMatrix<f64>> = (0..dims.n_subsystems()).map(|n| reset_map(model, n)).collect();

    let mut moment = JointMoment::initial(model);
    let mix = |m: &mut JointMoment| match mode {
        MixtureMode::Sequential => apply_mixture_sequential(model, &resets, m),
        MixtureMode::Enumerated => apply_mixture_enumerated(model, &resets, m),
    };
    mix(&mut moment);

    let mut stage_terms = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let kc = &policy.common_gain[t];
        // stage map: x = xhat + e; u = Kc xhat + blockdiag(Kd) e (no remote deviation)
        let mut stage = DMatrix::zeros(dx + du, 2 * dx);
        stage.view_mut((0, 0), (dx, dx)).copy_from(&DMatrix::identity(dx, dx));
        stage.view_mut((0, dx), (dx, dx)).copy_from(&DMatrix::identity(dx, dx));
        stage.view_mut((dx, 0), (du, dx)).copy_from(kc);
        for n in 0..dims.n_subsystems() {
            stage
                .view_mut(
                    (dx + dims.local_action_offset(n), dx + dims.state_offset(n)),
                    (dims.local_action_dim(n), dims.state_dim(n)),
                )
                .copy_from(&policy.deviation_gain[n][t]);
        }
        let projected = &stage * &moment.second * stage.transpose();
        stage_terms.push(trace_product(model.cost_at(t), &projected));

        if t == horizon {
            break;
        }
        // propagate: xhat through the closed common loop, e through the
        // per-subsystem drop loops, then add process noise and re-observe
        let mut transition = DMatrix::zeros(2 * dx, 2 * dx);
        transition
            .view_mut((0, 0), (dx, dx))
            .copy_from(&(&a_global + &b_global * kc));
        for n in 0..dims.n_subsystems() {
            let off = dims.state_offset(n);
            let d = dims.state_dim(n);
            let plant = &model.plants[n];
            let block = &plant.a + &plant.b_local * &policy.deviation_gain[n][t];
            transition.view_mut((dx + off, dx + off), (d, d)).copy_from(&block);
        }
        moment.second = &transition * &moment.second * transition.transpose();
        moment.mean = &transition * &moment.mean;
        for n in 0..dims.n_subsystems() {
            let off = dims.state_offset(n);
            let d = dims.state_dim(n);
            let mut block = moment.second.view_mut((dx + off, dx + off), (d, d));
            block += model.noise.sigma_w_at(n, t);
        }
        mix(&mut moment);
    }
    Ok(crate::simulator::pairwise_sum(&stage_terms))
}

/// Exact expected total cost `E[sum_t c_t]` of running `policy` on `model`.
pub fn exact_cost(model: &ModelSpec, policy: &LinearPolicy) -> Result<f64> {
    exact_cost_inner(model, policy, MixtureMode::Sequential)
}

/// [`exact_cost`] with the channel expectation taken by explicit enumeration
/// of all `2^N` joint outcomes. Exponential in `N`; kept as the independent
/// reference the sequential path is validated against.
pub fn exact_cost_enumerated(model: &ModelSpec, policy: &LinearPolicy) -> Result<f64> {
    exact_cost_inner(model, policy, MixtureMode::Enumerated)
}

/// Outcome of one perturbation trial.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbationTrial {
    pub t: usize,
    pub target: String,
    pub magnitude: f64,
    pub delta_cost: f64,
    pub directional_derivative: f64,
}

/// Report of [`stationarity_check`].
#[derive(Debug, Clone, Serialize)]
pub struct StationarityReport {
    pub base_cost: f64,
    pub trials: usize,
    pub min_delta_cost: f64,
    pub max_abs_directional_derivative: f64,
    pub passes: bool,
    pub worst_trial: Option<PerturbationTrial>,
}

fn perturbed(policy: &LinearPolicy, t: usize, target: Option<usize>, dir: &DMatrix<f64>, scale: f64) -> LinearPolicy {
    let mut out = policy.clone();
    match target {
        None => out.common_gain[t] += dir * scale,
        Some(n) => out.deviation_gain[n][t] += dir * scale,
    }
    out
}

/// Probe optimality of a synthesized schedule within the linear policy
/// class: random single-entry and random-direction gain perturbations must
/// never lower the exact cost (beyond `-1e-10`), and the central
/// finite-difference directional derivative at the optimum must vanish to
/// `1e-6 * max(1, |J|)`.
pub fn stationarity_check(
    model: &ModelSpec,
    schedule: &GainSchedule,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<StationarityReport> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let policy = LinearPolicy::from_schedule(schedule);
    let base = exact_cost(model, &policy)?;
    let dims = &model.dims;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut min_delta = f64::INFINITY;
    let mut max_dd = 0.0f64;
    let mut worst: Option<PerturbationTrial> = None;
    for _ in 0..trials {
        let t = rng.random_range(0..=dims.horizon);
        // half the trials hit the common gain, half a deviation gain
        let target = if rng.random::<f64>() < 0.5 {
            None
        } else {
            Some(rng.random_range(0..dims.n_subsystems()))
        };
        let (rows, cols) = match target {
            None => (dims.total_action_dim(), dims.total_state_dim()),
            Some(n) => (dims.local_action_dim(n), dims.state_dim(n)),
        };
        let single_entry = rng.random::<f64>() < 0.5;
        let mut dir = DMatrix::zeros(rows, cols);
        if single_entry {
            dir[(rng.random_range(0..rows), rng.random_range(0..cols))] = 1.0;
        } else {
            for v in dir.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let norm = dir.norm();
            dir /= norm;
        }
        let magnitude = 10f64.powf(rng.random_range(-3.0..-1.0));
        let delta = exact_cost(model, &perturbed(&policy, t, target, &dir, magnitude))? - base;
        let plus = exact_cost(model, &perturbed(&policy, t, target, &dir, epsilon))?;
        let minus = exact_cost(model, &perturbed(&policy, t, target, &dir, -epsilon))?;
        let dd = (plus - minus) / (2.0 * epsilon);

        let trial = PerturbationTrial {
            t,
            target: match target {
                None => "common".to_string(),
                Some(n) => format!("deviation[{n}]"),
            },
            magnitude,
            delta_cost: delta,
            directional_derivative: dd,
        };
        if delta < min_delta {
            min_delta = delta;
            worst = Some(trial.clone());
        }
        max_dd = max_dd.max(dd.abs());
    }
    let passes = min_delta >= -1e-10 && max_dd <= 1e-6 * base.abs().max(1.0);
    Ok(StationarityReport {
        base_cost: base,
        trials,
        min_delta_cost: min_delta,
        max_abs_directional_derivative: max_dd,
        passes,
        worst_trial: worst,
    })
}

/// Largest central finite-difference gradient entry of [`exact_cost`] over
/// every gain entry of `policy`.
pub fn max_gradient_entry(model: &ModelSpec, policy: &LinearPolicy, epsilon: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut probe = policy.clone();
    let horizon = model.dims.horizon;
    for t in 0..=horizon {
        for r in 0..probe.common_gain[t].nrows() {
            for c in 0..probe.common_gain[t].ncols() {
                let orig = probe.common_gain[t][(r, c)];
                probe.common_gain[t][(r, c)] = orig + epsilon;
                let plus = exact_cost(model, &probe)?;
                probe.common_gain[t][(r, c)] = orig - epsilon;
                let minus = exact_cost(model, &probe)?;
                probe.common_gain[t][(r, c)] = orig;
                worst = worst.max(((plus - minus) / (2.0 * epsilon)).abs());
            }
        }
        for n in 0..model.dims.n_subsystems() {
            for r in 0..probe.deviation_gain[n][t].nrows() {
                for c in 0..probe.deviation_gain[n][t].ncols() {
                    let orig = probe.deviation_gain[n][t][(r, c)];
                    probe.deviation_gain[n][t][(r, c)] = orig + epsilon;
                    let plus = exact_cost(model, &probe)?;
                    probe.deviation_gain[n][t][(r, c)] = orig - epsilon;
                    let minus = exact_cost(model, &probe)?;
                    probe.deviation_gain[n][t][(r, c)] = orig;
                    worst = worst.max(((plus - minus) / (2.0 * epsilon)).abs());
                }
            }
        }
    }
    Ok(worst)
}
