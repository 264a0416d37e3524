//! Offline synthesis of the optimal gain schedules.
//!
//! The backward pass alternates two Riccati-type recursions: a global one on
//! the assembled `(A, B)` pair that yields the common gains `K[t]` applied to
//! the shared state estimate, and one per subsystem on `(A[n], B_local[n])`
//! that yields the deviation gains applied to the local estimation error
//! `x[n] - xhat[n]`. The subsystem recursion propagates a mixture
//! `(1 - p[n]) * P_nn[t+1] + p[n] * P_drop[n][t+1]` of the global cost-to-go
//! block and the drop-branch cost-to-go, which is where the channel failure
//! probabilities enter. Noise covariances never touch the gains; they only
//! accumulate into the scalar offsets `e[t]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fileio;
use crate::model::{assemble_global, symmetrize, Dims, ModelSpec, NoiseSpec};

/// Cap on the (estimated) condition number of the inner solve.
pub const CONDITION_CAP: f64 = 1e12;

/// The synthesized controller: one set of matrices per time step.
///
/// Index ranges: `p`, `p_drop[n]`, and `noise_offset` run over `t = 0..=T+1`
/// with the `T+1` entries identically zero; `k` and `k_drop[n]` run over
/// `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub dims: Dims,
    pub failure_probs: Vec<f64>,
    /// Global cost-to-go matrices for the common-estimate component.
    pub p: Vec<DMatrix<f64>>,
    /// Common gains mapping the stacked estimate to `vec(u0, ubar[1..N])`.
    pub k: Vec<DMatrix<f64>>,
    /// Per-subsystem cost-to-go matrices of the drop branch, `[n][t]`.
    pub p_drop: Vec<Vec<DMatrix<f64>>>,
    /// Per-subsystem deviation gains applied to `x[n] - xhat[n]`, `[n][t]`.
    pub k_drop: Vec<Vec<DMatrix<f64>>>,
    /// Noise-driven additive cost terms `e[t]`.
    pub noise_offset: Vec<f64>,
    /// Content hash of the model this schedule was synthesized from.
    pub model_hash: String,
}

/// Per-subsystem mean vector and covariance matrix: the sufficient statistic
/// the value function needs from a belief.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefSummary {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl BeliefSummary {
    /// The prior belief `(mu0, sigma0)` of a model's initial state.
    pub fn initial(noise: &NoiseSpec) -> Self {
        Self {
            means: noise.mu0.clone(),
            covs: noise.sigma0.clone(),
        }
    }
}

/// `tr(a * b)` without forming the product.
pub(crate) fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(b.ncols(), a.nrows());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Solve `m x = rhs` for symmetric positive-definite `m`, failing when `m`
/// is not PD or its estimated condition number exceeds [`CONDITION_CAP`].
fn solve_spd(m: DMatrix<f64>, rhs: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let chol = m.cholesky().ok_or_else(|| Error::IllConditioned {
        context: context.to_string(),
        detail: "Cholesky factorization failed (matrix not positive definite)".to_string(),
    })?;
    let diag = chol.l_dirty();
    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0f64;
    for i in 0..diag.nrows() {
        let d = diag[(i, i)];
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    let cond_estimate = (dmax / dmin).powi(2);
    if !cond_estimate.is_finite() || cond_estimate > CONDITION_CAP {
        return Err(Error::IllConditioned {
            context: context.to_string(),
            detail: format!("estimated condition number {cond_estimate:.3e} exceeds {CONDITION_CAP:.0e}"),
        });
    }
    Ok(chol.solve(rhs))
}

/// The Riccati-map operator:
/// `r11 + aᵀpa - (r12 + aᵀpb)(r22 + bᵀpb)⁻¹(r12ᵀ + bᵀpa)`, symmetrized.
pub fn omega(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r11: &DMatrix<f64>,
    r22: &DMatrix<f64>,
    r12: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let pa = p * a;
    let pb = p * b;
    let inner = r22 + b.tr_mul(&pb);
    let rhs = r12.transpose() + b.tr_mul(&pa);
    let x = solve_spd(inner, &rhs, "omega")?;
    let cross = r12 + a.tr_mul(&pb);
    Ok(symmetrize(&(r11 + a.tr_mul(&pa) - cross * x)))
}

/// The gain operator: `-(r22 + bᵀpb)⁻¹(r12ᵀ + bᵀpa)`.
pub fn psi(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r22: &DMatrix<f64>,
    r12: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let inner = r22 + b.tr_mul(&(p * b));
    let rhs = r12.transpose() + b.tr_mul(&(p * a));
    Ok(-solve_spd(inner, &rhs, "psi")?)
}

fn with_context<T>(res: Result<T>, context: String) -> Result<T> {
    res.map_err(|e| match e {
        Error::IllConditioned { detail, .. } => Error::IllConditioned { context, detail },
        other => other,
    })
}

/// Run the backward pass and return the full gain schedule.
pub fn synthesize(model: &ModelSpec) -> Result<GainSchedule> {
    let (a_global, b_global) = assemble_global(model)?;
    let dims = model.dims.clone();
    let horizon = dims.horizon;
    let n_sub = dims.n_subsystems();
    let dx = dims.total_state_dim();
    let du = dims.total_action_dim();

    let mut p = vec![DMatrix::zeros(dx, dx); horizon + 2];
    let mut k = vec![DMatrix::zeros(du, dx); horizon + 1];
    let mut p_drop: Vec<Vec<DMatrix<f64>>> = (0..n_sub)
        .map(|n| {
            let d = dims.state_dim(n);
            vec![DMatrix::zeros(d, d); horizon + 2]
        })
        .collect();
    let mut k_drop: Vec<Vec<DMatrix<f64>>> = (0..n_sub)
        .map(|n| vec![DMatrix::zeros(dims.local_action_dim(n), dims.state_dim(n)); horizon + 1])
        .collect();
    let mut noise_offset = vec![0.0; horizon + 2];

    for t in (0..=horizon).rev() {
        let r = model.cost_at(t);
        let r_xx = r.view((0, 0), (dx, dx)).into_owned();
        let r_xu = r.view((0, dx), (dx, du)).into_owned();
        let r_uu = r.view((dx, dx), (du, du)).into_owned();

        p[t] = with_context(
            omega(&p[t + 1], &a_global, &b_global, &r_xx, &r_uu, &r_xu),
            format!("t = {t}, global recursion"),
        )?;
        k[t] = with_context(
            psi(&p[t + 1], &a_global, &b_global, &r_uu, &r_xu),
            format!("t = {t}, global recursion"),
        )?;

        let mut offset_step = 0.0;
        for n in 0..n_sub {
            let d = dims.state_dim(n);
            let sx = dims.state_offset(n);
            let su = dx + dims.local_action_offset(n);
            let d_u = dims.local_action_dim(n);
            let p_nn = p[t + 1].view((sx, sx), (d, d)).into_owned();
            let fail = model.channel.failure_probs[n];
            let blend = &p_nn * (1.0 - fail) + &p_drop[n][t + 1] * fail;

            let r11 = r.view((sx, sx), (d, d)).into_owned();
            let r12 = r.view((sx, su), (d, d_u)).into_owned();
            let r22 = r.view((su, su), (d_u, d_u)).into_owned();
            let plant = &model.plants[n];

            p_drop[n][t] = with_context(
                omega(&blend, &plant.a, &plant.b_local, &r11, &r22, &r12),
                format!("t = {t}, subsystem {n}"),
            )?;
            k_drop[n][t] = with_context(
                psi(&blend, &plant.a, &plant.b_local, &r22, &r12),
                format!("t = {t}, subsystem {n}"),
            )?;

            offset_step += trace_product(&blend, model.noise.sigma_w_at(n, t));
        }
        noise_offset[t] = noise_offset[t + 1] + offset_step;
    }

    Ok(GainSchedule {
        failure_probs: model.channel.failure_probs.clone(),
        model_hash: fileio::model_hash(model),
        dims,
        p,
        k,
        p_drop,
        k_drop,
        noise_offset,
    })
}

impl GainSchedule {
    pub fn horizon(&self) -> usize {
        self.dims.horizon
    }

    /// Optimal cost-to-go at time `t` for a belief with the given
    /// per-subsystem means and covariances:
    /// `mᵀ P[t] m + Σ_n tr(P_drop[n][t] S[n]) + e[t]`.
    ///
    /// Identically zero at `t = T + 1`.
    pub fn value_function(&self, t: usize, belief: &BeliefSummary) -> Result<f64> {
        if t > self.horizon() + 1 {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.horizon(),
            });
        }
        let dims = &self.dims;
        let n_sub = dims.n_subsystems();
        if belief.means.len() != n_sub || belief.covs.len() != n_sub {
            return Err(Error::DimMismatch {
                context: "belief subsystem count".to_string(),
                expected: n_sub,
                got: belief.means.len(),
            });
        }
        let mut stacked = DVector::zeros(dims.total_state_dim());
        for n in 0..n_sub {
            let d = dims.state_dim(n);
            if belief.means[n].len() != d
                || belief.covs[n].nrows() != d
                || belief.covs[n].ncols() != d
            {
                return Err(Error::DimMismatch {
                    context: format!("belief block {n}"),
                    expected: d,
                    got: belief.means[n].len(),
                });
            }
            stacked
                .rows_mut(dims.state_offset(n), d)
                .copy_from(&belief.means[n]);
        }
        let mut value = stacked.dot(&(&self.p[t] * &stacked)) + self.noise_offset[t];
        for n in 0..n_sub {
            value += trace_product(&self.p_drop[n][t], &belief.covs[n]);
        }
        Ok(value)
    }

    /// Expected total closed-loop cost of running this schedule on `model`,
    /// i.e. the value function averaged over the time-0 uplink outcomes:
    /// `mu0ᵀ P[0] mu0 + Σ_n tr(((1-p[n]) P[0]_nn + p[n] P_drop[n][0]) sigma0[n]) + e[0]`.
    ///
    /// This differs from `value_function(0, (mu0, sigma0))` whenever
    /// `sigma0 != 0`: the links already deliver (or drop) the initial states
    /// before the first action is taken.
    ///
    /// The closed form is the optimality identity, so it is exact only when
    /// this schedule was synthesized from `model`'s `(A, B, R, p)`; changing
    /// the noise moments or the distribution family is fine (the gains never
    /// see them). For arbitrary gain assignments use `oracle::exact_cost`.
    pub fn expected_total_cost(&self, model: &ModelSpec) -> Result<f64> {
        if model.dims != self.dims {
            return Err(Error::ArtifactMismatch(
                "model dimensions do not match the schedule".to_string(),
            ));
        }
        let dims = &self.dims;
        let mut stacked = DVector::zeros(dims.total_state_dim());
        for n in 0..dims.n_subsystems() {
            stacked
                .rows_mut(dims.state_offset(n), dims.state_dim(n))
                .copy_from(&model.noise.mu0[n]);
        }
        let mut value = stacked.dot(&(&self.p[0] * &stacked)) + self.noise_offset[0];
        for n in 0..dims.n_subsystems() {
            let d = dims.state_dim(n);
            let off = dims.state_offset(n);
            let p_nn = self.p[0].view((off, off), (d, d)).into_owned();
            let fail = model.channel.failure_probs[n];
            let blend = &p_nn * (1.0 - fail) + &self.p_drop[n][0] * fail;
            value += trace_product(&blend, &model.noise.sigma0[n]);
        }
        Ok(value)
    }
}
