//! Evaluation of the optimal control laws, plus downlink message accounting.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::CommonEstimate;
use crate::model::ModelSpec;
use crate::synthesis::GainSchedule;

/// All actions taken at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionProfile {
    /// Remote controller's action `u0`.
    pub remote: DVector<f64>,
    /// Common component `ubar[n]` of each local action (what the remote
    /// controller expects each local controller to do).
    pub common_local: Vec<DVector<f64>>,
    /// Actual local actions `u[n] = ubar[n] + K_drop[n][t] (x[n] - xhat[n])`.
    pub local: Vec<DVector<f64>>,
}

/// Evaluate the optimal control laws at time `t`.
///
/// The stacked vector `(u0, ubar[1..N])` is `K[t]` times the stacked
/// estimate; each local controller then adds its deviation term driven by
/// its perfectly observed state.
#[allow(clippy::needless_range_loop)]
pub fn compute_actions(
    schedule: &GainSchedule,
    t: usize,
    est: &CommonEstimate,
    local_states: &[DVector<f64>],
) -> Result<ActionProfile> {
    let dims = &schedule.dims;
    if t > dims.horizon {
        return Err(Error::TimeOutOfRange {
            t,
            horizon: dims.horizon,
        });
    }
    let n_sub = dims.n_subsystems();
    if est.xhat.len() != n_sub || local_states.len() != n_sub {
        return Err(Error::DimMismatch {
            context: "subsystem count".to_string(),
            expected: n_sub,
            got: est.xhat.len().min(local_states.len()),
        });
    }
    let mut stacked = DVector::zeros(dims.total_state_dim());
    for n in 0..n_sub {
        let d = dims.state_dim(n);
        if est.xhat[n].len() != d || local_states[n].len() != d {
            return Err(Error::DimMismatch {
                context: format!("state block {n}"),
                expected: d,
                got: est.xhat[n].len().min(local_states[n].len()),
            });
        }
        stacked.rows_mut(dims.state_offset(n), d).copy_from(&est.xhat[n]);
    }
    let all = &schedule.k[t] * stacked;
    let remote = all.rows(0, dims.remote_action_dim()).into_owned();
    let mut common_local = Vec::with_capacity(n_sub);
    let mut local = Vec::with_capacity(n_sub);
    for n in 0..n_sub {
        let ubar = all
            .rows(dims.local_action_offset(n), dims.local_action_dim(n))
            .into_owned();
        let deviation = &schedule.k_drop[n][t] * (&local_states[n] - &est.xhat[n]);
        local.push(&ubar + deviation);
        common_local.push(ubar);
    }
    Ok(ActionProfile {
        remote,
        common_local,
        local,
    })
}

/// Which downlink payload scheme is smaller for a subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DownlinkScheme {
    /// Send `(xhat[n], ubar[n])`: `d_x[n] + d_u[n]` numbers.
    EstimateAndCommonAction,
    /// Send `(gamma[n], u0_prev, ubar[n])` and let the local controller run
    /// the estimator itself: `1 + d_u[0] + d_u[n]` numbers.
    FlagAndActions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageSize {
    pub subsystem: usize,
    pub estimate_scheme: usize,
    pub flag_scheme: usize,
    pub payload: usize,
    pub scheme: DownlinkScheme,
}

/// Per-subsystem downlink payload sizes under the two transmission schemes,
/// reporting the smaller one. Both are independent of `N`.
pub fn message_sizes(model: &ModelSpec) -> Result<Vec<MessageSize>> {
    model.require_valid()?;
    let dims = &model.dims;
    Ok((0..dims.n_subsystems())
        .map(|n| {
            let estimate_scheme = dims.state_dim(n) + dims.local_action_dim(n);
            let flag_scheme = 1 + dims.remote_action_dim() + dims.local_action_dim(n);
            let (payload, scheme) = if estimate_scheme <= flag_scheme {
                (estimate_scheme, DownlinkScheme::EstimateAndCommonAction)
            } else {
                (flag_scheme, DownlinkScheme::FlagAndActions)
            };
            MessageSize {
                subsystem: n,
                estimate_scheme,
                flag_scheme,
                payload,
                scheme,
            }
        })
        .collect())
}
