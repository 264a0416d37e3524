//! The common state estimate shared by every controller.
//!
//! All controllers see the same uplink outputs and the same past remote
//! actions, so they can all run this estimator and agree on `xhat` without
//! further communication. On a successful transmission the estimate resets to
//! the true state; on a drop it propagates through the plant model driven by
//! the commonly-known action components (the zero-mean deviations and the
//! zero-mean noise drop out of the conditional expectation).

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, NoiseSpec};

/// What the remote controller received on one uplink at one step.
#[derive(Debug, Clone, PartialEq)]
pub enum LinkOutput {
    Received(DVector<f64>),
    Dropped,
}

/// One step's worth of uplink outputs, one entry per subsystem.
pub type UplinkObservation = Vec<LinkOutput>;

/// The shared estimate of every plant state at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonEstimate {
    pub xhat: Vec<DVector<f64>>,
    pub t: usize,
}

fn check_payload(payload: &DVector<f64>, expected: usize, n: usize) -> Result<()> {
    if payload.len() != expected {
        return Err(Error::DimMismatch {
            context: format!("uplink payload for subsystem {n}"),
            expected,
            got: payload.len(),
        });
    }
    Ok(())
}

/// Estimate at time 0: the received state where the link worked, the prior
/// mean where it dropped.
pub fn init_estimate(noise: &NoiseSpec, z0: &[LinkOutput]) -> Result<CommonEstimate> {
    if z0.len() != noise.mu0.len() {
        return Err(Error::DimMismatch {
            context: "uplink observation count".to_string(),
            expected: noise.mu0.len(),
            got: z0.len(),
        });
    }
    let mut xhat = Vec::with_capacity(z0.len());
    for (n, link) in z0.iter().enumerate() {
        xhat.push(match link {
            LinkOutput::Received(x) => {
                check_payload(x, noise.mu0[n].len(), n)?;
                x.clone()
            }
            LinkOutput::Dropped => noise.mu0[n].clone(),
        });
    }
    Ok(CommonEstimate { xhat, t: 0 })
}

/// Advance the estimate one step given the common action components and the
/// next uplink outputs.
///
/// Per subsystem: a received state replaces the estimate outright; on a drop
/// the estimate propagates as `A xhat + B_local ubar + B_remote u0`.
pub fn update_estimate(
    est: &CommonEstimate,
    ubar: &[DVector<f64>],
    u0: &DVector<f64>,
    z_next: &[LinkOutput],
    model: &ModelSpec,
) -> Result<CommonEstimate> {
    if est.t >= model.dims.horizon {
        return Err(Error::PastHorizon { t: est.t });
    }
    let n_sub = model.dims.n_subsystems();
    if est.xhat.len() != n_sub || ubar.len() != n_sub || z_next.len() != n_sub {
        return Err(Error::DimMismatch {
            context: "estimator subsystem count".to_string(),
            expected: n_sub,
            got: est.xhat.len().min(ubar.len()).min(z_next.len()),
        });
    }
    if u0.len() != model.dims.remote_action_dim() {
        return Err(Error::DimMismatch {
            context: "remote action".to_string(),
            expected: model.dims.remote_action_dim(),
            got: u0.len(),
        });
    }
    let mut xhat = Vec::with_capacity(n_sub);
    for n in 0..n_sub {
        let dx = model.dims.state_dim(n);
        check_payload(&est.xhat[n], dx, n)?;
        let next = match &z_next[n] {
            LinkOutput::Received(x) => {
                check_payload(x, dx, n)?;
                x.clone()
            }
            LinkOutput::Dropped => {
                if ubar[n].len() != model.dims.local_action_dim(n) {
                    return Err(Error::DimMismatch {
                        context: format!("common local action for subsystem {n}"),
                        expected: model.dims.local_action_dim(n),
                        got: ubar[n].len(),
                    });
                }
                let plant = &model.plants[n];
                &plant.a * &est.xhat[n] + &plant.b_local * &ubar[n] + &plant.b_remote * u0
            }
        };
        xhat.push(next);
    }
    Ok(CommonEstimate {
        xhat,
        t: est.t + 1,
    })
}
