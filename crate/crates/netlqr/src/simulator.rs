//! Closed-loop rollouts and Monte Carlo cost estimation.
//!
//! Timing within a step follows the communication model: the links fire and
//! the estimate updates first, every controller then acts on the fresh common
//! estimate, the stage cost is accrued, and only then does the plant advance
//! with fresh process noise. Stage costs are accrued for `t = 0..=T`; the
//! state after the last costed step is never formed.
//!
//! Reproducibility: episode `i` of a run with master seed `s` draws from
//! ChaCha12 stream `i` seeded by `s`, so episodes are decorrelated and any
//! subset can be replayed independently of thread scheduling. Within an
//! episode the draw order is: initial states (subsystem order), then per
//! step: channel outcomes, then process noise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

use crate::controller::{compute_actions, ActionProfile};
use crate::error::{Error, Result};
use crate::estimator::{init_estimate, update_estimate, CommonEstimate, LinkOutput};
use crate::model::{ChannelSpec, ModelSpec, NoiseCovariance, NoiseFamily};
use crate::synthesis::GainSchedule;

/// Draw one channel outcome per uplink: `true` (delivered) with probability
/// `1 - p[n]`, exactly degenerate at `p = 0` and `p = 1`.
pub fn sample_channel<R: Rng + ?Sized>(channel: &ChannelSpec, rng: &mut R) -> Vec<bool> {
    channel
        .failure_probs
        .iter()
        .map(|&p| rng.random::<f64>() >= p)
        .collect()
}

/// One plant step: `x' = A x + B_local u + B_remote u0 + w`.
pub fn step_plant(
    model: &ModelSpec,
    n: usize,
    x: &DVector<f64>,
    u_local: &DVector<f64>,
    u_remote: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    let dims = &model.dims;
    let dx = dims.state_dim(n);
    for (name, len, expected) in [
        ("state", x.len(), dx),
        ("local action", u_local.len(), dims.local_action_dim(n)),
        ("remote action", u_remote.len(), dims.remote_action_dim()),
        ("noise", w.len(), dx),
    ] {
        if len != expected {
            return Err(Error::DimMismatch {
                context: format!("step_plant {name} for subsystem {n}"),
                expected,
                got: len,
            });
        }
    }
    let plant = &model.plants[n];
    Ok(&plant.a * x + &plant.b_local * u_local + &plant.b_remote * u_remote + w)
}

/// Symmetric PSD square root via eigendecomposition (tiny negative
/// eigenvalues from rounding are clamped to zero).
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = crate::model::symmetrize(m).symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// User-supplied sampler for the `custom` noise family. Draws must be
/// zero-mean with the covariances declared in the model's `NoiseSpec`.
pub trait CustomNoise: Send + Sync {
    fn initial_state(&self, n: usize, rng: &mut ChaCha12Rng) -> DVector<f64>;
    fn process_noise(&self, n: usize, t: usize, rng: &mut ChaCha12Rng) -> DVector<f64>;
}

enum SamplerKind {
    /// Prepared square-root factors; `standardized` maps i.i.d. unit-variance
    /// scalar draws through them.
    Factored {
        gaussian: bool,
        l0: Vec<DMatrix<f64>>,
        lw: NoiseCovariance,
        mu0: Vec<DVector<f64>>,
    },
    Custom(Box<dyn CustomNoise>),
}

/// Noise source for episodes, prepared once per run.
pub struct NoiseSampler {
    kind: SamplerKind,
}

impl NoiseSampler {
    /// Build the sampler the model's noise family calls for. The `custom`
    /// family has no default sampler; supply one via [`NoiseSampler::custom`].
    pub fn from_model(model: &ModelSpec) -> Result<Self> {
        let gaussian = match model.noise.family {
            NoiseFamily::Gaussian => true,
            NoiseFamily::Uniform => false,
            NoiseFamily::CustomSampler => return Err(Error::SamplerRequired),
        };
        let l0 = model.noise.sigma0.iter().map(psd_sqrt).collect();
        let lw = match &model.noise.sigma_w {
            NoiseCovariance::Shared(ms) => {
                NoiseCovariance::Shared(ms.iter().map(psd_sqrt).collect())
            }
            NoiseCovariance::PerStep(ms) => NoiseCovariance::PerStep(
                ms.iter()
                    .map(|per_t| per_t.iter().map(psd_sqrt).collect())
                    .collect(),
            ),
        };
        Ok(Self {
            kind: SamplerKind::Factored {
                gaussian,
                l0,
                lw,
                mu0: model.noise.mu0.clone(),
            },
        })
    }

    pub fn custom(sampler: Box<dyn CustomNoise>) -> Self {
        Self {
            kind: SamplerKind::Custom(sampler),
        }
    }

    fn standardized(gaussian: bool, len: usize, rng: &mut ChaCha12Rng) -> DVector<f64> {
        if gaussian {
            DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
        } else {
            // uniform on [-sqrt(3), sqrt(3)]: zero mean, unit variance
            let half = 3.0f64.sqrt();
            DVector::from_fn(len, |_, _| rng.random_range(-half..half))
        }
    }

    fn initial_state(&self, n: usize, rng: &mut ChaCha12Rng) -> DVector<f64> {
        match &self.kind {
            SamplerKind::Factored {
                gaussian, l0, mu0, ..
            } => &mu0[n] + &l0[n] * Self::standardized(*gaussian, l0[n].ncols(), rng),
            SamplerKind::Custom(c) => c.initial_state(n, rng),
        }
    }

    fn process_noise(&self, n: usize, t: usize, rng: &mut ChaCha12Rng) -> DVector<f64> {
        match &self.kind {
            SamplerKind::Factored { gaussian, lw, .. } => {
                let l = match lw {
                    NoiseCovariance::Shared(ms) => &ms[n],
                    NoiseCovariance::PerStep(ms) => &ms[n][t],
                };
                l * Self::standardized(*gaussian, l.ncols(), rng)
            }
            SamplerKind::Custom(c) => c.process_noise(n, t, rng),
        }
    }
}

/// One simulated rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub stream: u64,
    /// `states[t][n]`, `t = 0..=T`.
    pub states: Vec<Vec<DVector<f64>>>,
    pub estimates: Vec<Vec<DVector<f64>>>,
    pub gammas: Vec<Vec<bool>>,
    pub remote_actions: Vec<DVector<f64>>,
    pub common_local_actions: Vec<Vec<DVector<f64>>>,
    pub local_actions: Vec<Vec<DVector<f64>>>,
    pub stage_costs: Vec<f64>,
    pub total_cost: f64,
}

/// Monte Carlo cost estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub mean: f64,
    /// `sample std / sqrt(episodes)`; 0 by convention for a single episode.
    pub stderr: f64,
    pub episodes: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_step_mean: Option<Vec<f64>>,
}

enum ChannelDriver<'a> {
    Stochastic,
    /// Forced outcomes `[t][n]`; consumes no channel randomness.
    Forced(&'a [Vec<bool>]),
}

fn stage_cost(model: &ModelSpec, t: usize, states: &[DVector<f64>], profile: &ActionProfile) -> f64 {
    let dims = &model.dims;
    let mut s = DVector::zeros(dims.stage_dim());
    for (n, x) in states.iter().enumerate() {
        s.rows_mut(dims.state_offset(n), dims.state_dim(n)).copy_from(x);
    }
    let dx = dims.total_state_dim();
    s.rows_mut(dx, dims.remote_action_dim()).copy_from(&profile.remote);
    for (n, u) in profile.local.iter().enumerate() {
        s.rows_mut(dx + dims.local_action_offset(n), dims.local_action_dim(n))
            .copy_from(u);
    }
    let r = model.cost_at(t);
    s.dot(&(r * &s))
}

#[allow(clippy::needless_range_loop)]
fn run_episode(
    model: &ModelSpec,
    schedule: &GainSchedule,
    sampler: &NoiseSampler,
    driver: &ChannelDriver<'_>,
    seed: u64,
    stream: u64,
    keep_trace: bool,
) -> Result<(f64, Vec<f64>, Option<EpisodeTrace>)> {
    let dims = &model.dims;
    let n_sub = dims.n_subsystems();
    let horizon = dims.horizon;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);

    let mut states: Vec<DVector<f64>> =
        (0..n_sub).map(|n| sampler.initial_state(n, &mut rng)).collect();
    let mut estimate: Option<CommonEstimate> = None;
    let mut prev_profile: Option<ActionProfile> = None;
    let mut stage_costs = Vec::with_capacity(horizon + 1);
    let mut trace = keep_trace.then(|| EpisodeTrace {
        seed,
        stream,
        states: Vec::with_capacity(horizon + 1),
        estimates: Vec::with_capacity(horizon + 1),
        gammas: Vec::with_capacity(horizon + 1),
        remote_actions: Vec::with_capacity(horizon + 1),
        common_local_actions: Vec::with_capacity(horizon + 1),
        local_actions: Vec::with_capacity(horizon + 1),
        stage_costs: Vec::with_capacity(horizon + 1),
        total_cost: 0.0,
    });

    for t in 0..=horizon {
        let gammas = match driver {
            ChannelDriver::Stochastic => sample_channel(&model.channel, &mut rng),
            ChannelDriver::Forced(seq) => seq[t].clone(),
        };
        let observation: Vec<LinkOutput> = gammas
            .iter()
            .zip(states.iter())
            .map(|(&ok, x)| {
                if ok {
                    LinkOutput::Received(x.clone())
                } else {
                    LinkOutput::Dropped
                }
            })
            .collect();
        let est = match (&estimate, &prev_profile) {
            (None, _) => init_estimate(&model.noise, &observation)?,
            (Some(prev), Some(profile)) => update_estimate(
                prev,
                &profile.common_local,
                &profile.remote,
                &observation,
                model,
            )?,
            (Some(_), None) => unreachable!("actions exist after the first step"),
        };
        let profile = compute_actions(schedule, t, &est, &states)?;
        let cost = stage_cost(model, t, &states, &profile);
        stage_costs.push(cost);

        if let Some(tr) = trace.as_mut() {
            tr.states.push(states.clone());
            tr.estimates.push(est.xhat.clone());
            tr.gammas.push(gammas.clone());
            tr.remote_actions.push(profile.remote.clone());
            tr.common_local_actions.push(profile.common_local.clone());
            tr.local_actions.push(profile.local.clone());
            tr.stage_costs.push(cost);
        }

        if t < horizon {
            let mut next = Vec::with_capacity(n_sub);
            for n in 0..n_sub {
                let w = sampler.process_noise(n, t, &mut rng);
                next.push(step_plant(model, n, &states[n], &profile.local[n], &profile.remote, &w)?);
            }
            states = next;
        }
        estimate = Some(est);
        prev_profile = Some(profile);
    }

    let total: f64 = pairwise_sum(&stage_costs);
    if let Some(tr) = trace.as_mut() {
        tr.total_cost = total;
    }
    Ok((total, stage_costs, trace))
}

/// Simulate one episode under Bernoulli channels; deterministic given
/// `(model, schedule, seed)`.
pub fn simulate_episode(
    model: &ModelSpec,
    schedule: &GainSchedule,
    seed: u64,
) -> Result<EpisodeTrace> {
    simulate_episode_stream(model, schedule, seed, 0)
}

/// [`simulate_episode`] on an explicit ChaCha stream (Monte Carlo uses
/// stream = episode index).
pub fn simulate_episode_stream(
    model: &ModelSpec,
    schedule: &GainSchedule,
    seed: u64,
    stream: u64,
) -> Result<EpisodeTrace> {
    check_compatible(model, schedule)?;
    let sampler = NoiseSampler::from_model(model)?;
    let (_, _, trace) = run_episode(
        model,
        schedule,
        &sampler,
        &ChannelDriver::Stochastic,
        seed,
        stream,
        true,
    )?;
    Ok(trace.expect("trace requested"))
}

/// Simulate one episode with the channel outcomes pinned to `gammas[t][n]`;
/// noise is still drawn from `(seed, stream)`. Used by the conditional-mean
/// and special-case checks.
pub fn simulate_episode_forced(
    model: &ModelSpec,
    schedule: &GainSchedule,
    seed: u64,
    stream: u64,
    gammas: &[Vec<bool>],
) -> Result<EpisodeTrace> {
    let sampler = NoiseSampler::from_model(model)?;
    simulate_episode_forced_with_sampler(model, schedule, &sampler, seed, stream, gammas)
}

/// [`simulate_episode_forced`] with an explicit noise source (custom
/// samplers, recorded-noise replays).
pub fn simulate_episode_forced_with_sampler(
    model: &ModelSpec,
    schedule: &GainSchedule,
    sampler: &NoiseSampler,
    seed: u64,
    stream: u64,
    gammas: &[Vec<bool>],
) -> Result<EpisodeTrace> {
    check_compatible(model, schedule)?;
    if gammas.len() != model.dims.horizon + 1
        || gammas.iter().any(|g| g.len() != model.dims.n_subsystems())
    {
        return Err(Error::DimMismatch {
            context: "forced channel sequence".to_string(),
            expected: model.dims.horizon + 1,
            got: gammas.len(),
        });
    }
    let (_, _, trace) = run_episode(
        model,
        schedule,
        sampler,
        &ChannelDriver::Forced(gammas),
        seed,
        stream,
        true,
    )?;
    Ok(trace.expect("trace requested"))
}

fn check_compatible(model: &ModelSpec, schedule: &GainSchedule) -> Result<()> {
    if model.dims != schedule.dims {
        return Err(Error::ArtifactMismatch(
            "model dimensions do not match the schedule".to_string(),
        ));
    }
    Ok(())
}

/// Deterministic pairwise summation (reduces rounding drift and is
/// independent of thread completion order).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

/// Estimate the expected total cost over `episodes` independent rollouts.
///
/// Episodes run in parallel; episode `i` uses ChaCha stream `i`, and the
/// reduction is a pairwise summation in episode-index order, so the report
/// is bit-identical regardless of thread count.
pub fn monte_carlo(
    model: &ModelSpec,
    schedule: &GainSchedule,
    episodes: usize,
    seed: u64,
) -> Result<CostReport> {
    monte_carlo_inner(model, schedule, episodes, seed, false)
}

/// [`monte_carlo`] that also reports the mean cost per step.
pub fn monte_carlo_with_profile(
    model: &ModelSpec,
    schedule: &GainSchedule,
    episodes: usize,
    seed: u64,
) -> Result<CostReport> {
    monte_carlo_inner(model, schedule, episodes, seed, true)
}

fn monte_carlo_inner(
    model: &ModelSpec,
    schedule: &GainSchedule,
    episodes: usize,
    seed: u64,
    profile: bool,
) -> Result<CostReport> {
    assert!(episodes >= 1, "need at least one episode");
    check_compatible(model, schedule)?;
    model.require_valid()?;
    let sampler = NoiseSampler::from_model(model)?;

    let results: Vec<(f64, Vec<f64>)> = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            run_episode(
                model,
                schedule,
                &sampler,
                &ChannelDriver::Stochastic,
                seed,
                i,
                false,
            )
            .map(|(total, steps, _)| (total, if profile { steps } else { Vec::new() }))
        })
        .collect::<Result<Vec<_>>>()?;

    let costs: Vec<f64> = results.iter().map(|(c, _)| *c).collect();
    let mean = pairwise_sum(&costs) / episodes as f64;
    let stderr = if episodes > 1 {
        let sq: Vec<f64> = costs.iter().map(|c| (c - mean).powi(2)).collect();
        (pairwise_sum(&sq) / (episodes as f64 - 1.0)).sqrt() / (episodes as f64).sqrt()
    } else {
        0.0
    };
    let per_step_mean = profile.then(|| {
        (0..=model.dims.horizon)
            .map(|t| {
                let col: Vec<f64> = results.iter().map(|(_, steps)| steps[t]).collect();
                pairwise_sum(&col) / episodes as f64
            })
            .collect()
    });
    Ok(CostReport {
        mean,
        stderr,
        episodes,
        seed,
        per_step_mean,
    })
}

/// Write traces as CSV, one row per `(episode, t, subsystem)`.
///
/// Vector-valued columns are `;`-joined. `remote_action` and `stage_cost`
/// apply to the whole step and repeat on every subsystem row of that step.
pub fn write_trace_csv<W: Write>(out: &mut W, traces: &[EpisodeTrace]) -> Result<()> {
    writeln!(
        out,
        "episode,t,subsystem,gamma,state,estimate,common_action,local_action,remote_action,stage_cost"
    )?;
    let join = |v: &DVector<f64>| {
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
    };
    for (episode, tr) in traces.iter().enumerate() {
        for t in 0..tr.states.len() {
            for n in 0..tr.states[t].len() {
                writeln!(
                    out,
                    "{episode},{t},{n},{},{},{},{},{},{},{}",
                    u8::from(tr.gammas[t][n]),
                    join(&tr.states[t][n]),
                    join(&tr.estimates[t][n]),
                    join(&tr.common_local_actions[t][n]),
                    join(&tr.local_actions[t][n]),
                    join(&tr.remote_actions[t]),
                    tr.stage_costs[t],
                )?;
            }
        }
    }
    Ok(())
}
