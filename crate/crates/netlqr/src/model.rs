//! Problem instances: plant, cost, noise, and channel data.
//!
//! A [`ModelSpec`] is the complete description of one control problem:
//! `N` linear plants `x'[n] = A[n] x[n] + B_local[n] u[n] + B_remote[n] u0 + w[n]`,
//! a per-stage quadratic cost `S' R S` over the stacked state/action vector
//! `S = vec(x[1..N], u0, u[1..N])`, zero-mean initial-state and process noise
//! with known covariances, and one Bernoulli packet-drop uplink per plant.
//!
//! Models are immutable after construction; admissibility is checked by
//! [`ModelSpec::validate`], which reports violations as data rather than
//! errors so a caller can surface all of them at once.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalue floor for "positive definite" checks.
pub const TOL_PD: f64 = 1e-9;
/// Eigenvalue floor for "positive semi-definite" checks.
pub const TOL_PSD: f64 = -1e-9;
/// Retry cap for rejection sampling of PD cost matrices.
pub const PD_RETRY_CAP: usize = 10_000;

/// Problem dimensions.
///
/// Subsystems are indexed `0..N` in code. `action_dims[0]` is the remote
/// controller's action dimension; `action_dims[n + 1]` belongs to the local
/// controller of subsystem `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub state_dims: Vec<usize>,
    pub action_dims: Vec<usize>,
    pub horizon: usize,
}

impl Dims {
    pub fn new(state_dims: Vec<usize>, action_dims: Vec<usize>, horizon: usize) -> Self {
        Self {
            state_dims,
            action_dims,
            horizon,
        }
    }

    pub fn n_subsystems(&self) -> usize {
        self.state_dims.len()
    }

    pub fn state_dim(&self, n: usize) -> usize {
        self.state_dims[n]
    }

    pub fn remote_action_dim(&self) -> usize {
        self.action_dims[0]
    }

    pub fn local_action_dim(&self, n: usize) -> usize {
        self.action_dims[n + 1]
    }

    pub fn total_state_dim(&self) -> usize {
        self.state_dims.iter().sum()
    }

    pub fn total_action_dim(&self) -> usize {
        self.action_dims.iter().sum()
    }

    /// Dimension of the stacked stage vector `vec(x, u0, u[1..N])`.
    pub fn stage_dim(&self) -> usize {
        self.total_state_dim() + self.total_action_dim()
    }

    /// Offset of subsystem `n`'s state block in the stacked state vector.
    pub fn state_offset(&self, n: usize) -> usize {
        self.state_dims[..n].iter().sum()
    }

    /// Offset of local controller `n`'s block in the stacked action vector
    /// `vec(u0, u[1..N])`. The remote block sits at offset 0.
    pub fn local_action_offset(&self, n: usize) -> usize {
        self.action_dims[..n + 1].iter().sum()
    }

    fn well_formed(&self) -> bool {
        !self.state_dims.is_empty()
            && self.action_dims.len() == self.state_dims.len() + 1
            && self.state_dims.iter().all(|&d| d >= 1)
            && self.action_dims.iter().all(|&d| d >= 1)
    }
}

/// Dynamics matrices of one plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantBlock {
    /// State transition `A[n]` (`d_x[n] × d_x[n]`).
    pub a: DMatrix<f64>,
    /// Local input matrix `B_local[n]` (`d_x[n] × d_u[n]`).
    pub b_local: DMatrix<f64>,
    /// Remote input matrix `B_remote[n]` (`d_x[n] × d_u[0]`).
    pub b_remote: DMatrix<f64>,
}

/// Stage cost matrices, either one `R` shared by all steps or one per step.
#[derive(Debug, Clone, PartialEq)]
pub enum CostSchedule {
    Shared(DMatrix<f64>),
    PerStep(Vec<DMatrix<f64>>),
}

impl CostSchedule {
    pub fn at(&self, t: usize) -> &DMatrix<f64> {
        match self {
            CostSchedule::Shared(r) => r,
            CostSchedule::PerStep(rs) => &rs[t],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    Gaussian,
    Uniform,
    /// Caller supplies the sampler at simulation time; only the moments here
    /// are used by synthesis and the exact-cost oracle.
    CustomSampler,
}

/// Process-noise covariances, shared across steps or per step (`[n][t]`).
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseCovariance {
    Shared(Vec<DMatrix<f64>>),
    PerStep(Vec<Vec<DMatrix<f64>>>),
}

/// Initial-state and process-noise description.
///
/// Noise draws are zero-mean by construction; only second moments are free.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub mu0: Vec<DVector<f64>>,
    pub sigma0: Vec<DMatrix<f64>>,
    pub sigma_w: NoiseCovariance,
    pub family: NoiseFamily,
}

impl NoiseSpec {
    pub fn sigma_w_at(&self, n: usize, t: usize) -> &DMatrix<f64> {
        match &self.sigma_w {
            NoiseCovariance::Shared(mats) => &mats[n],
            NoiseCovariance::PerStep(mats) => &mats[n][t],
        }
    }
}

/// Uplink failure probabilities, one per subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub failure_probs: Vec<f64>,
}

/// A complete problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dims: Dims,
    pub plants: Vec<PlantBlock>,
    pub costs: CostSchedule,
    pub noise: NoiseSpec,
    pub channel: ChannelSpec,
}

/// One admissibility violation, with a machine-readable code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: &'static str,
    pub message: String,
}

impl Violation {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

/// `(m + mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Minimum eigenvalue of a (symmetrized) square matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

impl ModelSpec {
    /// Cost matrix in effect at step `t`.
    pub fn cost_at(&self, t: usize) -> &DMatrix<f64> {
        self.costs.at(t)
    }

    /// Check every admissibility invariant; the model is valid iff the
    /// returned list is empty.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let dims = &self.dims;

        if !dims.well_formed() {
            out.push(Violation::new(
                "bad_dims",
                format!(
                    "need N >= 1 subsystems, N+1 action dims, all >= 1; got d_x = {:?}, d_u = {:?}",
                    dims.state_dims, dims.action_dims
                ),
            ));
            return out; // nothing else is checkable
        }

        let n_sub = dims.n_subsystems();
        if self.plants.len() != n_sub {
            out.push(Violation::new(
                "dim_mismatch",
                format!("expected {} plant blocks, got {}", n_sub, self.plants.len()),
            ));
        }
        for (n, plant) in self.plants.iter().enumerate().take(n_sub) {
            let dx = dims.state_dim(n);
            let checks = [
                ("A", &plant.a, dx, dx),
                ("B_local", &plant.b_local, dx, dims.local_action_dim(n)),
                ("B_remote", &plant.b_remote, dx, dims.remote_action_dim()),
            ];
            for (name, mat, rows, cols) in checks {
                if mat.nrows() != rows || mat.ncols() != cols {
                    out.push(Violation::new(
                        "dim_mismatch",
                        format!(
                            "plant {n}: {name} must be {rows}x{cols}, got {}x{}",
                            mat.nrows(),
                            mat.ncols()
                        ),
                    ));
                } else if !all_finite(mat) {
                    out.push(Violation::new(
                        "non_finite",
                        format!("plant {n}: {name} has non-finite entries"),
                    ));
                }
            }
        }

        self.validate_costs(&mut out);
        self.validate_noise(&mut out);

        if self.channel.failure_probs.len() != n_sub {
            out.push(Violation::new(
                "dim_mismatch",
                format!(
                    "expected {} failure probabilities, got {}",
                    n_sub,
                    self.channel.failure_probs.len()
                ),
            ));
        }
        for (n, &p) in self.channel.failure_probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                out.push(Violation::new(
                    "p_out_of_range",
                    format!("uplink {n}: failure probability {p} not in [0, 1]"),
                ));
            }
        }

        out
    }

    fn validate_costs(&self, out: &mut Vec<Violation>) {
        let dims = &self.dims;
        let d = dims.stage_dim();
        let du = dims.total_action_dim();
        let dx = dims.total_state_dim();

        let stages: Vec<(usize, &DMatrix<f64>)> = match &self.costs {
            CostSchedule::Shared(r) => vec![(0, r)],
            CostSchedule::PerStep(rs) => {
                if rs.len() != dims.horizon + 1 {
                    out.push(Violation::new(
                        "cost_count_mismatch",
                        format!(
                            "per-step costs need {} matrices (t = 0..{}), got {}",
                            dims.horizon + 1,
                            dims.horizon,
                            rs.len()
                        ),
                    ));
                }
                rs.iter().enumerate().collect()
            }
        };

        for (t, r) in stages {
            if r.nrows() != d || r.ncols() != d {
                out.push(Violation::new(
                    "dim_mismatch",
                    format!("R[{t}] must be {d}x{d}, got {}x{}", r.nrows(), r.ncols()),
                ));
                continue;
            }
            if !all_finite(r) {
                out.push(Violation::new(
                    "non_finite",
                    format!("R[{t}] has non-finite entries"),
                ));
                continue;
            }
            let scale = 1.0 + r.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if max_asymmetry(r) > 1e-9 * scale {
                out.push(Violation::new(
                    "not_symmetric",
                    format!("R[{t}] is not symmetric"),
                ));
            }
            let sym = symmetrize(r);
            if min_symmetric_eigenvalue(&sym) < TOL_PSD {
                out.push(Violation::new(
                    "R_not_PSD",
                    format!("R[{t}] has eigenvalue below {TOL_PSD}"),
                ));
            }
            let ruu = sym.view((dx, dx), (du, du)).into_owned();
            if min_symmetric_eigenvalue(&ruu) < TOL_PD {
                out.push(Violation::new(
                    "RUU_not_PD",
                    format!("action block of R[{t}] has eigenvalue below {TOL_PD}"),
                ));
            }
        }
    }

    fn validate_noise(&self, out: &mut Vec<Violation>) {
        let dims = &self.dims;
        let n_sub = dims.n_subsystems();
        let noise = &self.noise;

        if noise.mu0.len() != n_sub || noise.sigma0.len() != n_sub {
            out.push(Violation::new(
                "dim_mismatch",
                format!(
                    "noise needs {} mu0/sigma0 entries, got {}/{}",
                    n_sub,
                    noise.mu0.len(),
                    noise.sigma0.len()
                ),
            ));
            return;
        }
        let mut covs: Vec<(String, &DMatrix<f64>, usize)> = Vec::new();
        for n in 0..n_sub {
            let dx = dims.state_dim(n);
            if noise.mu0[n].len() != dx {
                out.push(Violation::new(
                    "dim_mismatch",
                    format!("mu0[{n}] must have length {dx}, got {}", noise.mu0[n].len()),
                ));
            }
            covs.push((format!("sigma0[{n}]"), &noise.sigma0[n], dx));
        }
        match &noise.sigma_w {
            NoiseCovariance::Shared(mats) => {
                if mats.len() != n_sub {
                    out.push(Violation::new(
                        "dim_mismatch",
                        format!("sigma_w needs {} entries, got {}", n_sub, mats.len()),
                    ));
                } else {
                    for (n, m) in mats.iter().enumerate() {
                        covs.push((format!("sigma_w[{n}]"), m, dims.state_dim(n)));
                    }
                }
            }
            NoiseCovariance::PerStep(mats) => {
                if mats.len() != n_sub
                    || mats.iter().any(|per_t| per_t.len() != dims.horizon + 1)
                {
                    out.push(Violation::new(
                        "dim_mismatch",
                        format!(
                            "per-step sigma_w needs {} x {} matrices",
                            n_sub,
                            dims.horizon + 1
                        ),
                    ));
                } else {
                    for (n, per_t) in mats.iter().enumerate() {
                        for (t, m) in per_t.iter().enumerate() {
                            covs.push((format!("sigma_w[{n}][{t}]"), m, dims.state_dim(n)));
                        }
                    }
                }
            }
        }
        for (name, m, dx) in covs {
            if m.nrows() != dx || m.ncols() != dx {
                out.push(Violation::new(
                    "dim_mismatch",
                    format!("{name} must be {dx}x{dx}, got {}x{}", m.nrows(), m.ncols()),
                ));
            } else if !all_finite(m) {
                out.push(Violation::new(
                    "non_finite",
                    format!("{name} has non-finite entries"),
                ));
            } else if min_symmetric_eigenvalue(m) < TOL_PSD {
                out.push(Violation::new(
                    "sigma_not_PSD",
                    format!("{name} has eigenvalue below {TOL_PSD}"),
                ));
            }
        }
    }

    /// Error with the full violation list unless the model is admissible.
    pub fn require_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(violations))
        }
    }

    /// A tiny scalar reference instance used by tests and `verify`:
    /// one plant with `A = 1`, `B_local = B_remote = 1`, identity stage cost,
    /// `p = 0.5`, horizon 2, deterministic initial state 1, unit process noise.
    pub fn scalar_reference() -> ModelSpec {
        ModelSpec {
            dims: Dims::new(vec![1], vec![1, 1], 2),
            plants: vec![PlantBlock {
                a: DMatrix::from_element(1, 1, 1.0),
                b_local: DMatrix::from_element(1, 1, 1.0),
                b_remote: DMatrix::from_element(1, 1, 1.0),
            }],
            costs: CostSchedule::Shared(DMatrix::identity(3, 3)),
            noise: NoiseSpec {
                mu0: vec![DVector::from_element(1, 1.0)],
                sigma0: vec![DMatrix::zeros(1, 1)],
                sigma_w: NoiseCovariance::Shared(vec![DMatrix::from_element(1, 1, 1.0)]),
                family: NoiseFamily::Gaussian,
            },
            channel: ChannelSpec {
                failure_probs: vec![0.5],
            },
        }
    }
}

/// Stack the per-plant dynamics into the global pair `(A, B)`.
///
/// `A` is block-diagonal in the `A[n]`. `B`'s first block-column stacks the
/// remote input matrices; the remaining columns are block-diagonal in the
/// local input matrices, so block `(i, j)` of `B` is zero whenever `i != j`
/// and `j != 0`.
pub fn assemble_global(model: &ModelSpec) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    model.require_valid()?;
    let dims = &model.dims;
    let dx = dims.total_state_dim();
    let du = dims.total_action_dim();
    let mut a = DMatrix::zeros(dx, dx);
    let mut b = DMatrix::zeros(dx, du);
    for (n, plant) in model.plants.iter().enumerate() {
        let row = dims.state_offset(n);
        let d = dims.state_dim(n);
        a.view_mut((row, row), (d, d)).copy_from(&plant.a);
        b.view_mut((row, 0), (d, dims.remote_action_dim()))
            .copy_from(&plant.b_remote);
        b.view_mut(
            (row, dims.local_action_offset(n)),
            (d, dims.local_action_dim(n)),
        )
        .copy_from(&plant.b_local);
    }
    Ok((a, b))
}

/// How the stage-cost matrix of a random model is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostSampling {
    /// Sample the `d(d+1)/2` free entries of a symmetric matrix uniformly on
    /// the entry range and reject until PD (capped at [`PD_RETRY_CAP`]).
    /// The acceptance probability collapses with dimension; practical only
    /// for stage dimensions up to about 5.
    UniformRejection,
    /// `R = GᵀG` with `G` entries uniform on the entry range; PD almost
    /// surely, any dimension.
    GramUniform,
}

/// Generate a random problem instance.
///
/// Dynamics entries are i.i.d. uniform on `[lo, hi]`. Costs use
/// [`CostSampling::UniformRejection`] when the stage dimension is at most 4
/// (the PD acceptance rate collapses with dimension: measured ~1e-2 at 4x4
/// but ~5e-4 at 5x5, where the retry cap already fails visibly often) and
/// [`CostSampling::GramUniform`] otherwise. Noise is zero-mean with identity
/// covariances, the initial state is zero-mean with identity covariance, and
/// every uplink fails with probability 0.5. Deterministic given
/// `(dims, range, seed)`.
pub fn random_model(dims: &Dims, entry_range: (f64, f64), seed: u64) -> Result<ModelSpec> {
    let sampling = if dims.stage_dim() <= 4 {
        CostSampling::UniformRejection
    } else {
        CostSampling::GramUniform
    };
    random_model_with_costs(dims, entry_range, seed, sampling)
}

/// [`random_model`] with an explicit cost-sampling mode.
pub fn random_model_with_costs(
    dims: &Dims,
    entry_range: (f64, f64),
    seed: u64,
    sampling: CostSampling,
) -> Result<ModelSpec> {
    let (lo, hi) = entry_range;
    assert!(lo < hi, "entry range must satisfy lo < hi");
    if !dims.well_formed() {
        return Err(Error::InvalidModel(vec![Violation::new(
            "bad_dims",
            "dimensions must all be >= 1",
        )]));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let draw = |rows: usize, cols: usize, rng: &mut ChaCha12Rng| {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
    };

    let n_sub = dims.n_subsystems();
    let mut plants = Vec::with_capacity(n_sub);
    for n in 0..n_sub {
        let dx = dims.state_dim(n);
        plants.push(PlantBlock {
            a: draw(dx, dx, &mut rng),
            b_local: draw(dx, dims.local_action_dim(n), &mut rng),
            b_remote: draw(dx, dims.remote_action_dim(), &mut rng),
        });
    }

    let d = dims.stage_dim();
    let r = sample_pd_cost(d, (lo, hi), sampling, &mut rng)?;

    let model = ModelSpec {
        dims: dims.clone(),
        plants,
        costs: CostSchedule::Shared(r),
        noise: NoiseSpec {
            mu0: (0..n_sub).map(|n| DVector::zeros(dims.state_dim(n))).collect(),
            sigma0: (0..n_sub)
                .map(|n| DMatrix::identity(dims.state_dim(n), dims.state_dim(n)))
                .collect(),
            sigma_w: NoiseCovariance::Shared(
                (0..n_sub)
                    .map(|n| DMatrix::identity(dims.state_dim(n), dims.state_dim(n)))
                    .collect(),
            ),
            family: NoiseFamily::Gaussian,
        },
        channel: ChannelSpec {
            failure_probs: vec![0.5; n_sub],
        },
    };
    Ok(model)
}

fn sample_pd_cost(
    d: usize,
    (lo, hi): (f64, f64),
    sampling: CostSampling,
    rng: &mut ChaCha12Rng,
) -> Result<DMatrix<f64>> {
    for _ in 0..PD_RETRY_CAP {
        let candidate = match sampling {
            CostSampling::UniformRejection => {
                // upper triangle sampled, mirrored below
                let mut m = DMatrix::zeros(d, d);
                for i in 0..d {
                    for j in i..d {
                        let v = rng.random_range(lo..hi);
                        m[(i, j)] = v;
                        m[(j, i)] = v;
                    }
                }
                m
            }
            CostSampling::GramUniform => {
                let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(lo..hi));
                symmetrize(&(g.transpose() * &g))
            }
        };
        if min_symmetric_eigenvalue(&candidate) >= TOL_PD {
            return Ok(candidate);
        }
    }
    Err(Error::Generation {
        step: format!("PD cost matrix ({d}x{d})"),
        attempts: PD_RETRY_CAP,
    })
}
