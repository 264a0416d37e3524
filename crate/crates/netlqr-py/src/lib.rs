//! Python bindings: models, gain synthesis, simulation, and the exact-cost
//! oracle. Matrices cross the boundary as nested `list[list[float]]`.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use netlqr::model::{random_model_with_costs, CostSampling, Dims, ModelSpec};
use netlqr::oracle::LinearPolicy;
use netlqr::synthesis::{BeliefSummary, GainSchedule};

type MessageSizeRow = (usize, usize, usize, usize, String);

fn err(e: netlqr::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mat_to_py(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn mat_from_py(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 || rows[0].is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(PyValueError::new_err(format!("{what}: ragged or empty matrix")));
    }
    Ok(DMatrix::from_fn(nrows, rows[0].len(), |i, j| rows[i][j]))
}

/// A problem instance: plants, costs, noise moments, channel probabilities.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: ModelSpec,
}

#[pymethods]
impl Model {
    /// Parse a `netlqr-model/1` JSON document.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Model> {
        Ok(Model {
            inner: netlqr::fileio::model_from_json(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        Ok(Model {
            inner: netlqr::fileio::load_model(std::path::Path::new(path)).map_err(err)?,
        })
    }

    /// Generate a random instance. `cost_sampling` is "auto", "reject"
    /// (uniform entries with PD rejection), or "gram" (R = G'G).
    #[staticmethod]
    #[pyo3(signature = (n, dx, du, horizon, lo = 0.0, hi = 20.0, seed = 0, cost_sampling = "auto"))]
    #[allow(clippy::too_many_arguments)]
    fn random(
        n: usize,
        dx: usize,
        du: usize,
        horizon: usize,
        lo: f64,
        hi: f64,
        seed: u64,
        cost_sampling: &str,
    ) -> PyResult<Model> {
        let dims = Dims::new(vec![dx; n], vec![du; n + 1], horizon);
        let inner = match cost_sampling {
            "auto" => netlqr::model::random_model(&dims, (lo, hi), seed),
            "reject" => {
                random_model_with_costs(&dims, (lo, hi), seed, CostSampling::UniformRejection)
            }
            "gram" => random_model_with_costs(&dims, (lo, hi), seed, CostSampling::GramUniform),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown cost sampling {other:?} (expected auto|reject|gram)"
                )))
            }
        }
        .map_err(err)?;
        Ok(Model { inner })
    }

    /// The built-in scalar reference instance (one plant, identity cost,
    /// `p = 0.5`, horizon 2).
    #[staticmethod]
    fn scalar_reference() -> Model {
        Model {
            inner: ModelSpec::scalar_reference(),
        }
    }

    fn to_json(&self) -> String {
        netlqr::fileio::model_to_json(&self.inner)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        netlqr::fileio::save_model(&self.inner, std::path::Path::new(path)).map_err(err)
    }

    /// All admissibility violations as `(code, message)` pairs; empty means
    /// the model is valid.
    fn validate(&self) -> Vec<(String, String)> {
        self.inner
            .validate()
            .into_iter()
            .map(|v| (v.code.to_string(), v.message))
            .collect()
    }

    /// Content hash of the canonical JSON form.
    fn hash(&self) -> String {
        netlqr::fileio::model_hash(&self.inner)
    }

    #[getter]
    fn n_subsystems(&self) -> usize {
        self.inner.dims.n_subsystems()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.dims.horizon
    }

    #[getter]
    fn failure_probs(&self) -> Vec<f64> {
        self.inner.channel.failure_probs.clone()
    }

    fn set_failure_probs(&mut self, p: Vec<f64>) -> PyResult<()> {
        if p.len() != self.inner.dims.n_subsystems() {
            return Err(PyValueError::new_err("one probability per subsystem"));
        }
        self.inner.channel.failure_probs = p;
        Ok(())
    }

    /// Per-subsystem downlink payload accounting:
    /// `(subsystem, estimate_scheme, flag_scheme, payload, scheme)`.
    fn message_sizes(&self) -> PyResult<Vec<MessageSizeRow>> {
        Ok(netlqr::controller::message_sizes(&self.inner)
            .map_err(err)?
            .into_iter()
            .map(|m| {
                (
                    m.subsystem,
                    m.estimate_scheme,
                    m.flag_scheme,
                    m.payload,
                    format!("{:?}", m.scheme),
                )
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(n={}, horizon={}, hash={})",
            self.inner.dims.n_subsystems(),
            self.inner.dims.horizon,
            &netlqr::fileio::model_hash(&self.inner)[..12]
        )
    }
}

/// A synthesized gain schedule.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Gains {
    inner: GainSchedule,
}

#[pymethods]
impl Gains {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Gains> {
        Ok(Gains {
            inner: netlqr::fileio::gains_from_json(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Gains> {
        Ok(Gains {
            inner: netlqr::fileio::load_gains(std::path::Path::new(path)).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        netlqr::fileio::gains_to_json(&self.inner, None)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        netlqr::fileio::save_gains(&self.inner, None, std::path::Path::new(path)).map_err(err)
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.dims.horizon
    }

    #[getter]
    fn model_hash(&self) -> String {
        self.inner.model_hash.clone()
    }

    /// Common gain `K[t]` applied to the stacked estimate.
    fn k(&self, t: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .k
            .get(t)
            .map(mat_to_py)
            .ok_or_else(|| PyValueError::new_err(format!("t = {t} out of range")))
    }

    /// Deviation gain for subsystem `n` at time `t`.
    fn k_local(&self, n: usize, t: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .k_drop
            .get(n)
            .and_then(|per_t| per_t.get(t))
            .map(mat_to_py)
            .ok_or_else(|| PyValueError::new_err(format!("(n, t) = ({n}, {t}) out of range")))
    }

    /// Cost-to-go matrix `P[t]`.
    fn p(&self, t: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .p
            .get(t)
            .map(mat_to_py)
            .ok_or_else(|| PyValueError::new_err(format!("t = {t} out of range")))
    }

    /// Optimal cost-to-go at `t` for a belief given as per-subsystem means
    /// and covariance matrices.
    fn value_function(
        &self,
        t: usize,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    ) -> PyResult<f64> {
        let belief = BeliefSummary {
            means: means.into_iter().map(DVector::from_vec).collect(),
            covs: covs
                .iter()
                .enumerate()
                .map(|(n, rows)| mat_from_py(rows, &format!("cov[{n}]")))
                .collect::<PyResult<Vec<_>>>()?,
        };
        self.inner.value_function(t, &belief).map_err(err)
    }

    /// Expected closed-loop cost of running this schedule on `model`.
    fn expected_total_cost(&self, model: &Model) -> PyResult<f64> {
        self.inner.expected_total_cost(&model.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Gains(horizon={}, n={}, model_hash={})",
            self.inner.dims.horizon,
            self.inner.dims.n_subsystems(),
            &self.inner.model_hash[..12]
        )
    }
}

/// One simulated rollout.
#[pyclass]
struct Episode {
    #[pyo3(get)]
    total_cost: f64,
    #[pyo3(get)]
    stage_costs: Vec<f64>,
    /// `gammas[t][n]`
    #[pyo3(get)]
    gammas: Vec<Vec<bool>>,
    /// `states[t][n]` as flat per-subsystem vectors
    #[pyo3(get)]
    states: Vec<Vec<Vec<f64>>>,
    #[pyo3(get)]
    estimates: Vec<Vec<Vec<f64>>>,
    #[pyo3(get)]
    remote_actions: Vec<Vec<f64>>,
    #[pyo3(get)]
    local_actions: Vec<Vec<Vec<f64>>>,
}

/// Run the backward recursions and return the optimal gain schedule.
#[pyfunction]
fn synthesize(model: &Model) -> PyResult<Gains> {
    Ok(Gains {
        inner: netlqr::synthesis::synthesize(&model.inner).map_err(err)?,
    })
}

/// Standard centralized LQ synthesis (always-active links), an independent
/// implementation used for cross-checking.
#[pyfunction]
fn centralized_lqr(model: &Model) -> PyResult<Gains> {
    Ok(Gains {
        inner: netlqr::baselines::centralized_lqr(&model.inner).map_err(err)?,
    })
}

/// Simulate one closed-loop episode; deterministic given the seed.
#[pyfunction]
fn simulate_episode(model: &Model, gains: &Gains, seed: u64) -> PyResult<Episode> {
    let tr = netlqr::simulator::simulate_episode(&model.inner, &gains.inner, seed).map_err(err)?;
    let flat = |per_t: &Vec<Vec<DVector<f64>>>| -> Vec<Vec<Vec<f64>>> {
        per_t
            .iter()
            .map(|per_n| per_n.iter().map(|v| v.iter().copied().collect()).collect())
            .collect()
    };
    Ok(Episode {
        total_cost: tr.total_cost,
        stage_costs: tr.stage_costs.clone(),
        gammas: tr.gammas.clone(),
        states: flat(&tr.states),
        estimates: flat(&tr.estimates),
        remote_actions: tr
            .remote_actions
            .iter()
            .map(|v| v.iter().copied().collect())
            .collect(),
        local_actions: flat(&tr.local_actions),
    })
}

/// Monte Carlo cost estimate over `episodes` parallel rollouts; returns
/// `(mean, stderr)`.
#[pyfunction]
fn monte_carlo(model: &Model, gains: &Gains, episodes: usize, seed: u64) -> PyResult<(f64, f64)> {
    let report =
        netlqr::simulator::monte_carlo(&model.inner, &gains.inner, episodes, seed).map_err(err)?;
    Ok((report.mean, report.stderr))
}

/// Exact (simulation-free) expected total cost of running `gains` on
/// `model`, via joint moment propagation.
#[pyfunction]
fn exact_cost(model: &Model, gains: &Gains) -> PyResult<f64> {
    netlqr::oracle::exact_cost(&model.inner, &LinearPolicy::from_schedule(&gains.inner))
        .map_err(err)
}

/// Random-perturbation optimality probe; returns
/// `(base_cost, min_delta_cost, max_abs_directional_derivative, passes)`.
#[pyfunction]
#[pyo3(signature = (model, gains, epsilon = 1e-4, trials = 50, seed = 0))]
fn stationarity_check(
    model: &Model,
    gains: &Gains,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> PyResult<(f64, f64, f64, bool)> {
    let report =
        netlqr::oracle::stationarity_check(&model.inner, &gains.inner, epsilon, trials, seed)
            .map_err(err)?;
    Ok((
        report.base_cost,
        report.min_delta_cost,
        report.max_abs_directional_derivative,
        report.passes,
    ))
}

#[pymodule]
fn netlqr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Gains>()?;
    m.add_class::<Episode>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(centralized_lqr, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_episode, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(exact_cost, m)?)?;
    m.add_function(wrap_pyfunction!(stationarity_check, m)?)?;
    Ok(())
}
