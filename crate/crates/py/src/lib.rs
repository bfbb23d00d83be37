//! Python bindings: tabular Q-functions, the divergence family, policy
//! fitting and the replication harness.
//!
//! Build with `cargo build -p qpower-py --release`; the produced
//! `libqpower_py.so` imports as `qpower_py` once renamed/copied to
//! `qpower_py.so` on the Python path (see `python/smoke_test.py`).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use qpower::divergence as dv;
use qpower::estimators as est;
use qpower::models::{FeatureMaps, ModelQFunction, NuisanceComponent, PolicyComponent};
use qpower::qcore::{self, ActionSet, CovariatePoint, TrajectoryDataset};
use qpower::simulate as sim;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Tabular Q-function on a finite covariate grid.
#[pyclass(name = "QFunction", skip_from_py_object)]
#[derive(Clone)]
struct PyQFunction {
    inner: qcore::TabularQFunction,
}

#[pymethods]
impl PyQFunction {
    /// Parse the JSON schema
    /// `{"actions": [..], "points": [{"x": [..], "weight": w, "q": {..}}]}`.
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyQFunction { inner: qcore::TabularQFunction::from_json(s).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Greedy action at a grid covariate; ties break to the smallest label.
    fn greedy(&self, x: Vec<f64>) -> PyResult<i64> {
        qcore::greedy_policy(&self.inner, &CovariatePoint(x)).map_err(err)
    }

    fn actions(&self) -> Vec<i64> {
        self.inner.actions().labels().to_vec()
    }

    /// Rescale by a positive per-point factor eta(x).
    fn scaled_by(&self, eta: Vec<f64>) -> PyResult<Self> {
        Ok(PyQFunction { inner: self.inner.scaled_by(&eta).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!(
            "QFunction(points={}, actions={:?})",
            self.inner.points().len(),
            self.inner.actions().labels()
        )
    }
}

#[pyfunction]
fn gamma_divergence(q0: &PyQFunction, q1: &PyQFunction, gamma: f64) -> PyResult<f64> {
    dv::gamma_divergence(&q0.inner, &q1.inner, gamma).map_err(err)
}

#[pyfunction]
fn beta_divergence(q0: &PyQFunction, q1: &PyQFunction, beta: f64) -> PyResult<f64> {
    dv::beta_divergence(&q0.inner, &q1.inner, beta).map_err(err)
}

#[pyfunction]
fn ekl_divergence(q0: &PyQFunction, q1: &PyQFunction) -> PyResult<f64> {
    dv::ekl_divergence(&q0.inner, &q1.inner).map_err(err)
}

#[pyfunction]
fn nkl_divergence(q0: &PyQFunction, q1: &PyQFunction) -> PyResult<f64> {
    dv::nkl_divergence(&q0.inner, &q1.inner).map_err(err)
}

#[pyfunction]
fn gm_limit_divergence(q0: &PyQFunction, q1: &PyQFunction) -> PyResult<f64> {
    dv::gm_limit_divergence(&q0.inner, &q1.inner).map_err(err)
}

/// Rows of (gamma, gamma * divergence, value gap) for the value-gap limit.
#[pyfunction]
fn value_gap_limit(
    q0: &PyQFunction,
    q1: &PyQFunction,
    gammas: Vec<f64>,
) -> PyResult<Vec<(f64, f64, f64)>> {
    dv::value_gap_limit(&q0.inner, &q1.inner, &gammas).map_err(err)
}

/// Both sides of the harmonic-mean identity at gamma = -2.
#[pyfunction]
fn harmonic_identity_check(q: &PyQFunction) -> PyResult<(f64, f64)> {
    dv::harmonic_identity_check(&q.inner).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (q0, q1, tol = 1e-9))]
fn policy_equivalent(q0: &PyQFunction, q1: &PyQFunction, tol: f64) -> PyResult<bool> {
    qcore::policy_equivalent(&q0.inner, &q1.inner, tol).map_err(err)
}

/// Result of a policy fit.
#[pyclass(name = "FitResult")]
struct PyFitResult {
    #[pyo3(get)]
    psi_hat: Vec<f64>,
    #[pyo3(get)]
    alpha_hat: Vec<f64>,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    loss: f64,
    #[pyo3(get)]
    gradient_norm: f64,
    #[pyo3(get)]
    covariance: Vec<Vec<f64>>,
    #[pyo3(get)]
    diagnostics: Vec<String>,
}

impl From<est::FitResult> for PyFitResult {
    fn from(f: est::FitResult) -> Self {
        PyFitResult {
            psi_hat: f.psi_hat,
            alpha_hat: f.alpha_hat,
            converged: f.converged,
            iterations: f.iterations,
            loss: f.loss_at_optimum,
            gradient_norm: f.gradient_norm,
            covariance: f.sandwich_covariance,
            diagnostics: f.diagnostics,
        }
    }
}

#[pymethods]
impl PyFitResult {
    fn __repr__(&self) -> String {
        format!(
            "FitResult(psi_hat={:?}, alpha_hat={:?}, converged={})",
            self.psi_hat, self.alpha_hat, self.converged
        )
    }
}

fn build_dataset(
    x: Vec<Vec<f64>>,
    a: Vec<i64>,
    y: Vec<f64>,
    p: Vec<f64>,
) -> PyResult<(TrajectoryDataset, ActionSet, usize)> {
    let dim = x.first().map(|v| v.len()).unwrap_or(0);
    let xs: Vec<CovariatePoint> = x
        .into_iter()
        .map(CovariatePoint::new)
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let data = TrajectoryDataset::single_stage(xs, a, y, p).map_err(err)?;
    let mut labels: Vec<i64> = data
        .trajectories()
        .iter()
        .map(|tr| tr.stages[0].action)
        .collect();
    labels.sort_unstable();
    labels.dedup();
    let actions = ActionSet::new(labels).map_err(err)?;
    Ok((data, actions, dim))
}

/// Minimum gamma-power divergence fit on flat single-stage records with the
/// linear numeric-action features. The flat psi layout is [psi0, psi1..].
#[pyfunction]
#[pyo3(signature = (x, a, y, p, gamma, seed = 0, restarts = 5))]
fn fit_gamma_mde(
    x: Vec<Vec<f64>>,
    a: Vec<i64>,
    y: Vec<f64>,
    p: Vec<f64>,
    gamma: f64,
    seed: u64,
    restarts: usize,
) -> PyResult<PyFitResult> {
    let (data, actions, dim) = build_dataset(x, a, y, p)?;
    let template =
        PolicyComponent::template(FeatureMaps::LinearNumericAction { covariate_dim: dim }, actions);
    let mut config = est::FitConfig::new(est::FitMethod::GammaMde, gamma);
    config.seed = seed;
    config.restarts = restarts;
    Ok(est::fit_gamma_mde(&data, &template, &config).map_err(err)?.into())
}

/// Minimum beta-power divergence fit (joint nuisance and policy parameters).
#[pyfunction]
#[pyo3(signature = (x, a, y, p, beta, seed = 0, restarts = 5))]
fn fit_beta_mde(
    x: Vec<Vec<f64>>,
    a: Vec<i64>,
    y: Vec<f64>,
    p: Vec<f64>,
    beta: f64,
    seed: u64,
    restarts: usize,
) -> PyResult<PyFitResult> {
    let (data, actions, dim) = build_dataset(x, a, y, p)?;
    let model = ModelQFunction {
        nuisance: NuisanceComponent::ParametricLinear { alpha: vec![0.0; dim + 1] },
        policy_part: PolicyComponent::template(
            FeatureMaps::LinearNumericAction { covariate_dim: dim },
            actions,
        ),
    };
    let mut config = est::FitConfig::new(est::FitMethod::BetaMde, beta);
    config.seed = seed;
    config.restarts = restarts;
    Ok(est::fit_beta_mde(&data, &model, &config).map_err(err)?.into())
}

/// Maximum-likelihood Q-learning fit (exponential outcome, log link).
#[pyfunction]
#[pyo3(signature = (x, a, y, p, seed = 0, restarts = 5))]
fn fit_ml(
    x: Vec<Vec<f64>>,
    a: Vec<i64>,
    y: Vec<f64>,
    p: Vec<f64>,
    seed: u64,
    restarts: usize,
) -> PyResult<PyFitResult> {
    let (data, actions, dim) = build_dataset(x, a, y, p)?;
    let model = ModelQFunction {
        nuisance: NuisanceComponent::ParametricLinear { alpha: vec![0.0; dim + 1] },
        policy_part: PolicyComponent::template(
            FeatureMaps::LinearNumericAction { covariate_dim: dim },
            actions,
        ),
    };
    let mut config = est::FitConfig::new(est::FitMethod::Ml, 0.0);
    config.seed = seed;
    config.restarts = restarts;
    Ok(est::fit_ml(&data, &model, &config).map_err(err)?.into())
}

fn scenario_from(name: &str) -> PyResult<sim::Scenario> {
    match name {
        "correct" => Ok(sim::Scenario::Correct),
        "misspecified" => Ok(sim::Scenario::Misspecified),
        other => Err(PyValueError::new_err(format!(
            "unknown scenario {other:?}; expected \"correct\" or \"misspecified\""
        ))),
    }
}

/// Draw one scenario dataset as flat (x, a, y, p) record columns.
#[pyfunction]
#[pyo3(signature = (scenario, n, seed, covariate_sd = 0.5))]
fn simulate_dataset(
    scenario: &str,
    n: usize,
    seed: u64,
    covariate_sd: f64,
) -> PyResult<(Vec<f64>, Vec<i64>, Vec<f64>, Vec<f64>)> {
    let config = sim::ScenarioConfig {
        scenario: scenario_from(scenario)?,
        n,
        covariate_sd,
        ..Default::default()
    };
    let data = match config.scenario {
        sim::Scenario::Correct => sim::generate_correct(&config, seed),
        sim::Scenario::Misspecified => sim::generate_misspecified(&config, seed),
    }
    .map_err(err)?;
    let mut x = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for tr in data.trajectories() {
        let s = &tr.stages[0];
        x.push(s.x.0[0]);
        a.push(s.action);
        y.push(s.reward);
        p.push(s.propensity);
    }
    Ok((x, a, y, p))
}

/// Run the replication harness; returns the per-method report as JSON.
#[pyfunction]
#[pyo3(signature = (scenario, n = 500, reps = 300, gamma = -1.5, beta = -1.5, seed = 0,
                    covariate_sd = 0.5, methods = vec!["gamma".into(), "beta".into()],
                    restarts = 0, max_failure_fraction = 0.2))]
#[allow(clippy::too_many_arguments)]
fn run_replications(
    scenario: &str,
    n: usize,
    reps: usize,
    gamma: f64,
    beta: f64,
    seed: u64,
    covariate_sd: f64,
    methods: Vec<String>,
    restarts: usize,
    max_failure_fraction: f64,
) -> PyResult<String> {
    let methods = methods
        .iter()
        .map(|m| match m.as_str() {
            "gamma" => Ok(sim::Method::Gamma),
            "beta" => Ok(sim::Method::Beta),
            "ml" => Ok(sim::Method::Ml),
            other => Err(PyValueError::new_err(format!("unknown method {other:?}"))),
        })
        .collect::<PyResult<Vec<_>>>()?;
    let config = sim::ScenarioConfig {
        scenario: scenario_from(scenario)?,
        n,
        reps,
        gamma,
        beta,
        seed,
        covariate_sd,
        methods,
        restarts,
        max_failure_fraction,
    };
    let reports = sim::run_replications(&config).map_err(err)?;
    Ok(sim::reports_to_json(&reports))
}

#[pymodule]
fn qpower_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQFunction>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(gamma_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(beta_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(ekl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(nkl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(gm_limit_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(value_gap_limit, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_identity_check, m)?)?;
    m.add_function(wrap_pyfunction!(policy_equivalent, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gamma_mde, m)?)?;
    m.add_function(wrap_pyfunction!(fit_beta_mde, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ml, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_replications, m)?)?;
    Ok(())
}
