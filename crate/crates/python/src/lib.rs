use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use givehr::baselines::Estimator;
use givehr::benchmark::{run_replications, BenchmarkConfig};
use givehr::dataset::{self, ColumnSchema, CovariateSpec};
use givehr::error::GivehrError;
use givehr::inference::{bootstrap_variance, sandwich_variance, SeMethod};
use givehr::outcome::GivehrConfig;
use givehr::simulate::{self, Scenario, ScenarioSpec};

fn to_py(e: GivehrError) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn py_to_json<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>, what: &str) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

/// Returns `(k, E[Phi], kappa)` for the probit-normal kernel.
#[pyfunction]
fn probit_kernel(a: f64, b: f64, d: f64, mu: f64, var: f64) -> (f64, f64, f64) {
    let k = givehr::observation::probit_kernel(a, b, d, mu, var);
    (k.k, k.mean_prob, k.ratio)
}

/// Laplace posterior `(mu_U, s_U^2)` of the standardized frailty.
#[pyfunction]
fn eb_posterior(m: usize, nu: f64, sigma: f64, mu0: f64) -> (f64, f64) {
    let p = givehr::visiting::eb_posterior(m, nu, sigma, mu0);
    (p.mu_u, p.s_u_sq)
}

#[pyclass(frozen)]
struct Cohort {
    inner: dataset::Cohort,
}

#[pymethods]
impl Cohort {
    /// Load a long-format CSV. `roles` is a dict with the five role keys.
    #[staticmethod]
    #[pyo3(signature = (path, roles, tau=None))]
    fn from_csv(path: &str, roles: &Bound<'_, PyAny>, tau: Option<f64>) -> PyResult<Self> {
        let spec: CovariateSpec = py_to_json(roles, "roles")?;
        let inner =
            dataset::load_long_csv(path, &spec, &ColumnSchema::default(), tau).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Simulate a scenario; returns `(cohort, truth)`.
    #[staticmethod]
    #[pyo3(signature = (scenario, n, seed=0))]
    fn simulate<'py>(
        py: Python<'py>,
        scenario: &str,
        n: usize,
        seed: u64,
    ) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let scenario: Scenario = scenario.parse().map_err(to_py)?;
        let (inner, truth) =
            simulate::generate(&ScenarioSpec::new(scenario, n, seed)).map_err(to_py)?;
        Ok((Self { inner }, json_to_py(py, &truth)?))
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        dataset::write_long_csv(&self.inner, path, &ColumnSchema::default()).map_err(to_py)
    }

    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &dataset::validate(&self.inner))
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn total_visits(&self) -> usize {
        self.inner.total_visits()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "Cohort(n={}, visits={})",
            self.inner.n(),
            self.inner.total_visits()
        )
    }
}

/// Fit the three-stage estimator. The result holds `names`, `estimates`, `se`
/// (or None) and the full `model`.
#[pyfunction]
#[pyo3(signature = (cohort, se="sandwich", boot_reps=200, seed=0))]
fn fit_givehr<'py>(
    py: Python<'py>,
    cohort: &Cohort,
    se: &str,
    boot_reps: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let method: SeMethod = se.parse().map_err(to_py)?;
    let data = &cohort.inner;
    let (fit, variance) = py
        .detach(|| {
            let config = GivehrConfig::default();
            let fit = givehr::outcome::fit_givehr(data, &config)?;
            let variance = match method {
                SeMethod::None => None,
                SeMethod::Sandwich => Some(sandwich_variance(&fit, data)?),
                SeMethod::Bootstrap => {
                    Some(bootstrap_variance(data, &config, boot_reps, seed, &fit)?)
                }
            };
            Ok((fit, variance))
        })
        .map_err(to_py)?;
    let out = PyDict::new(py);
    let se: Option<Vec<Option<f64>>> = variance
        .as_ref()
        .map(|v| fit.names.iter().map(|n| v.se_of(n)).collect());
    out.set_item("names", fit.names.clone())?;
    out.set_item("estimates", fit.coefficients())?;
    out.set_item("se", se)?;
    out.set_item("model", json_to_py(py, &fit)?)?;
    out.set_item("variance", json_to_py(py, &variance)?)?;
    Ok(out)
}

/// Replication study; returns the table rows as dicts.
#[pyfunction]
#[pyo3(signature = (scenario, n=1000, reps=200, methods="givehr", seed=0, se="none"))]
fn run_benchmark<'py>(
    py: Python<'py>,
    scenario: &str,
    n: usize,
    reps: usize,
    methods: &str,
    seed: u64,
    se: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let scenario: Scenario = scenario.parse().map_err(to_py)?;
    let estimators = Estimator::parse_list(methods).map_err(to_py)?;
    let mut config = BenchmarkConfig::new(scenario, n, estimators, reps, seed);
    config.se = se.parse().map_err(to_py)?;
    let result = py.detach(|| run_replications(&config)).map_err(to_py)?;
    json_to_py(py, &result.table)
}

#[pymodule]
fn givehr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Cohort>()?;
    m.add_function(wrap_pyfunction!(probit_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(eb_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(fit_givehr, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
