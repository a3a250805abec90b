//! Python bindings: datasets, simulation, fitting and posterior summaries.

use std::fs;
use std::io::BufReader;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use hdlm::cli::RunConfig;
use hdlm::data::{load_dataset, ModifierSchema};
use hdlm::error::HdlmError;
use hdlm::posterior::{self, DlmEstimate, Predicate, SubgroupMode};
use hdlm::samplers::{self, FitConfig, ModelKind};
use hdlm::simulation::{simulate_replicate, Scenario, ScenarioSpec};

fn py_err(e: HdlmError) -> PyErr {
    match e {
        HdlmError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A validated dataset.
#[pyclass(name = "Dataset", module = "hdlm_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: hdlm::data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Loads a CSV with a TOML modifier schema. Exposure columns are every
    /// `exposure_prefix<k>` column in numeric order unless `exposures` is given.
    #[staticmethod]
    #[pyo3(signature = (path, schema, outcome="y", exposures=None, exposure_prefix="x", fixed=None, intercept=true))]
    fn from_csv(
        path: PathBuf,
        schema: PathBuf,
        outcome: &str,
        exposures: Option<Vec<String>>,
        exposure_prefix: &str,
        fixed: Option<Vec<String>>,
        intercept: bool,
    ) -> PyResult<Self> {
        let run = RunConfig {
            outcome: outcome.to_string(),
            exposures: exposures.unwrap_or_default(),
            exposure_prefix: exposure_prefix.to_string(),
            fixed: fixed.unwrap_or_default(),
            intercept,
            ..RunConfig::default()
        };
        let schema = ModifierSchema::load(&schema).map_err(py_err)?;
        let header: Vec<String> = {
            let file = fs::File::open(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
            let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
            rdr.headers()
                .map_err(|e| PyValueError::new_err(e.to_string()))?
                .iter()
                .map(|s| s.trim().to_string())
                .collect()
        };
        let map = run.column_map(&header).map_err(py_err)?;
        let inner = load_dataset(&path, &schema, &map).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn lags(&self) -> usize {
        self.inner.lags
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p
    }

    #[getter]
    fn modifier_names(&self) -> Vec<String> {
        self.inner.schema.names().iter().map(|s| s.to_string()).collect()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }

    /// Coded modifier values of row `i`.
    fn modifier_row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.inner.m_row(i).to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, lags={}, p={}, q={})",
            self.inner.n,
            self.inner.lags,
            self.inner.p,
            self.inner.q()
        )
    }
}

/// Pointwise curve summary.
#[pyclass(name = "Estimate", module = "hdlm_py", frozen, get_all)]
struct PyEstimate {
    level: f64,
    mean: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    window: Vec<bool>,
}

impl From<DlmEstimate> for PyEstimate {
    fn from(e: DlmEstimate) -> Self {
        Self {
            level: e.level,
            mean: e.mean,
            lower: e.lower,
            upper: e.upper,
            window: e.window,
        }
    }
}

#[pymethods]
impl PyEstimate {
    fn __repr__(&self) -> String {
        let w: Vec<String> = self
            .window
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(|(t, _)| (t + 1).to_string())
            .collect();
        format!("Estimate(lags={}, window=[{}])", self.mean.len(), w.join(", "))
    }
}

/// Posterior draws from one fit.
#[pyclass(name = "Posterior", module = "hdlm_py", frozen)]
struct PyPosterior {
    inner: samplers::PosteriorDraws,
}

#[pymethods]
impl PyPosterior {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let file = fs::File::open(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        let inner = samplers::read_draws(BufReader::new(file)).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut buf = Vec::new();
        samplers::write_draws(&self.inner, "hdlm python", &mut buf).map_err(py_err)?;
        fs::write(&path, buf).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))
    }

    #[getter]
    fn n_draws(&self) -> usize {
        self.inner.draws.len()
    }

    #[getter]
    fn model(&self) -> String {
        self.inner.header.model().to_string()
    }

    #[getter]
    fn modifier_names(&self) -> Vec<String> {
        self.inner.schema().names().iter().map(|s| s.to_string()).collect()
    }

    #[getter]
    fn sigma2(&self) -> Vec<f64> {
        self.inner.draws.iter().map(|d| d.sigma2).collect()
    }

    #[getter]
    fn fitted(&self) -> Vec<f64> {
        self.inner.fitted.clone()
    }

    /// Lag curve at one coded modifier row.
    #[pyo3(signature = (modifiers, level=0.95))]
    fn theta(&self, modifiers: Vec<f64>, level: f64) -> PyResult<PyEstimate> {
        let (_, est) = posterior::theta_for(&self.inner, &modifiers, level).map_err(py_err)?;
        Ok(est.into())
    }

    /// `(mean, lower, upper)` of the cumulative effect of an exposure increment.
    #[pyo3(signature = (modifiers, increment=1.0, level=0.95))]
    fn cumulative(&self, modifiers: Vec<f64>, increment: f64, level: f64) -> PyResult<(f64, f64, f64)> {
        let c = posterior::cumulative_effect(&self.inner, &modifiers, increment, level).map_err(py_err)?;
        Ok((c.mean, c.lower, c.upper))
    }

    /// Subgroup curve for a predicate such as `"old: age >= 35 & smoker == yes"`.
    #[pyo3(signature = (predicate, data, mode="average", level=0.95))]
    fn subgroup(&self, predicate: &str, data: &PyDataset, mode: &str, level: f64) -> PyResult<PyEstimate> {
        let p: Predicate = predicate.parse().map_err(py_err)?;
        let mode = match mode {
            "average" => SubgroupMode::Average,
            "representative" => SubgroupMode::Representative,
            other => return Err(PyValueError::new_err(format!("unknown mode '{other}'"))),
        };
        let est = posterior::subgroup_curve(&self.inner, &p, &data.inner, mode, level).map_err(py_err)?;
        Ok(est.into())
    }

    /// Modifier name to inclusion probability.
    fn pip(&self) -> PyResult<Vec<(String, f64)>> {
        let t = posterior::pip(&self.inner).map_err(py_err)?;
        Ok(t.names.into_iter().zip(t.pip).collect())
    }

    fn interaction_pip(&self, a: &str, b: &str) -> PyResult<f64> {
        let t = posterior::pip(&self.inner).map_err(py_err)?;
        t.interaction_of(a, b)
            .ok_or_else(|| PyValueError::new_err(format!("unknown modifier pair ({a}, {b})")))
    }

    fn predict(&self, data: &PyDataset) -> PyResult<Vec<f64>> {
        posterior::predict(&self.inner, &data.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Posterior(model={}, draws={})", self.inner.header.model(), self.inner.draws.len())
    }
}

/// Fits a model; `modifiers` restricts the modifier set.
#[pyfunction]
#[pyo3(signature = (
    data, model="hdlm-nested", trees=20, iterations=10_000, burn_in=5_000, thin=5,
    seed=1, chains=1, modifiers=None,
))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    data: &PyDataset,
    model: &str,
    trees: usize,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
    chains: usize,
    modifiers: Option<Vec<String>>,
) -> PyResult<PyPosterior> {
    let model: ModelKind = model.parse().map_err(py_err)?;
    let cfg = FitConfig {
        model,
        trees,
        iterations,
        burn_in,
        thin,
        seed,
        chains,
        ..FitConfig::default()
    };
    let ds = data.inner.clone();
    let inner = py
        .detach(|| samplers::fit(&ds, modifiers.as_deref(), &cfg))
        .map_err(py_err)?;
    Ok(PyPosterior { inner })
}

/// Simulates one scenario; returns `(train, test, truth_train)` where the
/// truth is the per-row scaled lag curve.
#[pyfunction]
#[pyo3(signature = (scenario, n=5000, sigma2=10.0, seed=1, lags=37, test_n=0))]
fn simulate(
    scenario: &str,
    n: usize,
    sigma2: f64,
    seed: u64,
    lags: usize,
    test_n: usize,
) -> PyResult<(PyDataset, Option<PyDataset>, Vec<Vec<f64>>)> {
    let scenario: Scenario = scenario.parse().map_err(py_err)?;
    let spec = ScenarioSpec {
        scenario,
        n,
        sigma2,
        seed,
        lags,
        test_n,
        ..ScenarioSpec::default()
    };
    let rep = simulate_replicate(&spec).map_err(py_err)?;
    let truth = (0..rep.truth_train.n()).map(|i| rep.truth_train.scaled_theta(i)).collect();
    let test = (test_n > 0).then_some(PyDataset { inner: rep.test });
    Ok((PyDataset { inner: rep.train }, test, truth))
}

#[pymodule]
fn hdlm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEstimate>()?;
    m.add_class::<PyPosterior>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
