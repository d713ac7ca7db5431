//! Python bindings: configs, training, forecasting, metrics.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use srnn::config::RunConfig;
use srnn::forecast::ForecastResult;
use srnn::gaussian::GaussianDiag;
use srnn::trainer::Checkpoint;
use srnn::{pipeline, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Resolved run configuration.
#[pyclass(name = "RunConfig", module = "srnn_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults of a bundled profile.
    #[staticmethod]
    fn profile(name: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::profile(name).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (text, profile=None))]
    fn from_toml(text: &str, profile: Option<&str>) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::from_toml_str(text, profile).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, profile=None))]
    fn load(path: &str, profile: Option<&str>) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(path, profile).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.profile.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn n_sims(&self) -> usize {
        self.inner.forecast.n_sims
    }

    #[setter]
    fn set_n_sims(&mut self, n: usize) -> PyResult<()> {
        if n == 0 {
            return Err(PyValueError::new_err("n_sims must be positive"));
        }
        self.inner.forecast.n_sims = n;
        Ok(())
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.training.epochs
    }

    #[setter]
    fn set_epochs(&mut self, n: usize) -> PyResult<()> {
        if n == 0 {
            return Err(PyValueError::new_err("epochs must be positive"));
        }
        self.inner.training.epochs = n;
        Ok(())
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.split.pred
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(profile={:?}, seed={}, {})",
            self.inner.profile,
            self.inner.seed,
            self.inner.model_dims(self.inner.data.covariates.len())
        )
    }
}

/// Monte-Carlo forecast in original units.
#[pyclass(name = "Forecast", module = "srnn_py")]
struct PyForecast {
    inner: ForecastResult,
}

#[pymethods]
impl PyForecast {
    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean.clone()
    }

    #[getter]
    fn paths(&self) -> Vec<Vec<f64>> {
        self.inner.paths.clone()
    }

    #[getter]
    fn levels(&self) -> Vec<f64> {
        self.inner.levels.clone()
    }

    #[getter]
    fn quantiles(&self) -> Vec<Vec<f64>> {
        self.inner.quantiles.clone()
    }

    #[getter]
    fn n_sims(&self) -> usize {
        self.inner.n_sims
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    fn quantile(&self, level: f64) -> PyResult<Vec<f64>> {
        self.inner
            .quantile(level)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| PyValueError::new_err(format!("level {level} was not computed")))
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_csv(&mut buf).map_err(py_err)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Trained parameters with the configuration and scaler they were fit under.
#[pyclass(name = "Model", module = "srnn_py")]
struct PyModel {
    inner: Checkpoint,
    train_elbo: Vec<f64>,
    val_elbo: Vec<f64>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn train(py: Python<'_>, config: &PyRunConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let (ck, report) = py
            .detach(|| {
                let prepared = pipeline::prepare(&cfg)?;
                pipeline::train_model(&cfg, &prepared)
            })
            .map_err(py_err)?;
        Ok(PyModel {
            inner: ck,
            train_elbo: report.train_elbo,
            val_elbo: report.val_elbo,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: Checkpoint::load(path).map_err(py_err)?,
            train_elbo: Vec::new(),
            val_elbo: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn dims(&self) -> String {
        self.inner.model.dims().to_string()
    }

    /// Per-step training bound by epoch; empty for loaded models.
    #[getter]
    fn train_elbo(&self) -> Vec<f64> {
        self.train_elbo.clone()
    }

    #[getter]
    fn val_elbo(&self) -> Vec<f64> {
        self.val_elbo.clone()
    }

    /// Conditions on the configured window and simulates the prediction span.
    #[pyo3(signature = (config=None))]
    fn forecast(&self, py: Python<'_>, config: Option<&PyRunConfig>) -> PyResult<PyForecast> {
        let cfg = config.map_or_else(|| self.inner.config.clone(), |c| c.inner.clone());
        let ck = &self.inner;
        let result = py
            .detach(|| {
                let prepared = pipeline::prepare_with(&cfg, ck.scaler.clone())?;
                pipeline::forecast(&cfg, ck, &prepared)
            })
            .map_err(py_err)?;
        Ok(PyForecast { inner: result })
    }
}

/// Root-mean-squared error divided by the mean of `y_true`.
#[pyfunction]
fn nrmse(y_true: Vec<f64>, y_pred: Vec<f64>) -> PyResult<f64> {
    srnn::metrics::nrmse(&y_true, &y_pred).map_err(py_err)
}

#[pyfunction]
fn rmse(y_true: Vec<f64>, y_pred: Vec<f64>) -> PyResult<f64> {
    srnn::metrics::rmse(&y_true, &y_pred).map_err(py_err)
}

/// KL(q || p) between diagonal Gaussians.
#[pyfunction]
fn kl_diag(q_mean: Vec<f64>, q_scale: Vec<f64>, p_mean: Vec<f64>, p_scale: Vec<f64>) -> PyResult<f64> {
    let q = GaussianDiag::new(q_mean, q_scale).map_err(py_err)?;
    let p = GaussianDiag::new(p_mean, p_scale).map_err(py_err)?;
    q.kl(&p).map_err(py_err)
}

#[pyfunction]
fn ar1_forecast(y_last: f64, tau: usize) -> PyResult<Vec<f64>> {
    srnn::baselines::ar1_forecast(y_last, tau).map_err(py_err)
}

/// Per-step mean and nearest-rank quantiles of equal-length paths.
#[pyfunction]
#[pyo3(signature = (paths, levels=None))]
fn summarize(paths: Vec<Vec<f64>>, levels: Option<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let levels = levels.unwrap_or_else(|| srnn::forecast::DEFAULT_LEVELS.to_vec());
    srnn::forecast::summarize(&paths, &levels).map_err(py_err)
}

/// Trains all enabled models; returns `(cutoffs, [(label, nrmse per cutoff)])`.
#[pyfunction]
fn benchmark(py: Python<'_>, config: &PyRunConfig) -> PyResult<(Vec<usize>, Vec<(String, Vec<f64>)>)> {
    let cfg = config.inner.clone();
    let bench = py.detach(|| pipeline::benchmark(&cfg)).map_err(py_err)?;
    let cutoffs = bench.reports[0].cutoffs.clone();
    let rows = bench.reports.into_iter().map(|r| (r.label, r.nrmse)).collect();
    Ok((cutoffs, rows))
}

#[pymodule]
fn srnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyForecast>()?;
    m.add_function(wrap_pyfunction!(nrmse, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(kl_diag, m)?)?;
    m.add_function(wrap_pyfunction!(ar1_forecast, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add("PROFILES", srnn::config::PROFILES.to_vec())?;
    Ok(())
}
