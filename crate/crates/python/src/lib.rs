//! Python bindings: configuration, end-to-end runs, simulation, IRF1
//! reading and the analytic pieces (Airy optics, thresholds, decay-aware
//! likelihood).

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ionreadout::harness::{self, pipeline, Executor, ExperimentConfig};
use ionreadout::metrics::EpsilonReport;
use ionreadout::optics::{self, PointSpreadFunction};
use ionreadout::{classify, emccd, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Experiment configuration. Unset keys take the experiment's defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults for `experiment` (single_exposure, time_resolved, qunybble
    /// or crosstalk_study).
    #[new]
    fn new(experiment: &str, seed: u64) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml(&format!("experiment = {experiment:?}\n"), Some(seed))
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (text, seed=None))]
    fn from_toml(text: &str, seed: Option<u64>) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml(text, seed).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn experiment(&self) -> String {
        let t = toml::Value::try_from(self.inner.experiment).expect("enum serialises");
        t.as_str().unwrap_or_default().to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn trials(&self) -> u64 {
        self.inner.trials
    }

    #[setter]
    fn set_trials(&mut self, v: u64) -> PyResult<()> {
        if v == 0 {
            return Err(PyValueError::new_err("trials must be positive"));
        }
        self.inner.trials = v;
        Ok(())
    }

    #[getter]
    fn threads(&self) -> usize {
        self.inner.threads
    }

    #[setter]
    fn set_threads(&mut self, v: usize) {
        self.inner.threads = v;
    }

    #[getter]
    fn bright_counts(&self) -> f64 {
        self.inner.signal.bright_counts_per_400us
    }

    #[setter]
    fn set_bright_counts(&mut self, v: f64) -> PyResult<()> {
        let old = self.inner.signal.bright_counts_per_400us;
        self.inner.signal.bright_counts_per_400us = v;
        if let Err(e) = self.inner.validate() {
            self.inner.signal.bright_counts_per_400us = old;
            return Err(py_err(e));
        }
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(experiment={:?}, seed={}, trials={})",
            self.experiment(),
            self.inner.seed,
            self.inner.trials
        )
    }
}

/// Error estimate for one method and ROI size.
#[pyclass(name = "Report", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyReport {
    method: String,
    n: usize,
    epsilon: f64,
    epsilon_b: f64,
    epsilon_d: f64,
    sigma: f64,
    epsilon_x: f64,
    sigma_x: f64,
    n_trials: u64,
    n_retained: u64,
    mean_used: Option<f64>,
}

impl From<&EpsilonReport> for PyReport {
    fn from(r: &EpsilonReport) -> Self {
        Self {
            method: r.method.clone(),
            n: r.n,
            epsilon: r.epsilon,
            epsilon_b: r.epsilon_b,
            epsilon_d: r.epsilon_d,
            sigma: r.sigma,
            epsilon_x: r.epsilon_x,
            sigma_x: r.sigma_x,
            n_trials: r.n_trials,
            n_retained: r.n_retained,
            mean_used: r.mean_used,
        }
    }
}

#[pymethods]
impl PyReport {
    fn __repr__(&self) -> String {
        format!(
            "Report(method={:?}, N={}, epsilon={:.3e}, epsilon_x={:.3e})",
            self.method, self.n, self.epsilon, self.epsilon_x
        )
    }
}

fn toml_to_py<'py>(py: Python<'py>, v: &toml::Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        toml::Value::Integer(i) => i.into_pyobject(py)?.into_any(),
        toml::Value::Float(f) => f.into_pyobject(py)?.into_any(),
        toml::Value::Boolean(b) => b.into_pyobject(py)?.to_owned().into_any(),
        toml::Value::String(s) => s.into_pyobject(py)?.into_any(),
        other => other.to_string().into_pyobject(py)?.into_any(),
    })
}

fn executor(cfg: &ExperimentConfig) -> PyResult<Executor> {
    Executor::new(cfg.threads, cfg.batch_size).map_err(py_err)
}

/// Runs the configured experiment. Returns (reports, derived); when
/// `out_dir` is given the CSVs and manifest are written there too.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None))]
fn run<'py>(
    py: Python<'py>,
    config: &PyConfig,
    out_dir: Option<PathBuf>,
) -> PyResult<(Vec<PyReport>, Bound<'py, PyDict>)> {
    let cfg = &config.inner;
    let exec = executor(cfg)?;
    let out = py
        .detach(|| harness::run_experiment(cfg, &exec))
        .map_err(py_err)?;
    if let Some(dir) = out_dir {
        harness::write_run(&dir, cfg, &out).map_err(py_err)?;
    }
    let derived = PyDict::new(py);
    for (k, v) in &out.derived {
        derived.set_item(k, toml_to_py(py, v)?)?;
    }
    Ok((out.reports.iter().map(PyReport::from).collect(), derived))
}

/// Simulates `config.trials` trials. Returns (width, height, frames,
/// labels): frames are flat row-major count lists, labels are the label
/// sidecar lines. Writes frames.irf1 and labels.txt when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None))]
fn simulate(
    py: Python<'_>,
    config: &PyConfig,
    out_dir: Option<PathBuf>,
) -> PyResult<(usize, usize, Vec<Vec<u32>>, Vec<String>)> {
    let cfg = &config.inner;
    let exec = executor(cfg)?;
    let (frames, labels) = py
        .detach(|| pipeline::simulate(cfg, &exec, "test"))
        .map_err(py_err)?;
    if let Some(dir) = out_dir {
        pipeline::write_dataset(&dir, &frames, &labels).map_err(py_err)?;
    }
    let mut text = Vec::new();
    harness::io::write_labels(&mut text, &labels).map_err(py_err)?;
    let lines = String::from_utf8(text)
        .expect("labels are ASCII")
        .lines()
        .map(str::to_string)
        .collect();
    let (w, h) = frames.first().map(|f| (f.width, f.height)).unwrap_or((0, 0));
    Ok((w, h, frames.into_iter().map(|f| f.counts).collect(), lines))
}

/// Reads an IRF1 file into (width, height, frames).
#[pyfunction]
fn read_irf1(path: PathBuf) -> PyResult<(usize, usize, Vec<Vec<u32>>)> {
    let f = File::open(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    let frames = emccd::read_irf1(BufReader::new(f)).map_err(py_err)?;
    let (w, h) = frames.first().map(|f| (f.width, f.height)).unwrap_or((0, 0));
    Ok((w, h, frames.into_iter().map(|f| f.counts).collect()))
}

/// Fraction of an Airy pattern's energy within `r_um` of its centre.
#[pyfunction]
#[pyo3(signature = (r_um, wavelength_nm=397.0, numerical_aperture=0.25))]
fn airy_encircled_energy(r_um: f64, wavelength_nm: f64, numerical_aperture: f64) -> PyResult<f64> {
    let psf = PointSpreadFunction::airy(wavelength_nm * 1e-9, numerical_aperture).map_err(py_err)?;
    Ok(psf.encircled_energy(r_um))
}

#[pyfunction]
#[pyo3(signature = (wavelength_nm=397.0, numerical_aperture=0.25))]
fn airy_first_null_diameter_um(wavelength_nm: f64, numerical_aperture: f64) -> f64 {
    2.0 * optics::airy_first_null_radius_um(wavelength_nm * 1e-9, numerical_aperture)
}

/// Fraction of `source_ion`'s light inside a circular ROI of
/// `diameter_um` centred on `roi_ion`, for the configured geometry and PSF.
#[pyfunction]
fn crosstalk_fraction(config: &PyConfig, roi_ion: usize, source_ion: usize, diameter_um: f64) -> PyResult<f64> {
    let model = config.inner.imaging_model().map_err(py_err)?;
    let center = *model
        .ion_positions_um
        .get(roi_ion)
        .ok_or_else(|| PyValueError::new_err(format!("no ion {roi_ion}")))?;
    optics::crosstalk_fraction(&model, center, diameter_um, source_ion).map_err(py_err)
}

/// Best integer threshold for two count-sum histograms: (theta, error).
#[pyfunction]
fn optimize_threshold(bright: Vec<u64>, dark: Vec<u64>) -> PyResult<(u64, f64)> {
    let c = classify::optimize_threshold(&bright, &dark).map_err(py_err)?;
    Ok((c.theta, c.error))
}

/// ln p_D over a sequence of exposures of length `t_s`, allowing one decay
/// at the start of any exposure.
#[pyfunction]
fn spatiotemporal_log_pd(ln_pb: Vec<f64>, ln_pd: Vec<f64>, t_s: f64, tau: f64) -> PyResult<f64> {
    classify::spatiotemporal_log_pd(&ln_pb, &ln_pd, t_s, tau).map_err(py_err)
}

#[pymodule]
fn ionreadout_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(read_irf1, m)?)?;
    m.add_function(wrap_pyfunction!(airy_encircled_energy, m)?)?;
    m.add_function(wrap_pyfunction!(airy_first_null_diameter_um, m)?)?;
    m.add_function(wrap_pyfunction!(crosstalk_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(spatiotemporal_log_pd, m)?)?;
    Ok(())
}
