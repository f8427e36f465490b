//! Python bindings for `windhmm`.
//!
//! Structured results cross the boundary as JSON and come back as plain
//! dicts and lists. Observations are two parallel lists: speeds as
//! `int | None` and directions as integer degrees, `"CALM"` or `None`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

use windhmm::circular::{
    iwp_concentration, iwp_mean, iwp_pmf, DiscreteCircle, GridPoint, IwpParams, Orientation, WindingConfig,
};
use windhmm::config::ConfigFile;
use windhmm::emission::{ObservationCell, RecordedDirection};
use windhmm::gibbs::{run_chain, ChainConfig, Draw, Sampler as CoreSampler};
use windhmm::simulate::{builtin_example, simulate_seeded, CensorRule, Dropout};

fn err(e: windhmm::Error) -> PyErr {
    match e {
        windhmm::Error::Io { .. } | windhmm::Error::Degenerate(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = value.py().import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn circle(grid_points: usize) -> PyResult<DiscreteCircle> {
    DiscreteCircle::new(grid_points).map_err(err)
}

fn orientation(eta: i8) -> PyResult<Orientation> {
    match eta {
        1 => Ok(Orientation::Positive),
        -1 => Ok(Orientation::Negative),
        _ => Err(PyValueError::new_err(format!("eta must be 1 or -1, got {eta}"))),
    }
}

fn observations(
    speed: Vec<Option<u32>>,
    direction: Vec<Option<Bound<'_, PyAny>>>,
    circle: &DiscreteCircle,
) -> PyResult<Vec<ObservationCell>> {
    if speed.len() != direction.len() {
        return Err(PyValueError::new_err(format!(
            "speed has {} entries but direction has {}",
            speed.len(),
            direction.len()
        )));
    }
    speed
        .into_iter()
        .zip(direction)
        .map(|(y, d)| {
            let x = match d {
                None => RecordedDirection::Missing,
                Some(v) if v.is_instance_of::<PyString>() => {
                    let s: String = v.extract()?;
                    if !s.eq_ignore_ascii_case("CALM") {
                        return Err(PyValueError::new_err(format!("unknown direction marker {s:?}")));
                    }
                    RecordedDirection::Calm
                }
                Some(v) => RecordedDirection::Grid(circle.from_degrees(v.extract::<i64>()?).map_err(err)?),
            };
            ObservationCell::new(y, x).map_err(err)
        })
        .collect()
}

fn direction_value(py: Python<'_>, x: RecordedDirection, circle: &DiscreteCircle) -> PyResult<Py<PyAny>> {
    Ok(match x {
        RecordedDirection::Grid(p) => (circle.degrees(p).round() as i64).into_pyobject(py)?.into_any().unbind(),
        RecordedDirection::Calm => "CALM".into_pyobject(py)?.into_any().unbind(),
        RecordedDirection::Missing => py.None(),
    })
}

fn chain_config(
    config: Option<&str>,
    n_iter: Option<usize>,
    burn_in: Option<usize>,
    thin: Option<usize>,
    seed: Option<u64>,
) -> PyResult<ChainConfig> {
    let mut file = match config {
        Some(text) => ConfigFile::parse(text).map_err(err)?,
        None => ConfigFile::default(),
    };
    if let Some(v) = n_iter {
        file.n_iter = v;
    }
    if let Some(v) = burn_in {
        file.burn_in = v;
    }
    if let Some(v) = thin {
        file.thin = v;
    }
    if let Some(v) = seed {
        file.seed = v;
    }
    file.chain_config().map_err(err)
}

/// Simulate a built-in example; returns recorded and true series.
#[pyfunction]
#[pyo3(signature = (example, seed=0, length=None, censor="identity", speed_dropout=0.0, direction_dropout=0.0))]
fn simulate(
    py: Python<'_>,
    example: u32,
    seed: u64,
    length: Option<usize>,
    censor: &str,
    speed_dropout: f64,
    direction_dropout: f64,
) -> PyResult<Py<PyAny>> {
    let mut spec = builtin_example(example).map_err(err)?;
    spec.seed = seed;
    spec.censor = match censor {
        "identity" => CensorRule::Identity,
        "uniform" => CensorRule::Uniform,
        "zero" => CensorRule::Zero,
        other => return Err(PyValueError::new_err(format!("unknown censor rule {other:?}"))),
    };
    spec.dropout = Dropout {
        speed: speed_dropout,
        direction: direction_dropout,
    };
    if let Some(len) = length {
        spec.len = len;
    }
    let data = simulate_seeded(&spec).map_err(err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("speed", data.observations.iter().map(|o| o.y_star).collect::<Vec<_>>())?;
    let dirs = data
        .observations
        .iter()
        .map(|o| direction_value(py, o.x, &spec.circle))
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("direction", dirs)?;
    out.set_item("regime", data.truth.iter().map(|t| t.state).collect::<Vec<_>>())?;
    out.set_item("truth", to_py(py, &data.truth)?)?;
    Ok(out.into_any().unbind())
}

/// Read a `timestamp,speed,direction` CSV into `(speed, direction)` lists.
#[pyfunction]
#[pyo3(signature = (path, grid_points=36))]
fn read_csv(py: Python<'_>, path: &str, grid_points: usize) -> PyResult<(Vec<Option<u32>>, Vec<Py<PyAny>>)> {
    let c = circle(grid_points)?;
    let obs = windhmm::io::ingest_csv(path, &c).map_err(err)?;
    let dirs = obs.iter().map(|o| direction_value(py, o.x, &c)).collect::<PyResult<_>>()?;
    Ok((obs.iter().map(|o| o.y_star).collect(), dirs))
}

/// Run one chain and return its retained draws as dicts.
///
/// `config` is the text of a flat TOML configuration; keyword overrides
/// apply on top of it.
#[pyfunction]
#[pyo3(signature = (speed, direction, config=None, n_iter=None, burn_in=None, thin=None, seed=None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    speed: Vec<Option<u32>>,
    direction: Vec<Option<Bound<'_, PyAny>>>,
    config: Option<&str>,
    n_iter: Option<usize>,
    burn_in: Option<usize>,
    thin: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Py<PyAny>> {
    let config = chain_config(config, n_iter, burn_in, thin, seed)?;
    let obs = observations(speed, direction, &config.circle)?;
    let draws = py
        .detach(|| {
            let mut draws = Vec::new();
            run_chain(obs, &config, |d| {
                draws.push(d.clone());
                Ok(())
            })
            .map(|_| draws)
        })
        .map_err(err)?;
    to_py(py, &draws)
}

/// Posterior summary of a list of draws.
#[pyfunction]
#[pyo3(signature = (draws, grid_points=36))]
fn summarize(py: Python<'_>, draws: &Bound<'_, PyAny>, grid_points: usize) -> PyResult<Py<PyAny>> {
    let draws: Vec<Draw> = from_py(draws)?;
    let summary = windhmm::summary::summarize(&draws, &circle(grid_points)?).map_err(err)?;
    to_py(py, &summary)
}

/// Per-regime predictive densities of a list of draws.
#[pyfunction]
#[pyo3(signature = (draws, grid_points=36, lambda_max=500.0, y_max=50))]
fn predictive_density(
    py: Python<'_>,
    draws: &Bound<'_, PyAny>,
    grid_points: usize,
    lambda_max: f64,
    y_max: u32,
) -> PyResult<Py<PyAny>> {
    let draws: Vec<Draw> = from_py(draws)?;
    let c = circle(grid_points)?;
    let cfg = WindingConfig::new(lambda_max, &c).map_err(err)?;
    let densities = windhmm::summary::predictive_density(&draws, &c, &cfg, y_max).map_err(err)?;
    to_py(py, &densities)
}

/// Invariant wrapped Poisson pmf over the grid.
#[pyfunction]
#[pyo3(signature = (lambda_x, eta=1, xi=0, grid_points=36, lambda_max=500.0))]
fn iwp_probabilities(lambda_x: f64, eta: i8, xi: usize, grid_points: usize, lambda_max: f64) -> PyResult<Vec<f64>> {
    let c = circle(grid_points)?;
    let cfg = WindingConfig::new(lambda_max, &c).map_err(err)?;
    let p = IwpParams::new(lambda_x, orientation(eta)?, GridPoint(xi), &c).map_err(err)?;
    c.iter().map(|x| iwp_pmf(x, &p, &c, &cfg).map_err(err)).collect()
}

/// Closed-form circular mean (radians) and concentration.
#[pyfunction]
#[pyo3(signature = (lambda_x, eta=1, xi=0, grid_points=36))]
fn iwp_moments(lambda_x: f64, eta: i8, xi: usize, grid_points: usize) -> PyResult<(f64, f64)> {
    let c = circle(grid_points)?;
    let p = IwpParams::new(lambda_x, orientation(eta)?, GridPoint(xi), &c).map_err(err)?;
    Ok((iwp_mean(&p, &c), iwp_concentration(&p, &c)))
}

/// Step-by-step access to the Gibbs sampler.
#[pyclass(module = "pywindhmm")]
struct Sampler {
    inner: CoreSampler,
    iter: usize,
}

#[pymethods]
impl Sampler {
    #[new]
    #[pyo3(signature = (speed, direction, config=None, seed=None))]
    fn new(
        speed: Vec<Option<u32>>,
        direction: Vec<Option<Bound<'_, PyAny>>>,
        config: Option<&str>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let config = chain_config(config, None, None, None, seed)?;
        let obs = observations(speed, direction, &config.circle)?;
        Ok(Self {
            inner: CoreSampler::new(obs, config).map_err(err)?,
            iter: 0,
        })
    }

    /// Run `n` full sweeps.
    #[pyo3(signature = (n=1))]
    fn sweep(&mut self, py: Python<'_>, n: usize) -> PyResult<()> {
        let inner = &mut self.inner;
        py.detach(|| (0..n).try_for_each(|_| inner.sweep())).map_err(err)?;
        self.iter += n;
        Ok(())
    }

    /// Current state as a draw dict.
    fn draw(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.draw(self.iter))
    }

    /// Current state sequence, zero-based.
    fn path(&self) -> Vec<usize> {
        self.inner.state().z.clone()
    }

    #[getter]
    fn occupied(&self) -> usize {
        self.inner.state().occupied()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.iter
    }
}

#[pymodule]
fn pywindhmm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(read_csv, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(predictive_density, m)?)?;
    m.add_function(wrap_pyfunction!(iwp_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(iwp_moments, m)?)?;
    m.add_class::<Sampler>()?;
    Ok(())
}
