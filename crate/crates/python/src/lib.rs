//! Python bindings: SGD runs, the mean-field ODE, fluctuation statistics and
//! the experiment drivers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mfsgd::harness::{self, Experiment, Scale};
use mfsgd::{
    ActivationSpec, BatchSchedule, DataModel, Error, InitSpec, IntegrateOptions, Integrator, NetworkState,
    RunStreams, TestFunction, TraceMeta, TraceSeries,
};

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyOSError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for mfsgd::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn activation(kind: &str, h: f64) -> PyResult<ActivationSpec> {
    match kind {
        "ramp" => Ok(ActivationSpec::ramp()),
        "smooth_ramp" => Ok(ActivationSpec::smooth_ramp(h)),
        other => Err(PyValueError::new_err(format!("unknown activation `{other}`"))),
    }
}

fn probe(spec: &str, d: usize) -> PyResult<TestFunction> {
    TestFunction::parse(spec, d).or_py()
}

/// `(grid, values)` pair.
type Series = (Vec<f64>, Vec<f64>);

fn series(tr: &TraceSeries) -> Series {
    (tr.grid.clone(), tr.values.clone())
}

fn trace_from(grid: Vec<f64>, values: Vec<f64>, n: usize, beta: f64) -> PyResult<TraceSeries> {
    if grid.len() != values.len() {
        return Err(PyValueError::new_err("grid and values differ in length"));
    }
    let meta = TraceMeta { n, probe: "f".into(), seed: 0, replication: 0, beta };
    let mut tr = TraceSeries::new(meta);
    for (t, v) in grid.into_iter().zip(values) {
        tr.push(t, v);
    }
    Ok(tr)
}

/// Hyper-parameters of one SGD run.
#[pyclass(name = "SgdConfig", module = "mfsgd", skip_from_py_object)]
#[derive(Clone)]
struct PySgdConfig {
    inner: mfsgd::SgdConfig,
}

#[pymethods]
impl PySgdConfig {
    #[new]
    #[pyo3(signature = (n, d, *, alpha = 0.1, beta = 1.0, noise_std = 0.1, batch = 1, seed = 0, init_std = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n: usize,
        d: usize,
        alpha: f64,
        beta: f64,
        noise_std: f64,
        batch: usize,
        seed: u64,
        init_std: Option<f64>,
    ) -> PyResult<Self> {
        let mut cfg = mfsgd::SgdConfig::new(n, d);
        cfg.alpha = alpha;
        cfg.beta = beta;
        cfg.noise_std = noise_std;
        cfg.batch = BatchSchedule::Fixed(batch);
        cfg.seed = seed;
        if let Some(std) = init_std {
            cfg.init = InitSpec::Gaussian { std };
        }
        cfg.validate().or_py()?;
        Ok(Self { inner: cfg })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn noise_std(&self) -> f64 {
        self.inner.noise_std
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn noise_scale(&self) -> f64 {
        self.inner.noise_scale()
    }

    fn steps_for(&self, t: f64) -> u64 {
        self.inner.steps_for(t)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "SgdConfig(n={}, d={}, alpha={}, beta={}, noise_std={}, seed={})",
            c.n, c.d, c.alpha, c.beta, c.noise_std, c.seed
        )
    }
}

/// A single SGD run on the two-scale Gaussian mixture.
#[pyclass(name = "Simulation", module = "mfsgd")]
struct PySimulation {
    cfg: mfsgd::SgdConfig,
    model: DataModel,
    act: ActivationSpec,
    parts: Option<(NetworkState, RunStreams)>,
}

impl PySimulation {
    fn with_sim<T>(&mut self, f: impl FnOnce(&mut mfsgd::Simulation<'_>) -> mfsgd::Result<T>) -> PyResult<T> {
        let (state, streams) = self.parts.take().expect("simulation state present");
        let mut sim = mfsgd::Simulation::from_state(&self.cfg, &self.model, &self.act, state, streams).or_py()?;
        let out = f(&mut sim);
        self.parts = Some(sim.into_parts());
        out.or_py()
    }

    fn state(&self) -> &NetworkState {
        &self.parts.as_ref().expect("simulation state present").0
    }
}

#[pymethods]
impl PySimulation {
    #[new]
    #[pyo3(signature = (config, replication = 0, activation = "ramp", h = 0.1))]
    fn new(config: &PySgdConfig, replication: u64, activation: &str, h: f64) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let model = DataModel::two_scale_mixture(cfg.d);
        let act = self::activation(activation, h)?;
        let sim = mfsgd::Simulation::new(&cfg, &model, &act, replication).or_py()?;
        let parts = Some(sim.into_parts());
        Ok(Self { cfg, model, act, parts })
    }

    /// Advances `k` steps.
    #[pyo3(signature = (k = 1))]
    fn step(&mut self, k: u64) -> PyResult<()> {
        self.with_sim(|sim| (0..k).try_for_each(|_| sim.step()))
    }

    /// Runs to `t_end`, recording each probe at `t = 0` and on multiples of
    /// `stride` (every step when 0). Returns `{probe: (grid, values)}`.
    #[pyo3(signature = (t_end, probes = vec!["square".to_string()], stride = 0.0))]
    fn run(&mut self, t_end: f64, probes: Vec<String>, stride: f64) -> PyResult<BTreeMap<String, Series>> {
        let d = self.cfg.d;
        let fs = probes.iter().map(|p| probe(p, d)).collect::<PyResult<Vec<_>>>()?;
        let traces = self.with_sim(|sim| sim.run_thinned(t_end, &fs, stride))?;
        Ok(probes.into_iter().zip(traces.iter().map(series)).collect())
    }

    /// `<f, nu>` for the current weights.
    fn bracket(&self, probe: &str) -> PyResult<f64> {
        Ok(self.state().bracket(&self::probe(probe, self.cfg.d)?))
    }

    /// Row-major weights, `N * d` values.
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.state().weights().to_vec()
    }

    #[getter]
    fn time(&self) -> f64 {
        self.state().step() as f64 / self.cfg.n as f64
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.state().step()
    }
}

/// Particle approximation of the mean-field limit.
#[pyclass(name = "MeanFieldTrajectory", module = "mfsgd", frozen)]
struct PyTrajectory {
    inner: mfsgd::MeanFieldTrajectory,
}

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times.clone()
    }

    #[getter]
    fn particles(&self) -> usize {
        self.inner.particles()
    }

    /// Particle positions at time `t` (interpolated between stored times).
    fn snapshot_at(&self, t: f64) -> PyResult<Vec<f64>> {
        Ok(self.inner.snapshot_at(t).or_py()?.samples().to_vec())
    }

    /// `<f, mu_bar_t>` on `grid`.
    fn reference_trace(&self, probe: &str, grid: Vec<f64>) -> PyResult<Vec<f64>> {
        let f = self::probe(probe, self.inner.d)?;
        Ok(self.inner.reference_trace(&f, &grid).or_py()?.values)
    }
}

/// Integrates the particle ODE from `init` (row-major `P x d`) with `q`
/// quadrature samples drawn from the mixture at `seed`.
#[pyfunction]
#[pyo3(signature = (init, d, t_end, *, q = 2000, seed = 0, dt = 0.01, integrator = "rk4", stride = 1, alpha = 0.1, activation = "ramp", h = 0.1))]
#[allow(clippy::too_many_arguments)]
fn integrate_meanfield(
    init: Vec<f64>,
    d: usize,
    t_end: f64,
    q: usize,
    seed: u64,
    dt: f64,
    integrator: &str,
    stride: usize,
    alpha: f64,
    activation: &str,
    h: f64,
) -> PyResult<PyTrajectory> {
    let act = self::activation(activation, h)?;
    let integrator: Integrator = integrator.parse().or_py()?;
    let model = DataModel::two_scale_mixture(d);
    let quad = mfsgd::QuadratureSample::draw(&model, q, seed).or_py()?;
    let opts = IntegrateOptions { t_end, dt, integrator, stride };
    let inner = mfsgd::integrate(&init, d, &quad, &act, alpha, opts).or_py()?;
    Ok(PyTrajectory { inner })
}

/// Covariance of `<f_i, G_t>` and `<f_j, G_s>` for batch size `batch`.
#[pyfunction]
#[pyo3(signature = (f_i, f_j, trajectory, s, t, *, batch = 1, q = 2000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn gprocess_covariance(
    f_i: &str,
    f_j: &str,
    trajectory: &PyTrajectory,
    s: f64,
    t: f64,
    batch: usize,
    q: usize,
    seed: u64,
) -> PyResult<f64> {
    let traj = &trajectory.inner;
    let model = DataModel::two_scale_mixture(traj.d);
    let quad = mfsgd::QuadratureSample::draw(&model, q, seed).or_py()?;
    let (fi, fj) = (probe(f_i, traj.d)?, probe(f_j, traj.d)?);
    let est = mfsgd::gprocess_covariance(&fi, &fj, traj, &quad, &BatchSchedule::Fixed(batch), s, t).or_py()?;
    Ok(est.value)
}

/// `sqrt(N) (run - reference)` on the run's grid.
#[pyfunction]
fn fluctuation_trace(run: Series, reference: Series, n: usize) -> PyResult<Series> {
    let run = trace_from(run.0, run.1, n, 1.0)?;
    let reference = trace_from(reference.0, reference.1, n, 1.0)?;
    let fl = mfsgd::fluctuation_trace(&run, &reference, n).or_py()?;
    Ok((fl.grid, fl.values))
}

/// Linear fit of the mean difference between paired fluctuation traces.
/// Returns `{slope, stderr, intercept, r_squared, replications}`.
#[pyfunction]
fn drift_fit(low: Vec<Series>, high: Vec<Series>) -> PyResult<BTreeMap<&'static str, f64>> {
    let wrap = |v: Vec<Series>| -> PyResult<Vec<mfsgd::FluctuationTrace>> {
        v.into_iter()
            .map(|(grid, values)| {
                if grid.len() != values.len() {
                    return Err(PyValueError::new_err("grid and values differ in length"));
                }
                Ok(mfsgd::FluctuationTrace { grid, values, probe: "f".into(), n: 0, beta: 0.0, replication: 0, seed: 0 })
            })
            .collect()
    };
    let fit = mfsgd::drift_fit(&wrap(low)?, &wrap(high)?).or_py()?;
    Ok(BTreeMap::from([
        ("slope", fit.slope),
        ("stderr", fit.stderr),
        ("intercept", fit.intercept),
        ("r_squared", fit.r_squared),
        ("replications", fit.replications as f64),
    ]))
}

/// W1 distance between two scalar samples.
#[pyfunction]
fn wasserstein1_1d(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = mfsgd::EmpiricalSnapshot::new(1, a, 0.0).or_py()?;
    let b = mfsgd::EmpiricalSnapshot::new(1, b, 0.0).or_py()?;
    mfsgd::wasserstein1_1d(&a, &b).or_py()
}

/// Experiment configuration in the `key = value` text format.
#[pyclass(name = "ExperimentConfig", module = "mfsgd", skip_from_py_object)]
#[derive(Clone)]
struct PyExperimentConfig {
    inner: harness::ExperimentConfig,
}

fn parse_names(experiment: &str, scale: &str) -> PyResult<(Experiment, Scale)> {
    Ok((experiment.parse().or_py()?, scale.parse().or_py()?))
}

#[pymethods]
impl PyExperimentConfig {
    /// Preset for `experiment` (e.g. "single-run", "clt-trajectory") at
    /// `scale` ("desk" or "paper").
    #[staticmethod]
    #[pyo3(signature = (experiment, scale = "desk"))]
    fn preset(experiment: &str, scale: &str) -> PyResult<Self> {
        let (e, s) = parse_names(experiment, scale)?;
        Ok(Self { inner: harness::ExperimentConfig::preset(e, s) })
    }

    /// Parses `text`; absent keys come from the preset.
    #[staticmethod]
    #[pyo3(signature = (text, experiment = "single-run", scale = "desk"))]
    fn parse(text: &str, experiment: &str, scale: &str) -> PyResult<Self> {
        let (e, s) = parse_names(experiment, scale)?;
        Ok(Self { inner: harness::ExperimentConfig::parse(text, e, s).or_py()? })
    }

    fn serialize(&self) -> String {
        self.inner.serialize()
    }

    /// Sets one key, e.g. `cfg.set("sgd.n", "500")`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.apply(BTreeMap::from([(key.to_string(), value.to_string())])).or_py()?;
        next.validate().or_py()?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn experiment(&self) -> &'static str {
        self.inner.experiment.as_str()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig({:?})", self.inner.experiment.as_str())
    }
}

/// Runs the experiment and writes its CSV files to `out_dir` (or the
/// configured directory). Returns the paths written.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn run_experiment(py: Python<'_>, config: &PyExperimentConfig, out_dir: Option<PathBuf>) -> PyResult<Vec<String>> {
    let mut cfg = config.inner.clone();
    if let Some(dir) = out_dir {
        cfg.out_dir = dir;
    }
    let files = py.detach(|| harness::run_experiment(&cfg)).or_py()?;
    Ok(files.iter().map(|p| p.display().to_string()).collect())
}

#[pymodule]
#[pyo3(name = "mfsgd")]
fn mfsgd_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySgdConfig>()?;
    m.add_class::<PySimulation>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_function(wrap_pyfunction!(integrate_meanfield, m)?)?;
    m.add_function(wrap_pyfunction!(gprocess_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(fluctuation_trace, m)?)?;
    m.add_function(wrap_pyfunction!(drift_fit, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1_1d, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
