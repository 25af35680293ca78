//! Python bindings: datasets, configs, masks, schedules, training and tasks.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use genmove::data::{self, EprParams};
use genmove::diffusion::{self, ScheduleKind};
use genmove::harness::{self, Artifacts, Baseline, ExperimentConfig, Task, TaskSpec};
use genmove::mask::{self, MaskMixture, Strategy};
use genmove::metrics;

fn to_py(e: genmove::Error) -> PyErr {
    match e {
        genmove::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Users' trajectories over a location vocabulary.
#[pyclass(name = "Dataset", module = "genmove_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        data::load_dataset(path).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (users=500, grid=16, days=7, seed=0))]
    fn synthesize(users: usize, grid: usize, days: usize, seed: u64) -> PyResult<Self> {
        let params = EprParams {
            n_users: users,
            grid_side: grid,
            days,
            seed,
            ..EprParams::default()
        };
        data::synthesize_epr(&params).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_dataset(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn n_locations(&self) -> usize {
        self.inner.n_locations()
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.trajectories.len()
    }

    #[getter]
    fn slots_per_day(&self) -> usize {
        self.inner.slots_per_day
    }

    #[getter]
    fn trajectory_len(&self) -> Option<usize> {
        self.inner.trajectory_len()
    }

    /// Current trajectory of the `i`-th user as location ids.
    fn trajectory(&self, i: usize) -> PyResult<Vec<usize>> {
        self.inner
            .trajectories
            .get(i)
            .map(|t| t.locations.clone())
            .ok_or_else(|| PyValueError::new_err(format!("no trajectory {i}")))
    }

    fn coordinates(&self) -> Vec<(f64, f64)> {
        self.inner.vocabulary.iter().map(|l| (l.x, l.y)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.trajectories.len()
    }
}

/// Experiment configuration; keys mirror the TOML file.
#[pyclass(name = "Config", module = "genmove_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        ExperimentConfig::load(path.as_deref(), &overrides)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml_str(text).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    /// Copy with `key=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        self.inner.with_overrides(&overrides).map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }
}

/// Linear β schedule with cumulative products.
#[pyclass(name = "NoiseSchedule", module = "genmove_py")]
struct PyNoiseSchedule {
    inner: diffusion::NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    #[pyo3(signature = (steps=50, beta_start=1e-4, beta_end=0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        diffusion::make_schedule(steps, beta_start, beta_end, ScheduleKind::Linear)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    #[getter]
    fn sigmas(&self) -> Vec<f64> {
        self.inner.sigmas().to_vec()
    }
}

/// Draw a mask (True = observed) with the default mixture knobs.
#[pyfunction]
#[pyo3(signature = (strategy, length, slots_per_day=48, start_slot=0, seed=0))]
fn sample_mask(strategy: &str, length: usize, slots_per_day: usize, start_slot: usize, seed: u64) -> PyResult<Vec<bool>> {
    let strategy: Strategy = strategy.parse().map_err(to_py)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask::sample_mask(strategy, length, slots_per_day, start_slot, &MaskMixture::default(), &mut rng)
        .map(|m| m.bits().to_vec())
        .map_err(to_py)
}

/// Jensen-Shannon divergence in bits between two histograms on shared bins.
#[pyfunction]
fn jsd(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() {
        return Err(PyValueError::new_err("histograms differ in length"));
    }
    let norm = |v: &[f64]| {
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter().map(|x| x / s).collect()
        } else {
            v.to_vec()
        }
    };
    Ok(metrics::jsd_masses(&norm(&p), &norm(&q)))
}

/// Train embeddings, denoiser and flow; returns per-epoch losses.
#[pyfunction]
#[pyo3(signature = (config, dataset, out_dir=None))]
fn train(py: Python<'_>, config: &PyConfig, dataset: &PyDataset, out_dir: Option<PathBuf>) -> PyResult<BTreeMap<String, Vec<f64>>> {
    let (cfg, ds) = (config.inner.clone(), dataset.inner.clone());
    let outcome = py
        .detach(move || harness::train(&cfg, &ds, out_dir.as_deref()))
        .map_err(to_py)?;
    Ok(BTreeMap::from([
        ("train_loss".to_string(), outcome.train_loss),
        ("valid_loss".to_string(), outcome.valid_loss),
        ("flow_nll".to_string(), outcome.flow_nll),
    ]))
}

/// Run a task with checkpoints from `ckpt_dir`; returns the report metrics.
#[pyfunction]
fn run_task(py: Python<'_>, task: &str, config: &PyConfig, ckpt_dir: PathBuf, dataset: &PyDataset) -> PyResult<BTreeMap<String, f64>> {
    let task: Task = task.parse().map_err(to_py)?;
    let (cfg, ds) = (config.inner.clone(), dataset.inner.clone());
    let outcome = py
        .detach(move || {
            let art = Artifacts::load(&ckpt_dir)?;
            harness::run_task(&TaskSpec::from_config(task, &cfg), &cfg, &art, &ds)
        })
        .map_err(to_py)?;
    Ok(outcome.report.metrics)
}

/// Score a comparator on a task; returns the report metrics.
#[pyfunction]
fn run_baseline(py: Python<'_>, name: &str, task: &str, config: &PyConfig, dataset: &PyDataset) -> PyResult<BTreeMap<String, f64>> {
    let name: Baseline = name.parse().map_err(to_py)?;
    let task: Task = task.parse().map_err(to_py)?;
    let (cfg, ds) = (config.inner.clone(), dataset.inner.clone());
    let outcome = py
        .detach(move || harness::run_baseline(name, &TaskSpec::from_config(task, &cfg), &cfg, &ds))
        .map_err(to_py)?;
    Ok(outcome.report.metrics)
}

#[pymodule]
fn genmove_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_task, m)?)?;
    m.add_function(wrap_pyfunction!(run_baseline, m)?)?;
    Ok(())
}
