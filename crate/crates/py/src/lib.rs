//! Python bindings: datasets, models, proof-of-learning logs, forging and
//! the attack suite.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use repudiate_core::attacks::{self, Attack, SuiteConfig};
use repudiate_core::data::{self, synth_subspace};
use repudiate_core::forge::{self, ForgeConfig};
use repudiate_core::metrics;
use repudiate_core::model::{self, Hyperparams, LrSchedule};
use repudiate_core::pol::{self, RecordConfig};
use repudiate_core::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::DimensionMismatch { .. } | Error::FlipOnNonImage => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(module = "repudiate", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Row-major features with `dim` columns and one label per row.
    #[new]
    fn new(features: Vec<f64>, labels: Vec<u16>, dim: usize, classes: usize) -> PyResult<Self> {
        Ok(Self { inner: data::Dataset::new(features, labels, dim, classes, None).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (n, dim, classes, seed, separation=2.0))]
    fn synthetic(n: usize, dim: usize, classes: usize, seed: u64, separation: f64) -> PyResult<Self> {
        Ok(Self { inner: data::synth_gaussian(n, dim, classes, seed, separation).map_err(err)? })
    }

    #[staticmethod]
    fn load_idx(images: &str, labels: &str) -> PyResult<Self> {
        Ok(Self { inner: data::load_idx(images, labels).map_err(err)? })
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.subset(&indices).map_err(err)? })
    }

    fn features(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner.check_index(i).map_err(err)?;
        Ok(self.inner.features(i).to_vec())
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        self.inner.check_index(i).map_err(err)?;
        Ok(self.inner.label(i) as usize)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, dim={}, classes={})", self.inner.len(), self.inner.dim(), self.inner.classes())
    }
}

#[pyclass(module = "repudiate", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct ModelSpec {
    inner: model::ModelSpec,
}

#[pymethods]
impl ModelSpec {
    #[staticmethod]
    fn logreg(dim: usize, classes: usize) -> PyResult<Self> {
        Ok(Self { inner: model::ModelSpec::logreg(dim, classes).map_err(err)? })
    }

    #[staticmethod]
    fn mlp(widths: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: model::ModelSpec::mlp(widths).map_err(err)? })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Class probabilities for every sample of `dataset`.
    fn predict(&self, params: Vec<f64>, dataset: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        let p = model::ParamVector::new(params).map_err(err)?;
        (0..dataset.inner.len())
            .map(|i| model::predict(&p, &self.inner, dataset.inner.features(i)).map_err(err))
            .collect()
    }

    fn accuracy(&self, params: Vec<f64>, dataset: &Dataset) -> PyResult<f64> {
        let p = model::ParamVector::new(params).map_err(err)?;
        model::accuracy(&p, &self.inner, &dataset.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("ModelSpec({:?}, params={})", self.inner.arch(), self.inner.param_count())
    }
}

#[pyclass(module = "repudiate", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct VerificationReport {
    passed: bool,
    max_error: f64,
    threshold: f64,
    steps_checked: u64,
    /// `(start, end, error)` per checked segment.
    segments: Vec<(u64, u64, f64)>,
}

#[pymethods]
impl VerificationReport {
    fn __repr__(&self) -> String {
        format!("VerificationReport(passed={}, max_error={:e}, steps_checked={})", self.passed, self.max_error, self.steps_checked)
    }
}

impl From<pol::VerificationReport> for VerificationReport {
    fn from(r: pol::VerificationReport) -> Self {
        Self {
            passed: r.pass,
            max_error: r.max_error,
            threshold: r.threshold,
            steps_checked: r.steps_checked,
            segments: r.segments.iter().map(|s| (s.start, s.end, s.error)).collect(),
        }
    }
}

#[pyclass(module = "repudiate", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PoLLog {
    inner: pol::PoLLog,
}

#[pymethods]
impl PoLLog {
    /// Trains from scratch and records every step.
    #[staticmethod]
    #[pyo3(signature = (dataset, spec, step_size, batch_size, epochs, init_seed=0, schedule_seed=1, momentum=0.0, weight_decay=0.0, lr_min=None, checkpoint_interval=1))]
    #[allow(clippy::too_many_arguments)]
    fn record(
        dataset: &Dataset,
        spec: &ModelSpec,
        step_size: f64,
        batch_size: usize,
        epochs: usize,
        init_seed: u64,
        schedule_seed: u64,
        momentum: f64,
        weight_decay: f64,
        lr_min: Option<f64>,
        checkpoint_interval: u64,
    ) -> PyResult<Self> {
        let mut hyper = Hyperparams::plain(step_size, batch_size, epochs, dataset.inner.len());
        hyper.momentum = momentum;
        hyper.weight_decay = weight_decay;
        if let Some(lr_min) = lr_min {
            hyper.schedule = LrSchedule::CosineAnneal { lr_min };
        }
        let cfg = RecordConfig { model: spec.inner.clone(), hyper, init_seed, schedule_seed, augment: false, checkpoint_interval };
        let (inner, _) = pol::record_training(&dataset.inner, &cfg).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self { inner: pol::read_log(dir).map_err(err)? })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        pol::write_log(&self.inner, dir).map_err(err)
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.inner.manifest.total_steps
    }

    #[getter]
    fn spec(&self) -> ModelSpec {
        ModelSpec { inner: self.inner.manifest.model.clone() }
    }

    fn final_params(&self) -> PyResult<Vec<f64>> {
        Ok(self.inner.final_params().map_err(err)?.as_slice().to_vec())
    }

    /// Sample indices of the batch used at step `t` (1-based).
    fn batch(&self, t: u64) -> PyResult<Vec<usize>> {
        Ok(self.inner.step(t).map_err(err)?.batch.indices.clone())
    }

    #[pyo3(signature = (dataset, epsilon=1e-3, subset_k=None))]
    fn verify(&self, dataset: &Dataset, epsilon: f64, subset_k: Option<usize>) -> PyResult<VerificationReport> {
        let report = match subset_k {
            Some(k) => pol::verify_subset(&self.inner, &dataset.inner, epsilon, k),
            None => pol::verify_full(&self.inner, &dataset.inner, epsilon),
        };
        Ok(report.map_err(err)?.into())
    }

    fn uniformity(&self) -> PyResult<f64> {
        metrics::uniformity(self.inner.batches(), self.inner.manifest.n).map_err(err)
    }
}

#[pyclass(module = "repudiate", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct PoR {
    group: Vec<usize>,
    log: PoLLog,
    params: Vec<f64>,
    max_distance: f64,
    replaced_steps: usize,
    gradient_evaluations: u64,
    exclusion_violations: usize,
}

#[pymethods]
impl PoR {
    fn __repr__(&self) -> String {
        format!("PoR(group={:?}, replaced_steps={}, max_distance={:e})", self.group, self.replaced_steps, self.max_distance)
    }
}

#[pyclass(module = "repudiate", frozen)]
pub struct ForgedBatchStore {
    inner: forge::ForgedBatchStore,
}

#[pymethods]
impl ForgedBatchStore {
    /// Shared-split forging over every group of `group_size` samples.
    #[staticmethod]
    #[pyo3(signature = (log, dataset, candidates, splits, group_size, seed=0, full=false))]
    fn forge(log: &PoLLog, dataset: &Dataset, candidates: usize, splits: usize, group_size: usize, seed: u64, full: bool) -> PyResult<Self> {
        let cfg = ForgeConfig { candidates, splits, group_size, seed, augment: false, count_costs: true };
        let plan = cfg.split_plan(dataset.inner.len(), log.inner.manifest.total_steps).map_err(err)?;
        let inner = if full {
            forge::forge_all_full(&log.inner, &dataset.inner, &plan, &cfg)
        } else {
            forge::forge_all(&log.inner, &dataset.inner, &plan, &cfg)
        };
        Ok(Self { inner: inner.map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: forge::read_store(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        forge::write_store(&self.inner, path).map_err(err)
    }

    #[getter]
    fn group_count(&self) -> usize {
        self.inner.group_count()
    }

    /// Phase-1 and phase-2 gradient evaluations so far.
    #[getter]
    fn costs(&self) -> (u64, u64) {
        (self.inner.costs.phase1, self.inner.costs.phase2)
    }

    fn replaced_steps(&self, group: usize) -> Vec<u64> {
        self.inner.replaced(group).keys().copied().collect()
    }

    #[pyo3(signature = (log, dataset, group, checkpoint_interval=1))]
    fn reconstruct(&self, log: &PoLLog, dataset: &Dataset, group: usize, checkpoint_interval: u64) -> PyResult<PoR> {
        let por = forge::reconstruct_por(&log.inner, &dataset.inner, &self.inner, group, checkpoint_interval).map_err(err)?;
        Ok(PoR {
            exclusion_violations: por.exclusion_violations(),
            group: por.group,
            params: por.params.as_slice().to_vec(),
            max_distance: por.max_distance,
            replaced_steps: por.replaced_steps,
            gradient_evaluations: por.gradient_evaluations,
            log: PoLLog { inner: por.log },
        })
    }
}

#[pyclass(module = "repudiate", frozen)]
pub struct AttackSuite {
    inner: attacks::AttackSuite,
}

#[pymethods]
impl AttackSuite {
    /// Trains `shadows` models on random halves of `pool` and calibrates all attacks.
    #[staticmethod]
    #[pyo3(signature = (pool, population, target, spec, step_size, batch_size, epochs, shadows=16, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn calibrate(
        pool: &Dataset,
        population: &Dataset,
        target: Vec<f64>,
        spec: &ModelSpec,
        step_size: f64,
        batch_size: usize,
        epochs: usize,
        shadows: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let hyper = Hyperparams::plain(step_size, batch_size, epochs, pool.inner.len() / 2);
        let target = model::ParamVector::new(target).map_err(err)?;
        let set = attacks::train_shadows(&pool.inner, shadows, &spec.inner, &hyper, seed).map_err(err)?;
        let inner = attacks::AttackSuite::calibrate(&pool.inner, &set, &population.inner, &target, &SuiteConfig::default()).map_err(err)?;
        Ok(Self { inner })
    }

    /// `(score, is_member)` of pool sample `sample` under `params`.
    fn score(&self, attack: &str, params: Vec<f64>, sample: usize) -> PyResult<(f64, bool)> {
        let attack: Attack = attack.parse().map_err(err)?;
        let p = model::ParamVector::new(params).map_err(err)?;
        let s = self.inner.score(attack, &p, sample).map_err(err)?;
        Ok((s.score, s.prediction))
    }
}

/// `||a - b||^2 / dim`.
#[pyfunction]
fn model_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = model::ParamVector::new(a).map_err(err)?;
    let b = model::ParamVector::new(b).map_err(err)?;
    metrics::model_distance(&a, &b).map_err(err)
}

/// `(min gradient distance, bound)` for logistic weights `w` (bias last) on a
/// random dataset with one sample outside a hyperplane.
#[pyfunction]
fn off_subspace_bound(n: usize, dim: usize, seed: u64, w: Vec<f64>) -> PyResult<(f64, f64)> {
    let data = synth_subspace(n, dim, seed).map_err(err)?;
    let r = forge::thm1_bound(&data, &model::ParamVector::new(w).map_err(err)?).map_err(err)?;
    Ok((r.min_distance, r.bound))
}

#[pymodule]
fn repudiate(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<ModelSpec>()?;
    m.add_class::<PoLLog>()?;
    m.add_class::<VerificationReport>()?;
    m.add_class::<ForgedBatchStore>()?;
    m.add_class::<PoR>()?;
    m.add_class::<AttackSuite>()?;
    m.add_function(wrap_pyfunction!(model_distance, m)?)?;
    m.add_function(wrap_pyfunction!(off_subspace_bound, m)?)?;
    m.add("ATTACKS", Attack::ALL.iter().map(|a| a.name()).collect::<Vec<_>>())?;
    Ok(())
}
