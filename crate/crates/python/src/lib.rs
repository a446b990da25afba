//! Python bindings for planrank.

use std::path::PathBuf;

use planrank::dataset::{self, CandidateSet, WorkloadConfig};
use planrank::decision::{self, DecisionSource};
use planrank::embedder::EmbedderKind;
use planrank::evalkit::{compare_policies, EvalReport};
use planrank::ood::{self, DetectorConfig, OodDetector};
use planrank::ranker::{self, decode_permutation, ScoreMatrix};
use planrank::training::{self, ModelCheckpoint, TrainConfig};
use planrank::ErrorKind;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: planrank::Error) -> PyErr {
    if matches!(e, planrank::Error::Io { .. }) {
        return PyIOError::new_err(e.to_string());
    }
    match e.kind() {
        ErrorKind::Model => PyRuntimeError::new_err(e.to_string()),
        ErrorKind::Data | ErrorKind::Config => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPyResult<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for planrank::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// One query's candidate plans with their measured latencies.
#[pyclass(name = "CandidateSet", module = "planrank", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCandidateSet {
    inner: CandidateSet,
}

#[pymethods]
impl PyCandidateSet {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyCandidateSet {
            inner: dataset::candidate_set_from_json(text).py()?,
        })
    }

    fn to_json(&self) -> String {
        dataset::candidate_set_to_json(&self.inner)
    }

    #[getter]
    fn query_id(&self) -> &str {
        self.inner.query_id()
    }

    #[getter]
    fn plan_ids(&self) -> Vec<String> {
        self.inner.plans().iter().map(|p| p.plan_id().to_string()).collect()
    }

    #[getter]
    fn mean_latency_ms(&self) -> Vec<f64> {
        self.inner.mean_latency_ms().to_vec()
    }

    /// 1-based true ranks, ties broken by plan index.
    #[getter]
    fn true_ranks(&self) -> Vec<usize> {
        self.inner.true_ranks().to_vec()
    }

    #[getter]
    fn cbo_index(&self) -> usize {
        self.inner.cbo_index()
    }

    #[getter]
    fn best_index(&self) -> usize {
        self.inner.best_index()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("CandidateSet({}, {} plans)", self.inner.query_id(), self.inner.len())
    }
}

fn unwrap_sets(sets: &[PyRef<'_, PyCandidateSet>]) -> Vec<CandidateSet> {
    sets.iter().map(|s| s.inner.clone()).collect()
}

fn wrap_sets(sets: Vec<CandidateSet>) -> Vec<PyCandidateSet> {
    sets.into_iter().map(|inner| PyCandidateSet { inner }).collect()
}

#[pyfunction]
#[pyo3(signature = (num_queries=200, seed=42, min_plans=2, max_plans=16, perturbation_log_range=1.0, noise_cv=0.05, runs_per_plan=3))]
fn generate_workload(
    num_queries: usize,
    seed: u64,
    min_plans: usize,
    max_plans: usize,
    perturbation_log_range: f64,
    noise_cv: f64,
    runs_per_plan: usize,
) -> PyResult<Vec<PyCandidateSet>> {
    let cfg = WorkloadConfig {
        num_queries,
        plans_per_query: [min_plans, max_plans],
        perturbation_log_range,
        noise_cv,
        runs_per_plan,
        seed,
    };
    Ok(wrap_sets(dataset::generate_synthetic_workload(&cfg).py()?))
}

/// Seeded query-level split into `(train, test)`.
#[pyfunction]
#[pyo3(signature = (sets, ratio=0.8, seed=42))]
fn split(
    sets: Vec<PyRef<'_, PyCandidateSet>>,
    ratio: f64,
    seed: u64,
) -> PyResult<(Vec<PyCandidateSet>, Vec<PyCandidateSet>)> {
    let (train, test) = dataset::split_dataset(&unwrap_sets(&sets), ratio, seed).py()?;
    Ok((wrap_sets(train), wrap_sets(test)))
}

/// Listwise loss of a score matrix against 1-based ground-truth positions.
#[pyfunction]
fn listwise_loss(scores: Vec<Vec<f64>>, ranks: Vec<usize>) -> PyResult<f64> {
    training::listwise_loss(&ScoreMatrix::from_rows(&scores).py()?, &ranks).py()
}

/// Maximum-weight assignment of plans to positions; returns each plan's
/// 0-based position.
#[pyfunction]
fn decode(scores: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(decode_permutation(&ScoreMatrix::from_rows(&scores).py()?).py()?.permutation)
}

/// A trained ranker checkpoint.
#[pyclass(name = "Model", module = "planrank", frozen)]
struct PyModel {
    inner: ModelCheckpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (sets, epochs=200, learning_rate=5e-5, seed=42, embedder="tree_lstm", d_model=32, num_heads=4))]
    fn train(
        py: Python<'_>,
        sets: Vec<PyRef<'_, PyCandidateSet>>,
        epochs: usize,
        learning_rate: f64,
        seed: u64,
        embedder: &str,
        d_model: usize,
        num_heads: usize,
    ) -> PyResult<Self> {
        let mut cfg = TrainConfig {
            epochs,
            learning_rate,
            seed,
            embedder: EmbedderKind::parse(embedder).py()?,
            ..TrainConfig::default()
        };
        cfg.ranker.d_model = d_model;
        cfg.ranker.num_heads = num_heads;
        cfg.ranker.d_ff = 4 * d_model;
        let sets = unwrap_sets(&sets);
        let inner = py.detach(|| training::train(&sets, &cfg)).py()?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: training::load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        training::save_checkpoint(&self.inner, &path).py()
    }

    /// Plan indices, best first.
    fn rank(&self, cs: &PyCandidateSet) -> PyResult<Vec<usize>> {
        Ok(ranker::rank_plans(&cs.inner, &self.inner).py()?.by_position)
    }

    /// Per-plan, per-position score matrix.
    fn scores(&self, cs: &PyCandidateSet) -> PyResult<Vec<Vec<f64>>> {
        Ok(ranker::score_plans(&self.inner, cs.inner.plans()).py()?.to_rows())
    }

    /// Checkpoint header as a JSON string.
    fn header(&self) -> String {
        self.inner.header_json().to_string()
    }

    #[getter]
    fn epoch_losses(&self) -> Vec<f64> {
        self.inner.metadata.epoch_losses.clone()
    }
}

/// Calibrated out-of-distribution detector.
#[pyclass(name = "Detector", module = "planrank", frozen)]
struct PyDetector {
    inner: OodDetector,
}

#[pymethods]
impl PyDetector {
    /// Fits on the plan features of `sets` under `model`.
    #[staticmethod]
    #[pyo3(signature = (model, sets, seed=42, epochs=300))]
    fn fit(
        py: Python<'_>,
        model: &PyModel,
        sets: Vec<PyRef<'_, PyCandidateSet>>,
        seed: u64,
        epochs: usize,
    ) -> PyResult<Self> {
        let sets = unwrap_sets(&sets);
        let cfg = DetectorConfig {
            seed,
            epochs,
            ..DetectorConfig::default()
        };
        let inner = py
            .detach(|| {
                let mut features = Vec::new();
                for cs in &sets {
                    features.extend(ood::plan_features(&model.inner, cs.plans())?);
                }
                ood::fit_detector(&features, &cfg)
            })
            .py()?;
        Ok(PyDetector { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDetector {
            inner: ood::load_detector(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ood::save_detector(&self.inner, &path).py()
    }

    /// `(tau_in, tau_out, degraded)`.
    #[getter]
    fn thresholds(&self) -> (f64, f64, bool) {
        let t = self.inner.thresholds;
        (t.tau_in, t.tau_out, t.degraded)
    }

    /// Confidence `g` of every plan in `cs`.
    fn confidence(&self, model: &PyModel, cs: &PyCandidateSet) -> PyResult<Vec<f64>> {
        ood::plan_features(&model.inner, cs.inner.plans())
            .py()?
            .iter()
            .map(|x| self.inner.confidence(x).py())
            .collect()
    }
}

/// Outcome of the gated top-k selection for one query.
#[pyclass(name = "Decision", module = "planrank", frozen, get_all)]
struct PyDecision {
    chosen_plan_id: String,
    chosen_index: usize,
    /// "model" or "cbo".
    source: String,
    /// 1-based model rank of the chosen plan, if the model's plan was kept.
    model_rank: Option<usize>,
    /// `(plan_id, confidence, passed)` per checked rank.
    trace: Vec<(String, f64, bool)>,
    tie_group: Vec<String>,
}

#[pymethods]
impl PyDecision {
    fn __repr__(&self) -> String {
        format!("Decision({}, source={})", self.chosen_plan_id, self.source)
    }
}

#[pyfunction]
#[pyo3(signature = (cs, model, detector, k=3, force=false, tie_epsilon=1e-6))]
fn decide(
    cs: &PyCandidateSet,
    model: &PyModel,
    detector: &PyDetector,
    k: usize,
    force: bool,
    tie_epsilon: f64,
) -> PyResult<PyDecision> {
    let (out, _, _) = decision::decide(&cs.inner, &model.inner, &detector.inner, k, tie_epsilon, force).py()?;
    let (source, model_rank) = match out.source {
        DecisionSource::ModelRank(i) => ("model", Some(i)),
        DecisionSource::CboFallback => ("cbo", None),
    };
    Ok(PyDecision {
        chosen_plan_id: out.chosen_plan_id,
        chosen_index: out.chosen_index,
        source: source.to_string(),
        model_rank,
        trace: out.trace.into_iter().map(|t| (t.plan_id, t.confidence, t.passed)).collect(),
        tie_group: out.tie_group,
    })
}

/// Policy comparison on `test`; returns `(table, report_json)`.
#[pyfunction]
#[pyo3(signature = (test, model, detector, k=3, force=false))]
fn evaluate(
    py: Python<'_>,
    test: Vec<PyRef<'_, PyCandidateSet>>,
    model: &PyModel,
    detector: &PyDetector,
    k: usize,
    force: bool,
) -> PyResult<(String, String)> {
    let test = unwrap_sets(&test);
    let report: EvalReport = py
        .detach(|| compare_policies(&test, &model.inner, &detector.inner, k, force))
        .py()?;
    Ok((report.to_table(), report.to_json()))
}

#[pymodule]
fn planrank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCandidateSet>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyDecision>()?;
    m.add_function(wrap_pyfunction!(generate_workload, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(listwise_loss, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(decide, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
