//! Python bindings: world simulation, corpus generation, training, inference and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;
use taskseq::corpus::{self, GeneratorConfig, SequenceExample};
use taskseq::eval::{self, FeedbackPolicy, FeedbackScope};
use taskseq::features::History;
use taskseq::learn::{self, TrainConfig};
use taskseq::model::{self, RolloutOptions, RolloutStatus, TrainedModel};
use taskseq::world::{self, ObjectId, Primitive, Task};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_python(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_name<T: serde::de::DeserializeOwned>(kind: &str, name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_ascii_uppercase()))
        .map_err(|_| PyValueError::new_err(format!("unknown {kind} {name:?}")))
}

fn upper_name(value: &impl Serialize) -> String {
    serde_json::to_value(value).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// A primitive with up to two object arguments.
#[pyclass(name = "Action", module = "taskseq", frozen, eq, hash, from_py_object)]
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PyAction(world::Action);

#[pymethods]
impl PyAction {
    #[new]
    #[pyo3(signature = (primitive, a1=None, a2=None))]
    fn new(primitive: &str, a1: Option<u32>, a2: Option<u32>) -> PyResult<Self> {
        let primitive: Primitive = from_name("primitive", primitive)?;
        let action = world::Action { primitive, a1: a1.map(ObjectId), a2: a2.map(ObjectId) };
        if !action.is_well_formed() {
            return Err(PyValueError::new_err(format!("{primitive} takes {} argument(s)", primitive.arity())));
        }
        Ok(Self(action))
    }

    #[staticmethod]
    fn done() -> Self {
        Self(world::Action::DONE)
    }

    #[getter]
    fn primitive(&self) -> String {
        upper_name(&self.0.primitive)
    }

    #[getter]
    fn a1(&self) -> Option<u32> {
        self.0.a1.map(|o| o.0)
    }

    #[getter]
    fn a2(&self) -> Option<u32> {
        self.0.a2.map(|o| o.0)
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        let arg = |a: Option<ObjectId>| a.map_or("None".to_string(), |o| o.0.to_string());
        format!("Action({:?}, {}, {})", self.primitive(), arg(self.0.a1), arg(self.0.a2))
    }
}

/// Task type with its goal arguments.
#[pyclass(name = "TaskSpec", module = "taskseq", frozen, eq, hash, from_py_object)]
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PyTaskSpec(world::TaskSpec);

#[pymethods]
impl PyTaskSpec {
    #[new]
    #[pyo3(signature = (task, g_a1, g_a2=None))]
    fn new(task: &str, g_a1: u32, g_a2: Option<u32>) -> PyResult<Self> {
        let task: Task = from_name("task", task)?;
        world::TaskSpec::new(task, ObjectId(g_a1), g_a2.map(ObjectId)).map(Self).map_err(value_err)
    }

    #[getter]
    fn task(&self) -> String {
        upper_name(&self.0.task)
    }

    #[getter]
    fn g_a1(&self) -> u32 {
        self.0.g_a1.0
    }

    #[getter]
    fn g_a2(&self) -> Option<u32> {
        self.0.g_a2.map(|o| o.0)
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("TaskSpec({:?}, {}, {:?})", self.task(), self.g_a1(), self.g_a2())
    }
}

/// Immutable snapshot of objects and robot; `apply` returns a new state.
#[pyclass(name = "WorldState", module = "taskseq", frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyWorldState(world::WorldState);

#[pymethods]
impl PyWorldState {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(value_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(value_err)
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_python(py, &self.0)
    }

    fn object_ids(&self) -> Vec<u32> {
        self.0.ids().map(|o| o.0).collect()
    }

    #[getter]
    fn held(&self) -> Option<u32> {
        self.0.robot.gripper.map(|o| o.0)
    }

    #[getter]
    fn step_index(&self) -> u32 {
        self.0.step_index
    }

    /// Reason the action cannot execute, or None.
    fn check(&self, action: &PyAction) -> Option<String> {
        world::check_preconditions(&self.0, &action.0).err().map(|r| r.to_string())
    }

    fn apply(&self, action: &PyAction) -> PyResult<Self> {
        world::apply_primitive(&self.0, &action.0).map(Self).map_err(value_err)
    }

    fn executable_actions(&self) -> Vec<PyAction> {
        world::executable_actions(&self.0).into_iter().map(PyAction).collect()
    }

    fn goal_satisfied(&self, task: &PyTaskSpec) -> PyResult<bool> {
        world::task_goal_satisfied(&self.0, &task.0).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("WorldState({} objects, step {})", self.0.objects.len(), self.0.step_index)
    }
}

/// One demonstration: start state, task and the recorded action sequence.
#[pyclass(name = "Example", module = "taskseq", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyExample(SequenceExample);

#[pymethods]
impl PyExample {
    #[getter]
    fn scenario_id(&self) -> &str {
        &self.0.scenario_id
    }

    #[getter]
    fn environment_id(&self) -> &str {
        &self.0.environment_id
    }

    #[getter]
    fn task(&self) -> PyTaskSpec {
        PyTaskSpec(self.0.task)
    }

    #[getter]
    fn initial_state(&self) -> PyWorldState {
        PyWorldState(self.0.initial_state.clone())
    }

    #[getter]
    fn steps(&self) -> Vec<PyAction> {
        self.0.steps.iter().copied().map(PyAction).collect()
    }

    fn replay(&self) -> PyResult<Vec<PyWorldState>> {
        Ok(self.0.replay().map_err(value_err)?.into_iter().map(PyWorldState).collect())
    }

    fn __len__(&self) -> usize {
        self.0.steps.len()
    }

    fn __repr__(&self) -> String {
        format!("Example({:?}, {}, {} steps)", self.0.scenario_id, self.0.task, self.0.steps.len())
    }
}

fn unwrap_corpus(corpus: Vec<PyExample>) -> Vec<SequenceExample> {
    corpus.into_iter().map(|e| e.0).collect()
}

fn history(actions: Option<Vec<PyAction>>) -> History {
    actions.unwrap_or_default().into_iter().fold(History::default(), |h, a| h.push(a.0))
}

fn scored(v: Vec<model::ScoredAction>) -> Vec<(PyAction, f64)> {
    v.into_iter().map(|s| (PyAction(s.action), s.score)).collect()
}

/// A trained weight vector over the joint feature space.
#[pyclass(name = "Model", module = "taskseq", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyModel(TrainedModel);

#[pymethods]
impl PyModel {
    /// Returns `(model, report)`; the report is a dict with the per-iteration log.
    #[staticmethod]
    #[pyo3(signature = (corpus, C=1000.0, epsilon=0.01, seed=0, max_iterations=500, multiclass=false))]
    #[allow(non_snake_case)]
    fn train(
        py: Python<'_>,
        corpus: Vec<PyExample>,
        C: f64,
        epsilon: f64,
        seed: u64,
        max_iterations: usize,
        multiclass: bool,
    ) -> PyResult<(Self, Py<PyAny>)> {
        let corpus = unwrap_corpus(corpus);
        let config = TrainConfig { c: C, epsilon, seed, max_iterations, ..Default::default() };
        let (model, report) = py
            .detach(|| if multiclass { learn::train_multiclass(&corpus, &config) } else { learn::train(&corpus, &config) })
            .map_err(value_err)?;
        Ok((Self(model), to_python(py, &report)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        TrainedModel::load(path).map(Self).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        TrainedModel::from_json(text).map(Self).map_err(value_err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn kind(&self) -> String {
        upper_name(&self.0.kind).to_ascii_lowercase()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights.values.clone()
    }

    #[pyo3(signature = (state, task, action, history=None))]
    fn score(&self, state: &PyWorldState, task: &PyTaskSpec, action: &PyAction, history: Option<Vec<PyAction>>) -> f64 {
        model::score(&self.0.weights, &state.0, &task.0, &action.0, &self::history(history))
    }

    /// Per-block contributions as `(block, score)` pairs; they sum to `score`.
    #[pyo3(signature = (state, task, action, history=None))]
    fn block_scores(
        &self,
        state: &PyWorldState,
        task: &PyTaskSpec,
        action: &PyAction,
        history: Option<Vec<PyAction>>,
    ) -> Vec<(&'static str, f64)> {
        model::block_scores(&self.0.weights, &state.0, &task.0, &action.0, &self::history(history))
    }

    #[pyo3(signature = (state, task, history=None))]
    fn predict(&self, state: &PyWorldState, task: &PyTaskSpec, history: Option<Vec<PyAction>>) -> (PyAction, f64) {
        let s = model::predict_in(&self.0.weights, &state.0, &task.0, &self::history(history), self.0.space());
        (PyAction(s.action), s.score)
    }

    #[pyo3(signature = (state, task, k=3, history=None))]
    fn top_k(&self, state: &PyWorldState, task: &PyTaskSpec, k: usize, history: Option<Vec<PyAction>>) -> Vec<(PyAction, f64)> {
        scored(model::top_k_in(&self.0.weights, &state.0, &task.0, &self::history(history), k, self.0.space()))
    }

    /// Closed-loop execution until DONE or `max_steps`; returns `(actions, final_state, status)`.
    #[pyo3(signature = (state, task, max_steps=None))]
    fn rollout(&self, state: &PyWorldState, task: &PyTaskSpec, max_steps: Option<usize>) -> PyResult<(Vec<PyAction>, PyWorldState, String)> {
        let opts = RolloutOptions { max_steps, ..Default::default() };
        let r = model::rollout(&self.0.weights, &state.0, &task.0, opts).map_err(value_err)?;
        let status = match r.status {
            RolloutStatus::Done => "DONE",
            RolloutStatus::MaxSteps => "MAX_STEPS",
        };
        Ok((r.actions.into_iter().map(PyAction).collect(), PyWorldState(r.final_state), status.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={:?}, C={})", self.kind(), self.0.config.c)
    }
}

#[pyfunction]
#[pyo3(signature = (seed=0, n_scenarios=127))]
fn generate_corpus(py: Python<'_>, seed: u64, n_scenarios: usize) -> PyResult<Vec<PyExample>> {
    let config = GeneratorConfig { seed, n_scenarios, ..Default::default() };
    let corpus = py.detach(|| corpus::generate_corpus(&config)).map_err(value_err)?;
    Ok(corpus.into_iter().map(PyExample).collect())
}

#[pyfunction]
fn load_corpus(path: PathBuf) -> PyResult<Vec<PyExample>> {
    let corpus = corpus::load_corpus(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(corpus.into_iter().map(PyExample).collect())
}

#[pyfunction]
fn save_corpus(corpus: Vec<PyExample>, path: PathBuf) -> PyResult<()> {
    corpus::save_corpus(&unwrap_corpus(corpus), path).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// Seeded k-fold cross-validation against the chance and multiclass baselines, as a dict.
#[pyfunction]
#[pyo3(signature = (corpus, folds=6, C=1000.0, epsilon=0.01, seed=0))]
#[allow(non_snake_case)]
fn cross_validate(py: Python<'_>, corpus: Vec<PyExample>, folds: usize, C: f64, epsilon: f64, seed: u64) -> PyResult<Py<PyAny>> {
    let corpus = unwrap_corpus(corpus);
    let config = TrainConfig { c: C, epsilon, seed, ..Default::default() };
    let cv = py.detach(|| eval::cross_validate(&corpus, &config, folds)).map_err(value_err)?;
    let out = to_python(py, &cv)?;
    Ok(out)
}

/// Sequence accuracy (percent) of `model` on `corpus` with simulated top-k oracle feedback.
/// `k=1` is the plain closed-loop rollout.
#[pyfunction]
#[pyo3(signature = (corpus, model, k=3, scope="all"))]
fn feedback_eval(py: Python<'_>, corpus: Vec<PyExample>, model: &PyModel, k: usize, scope: &str) -> PyResult<f64> {
    let scope = match scope {
        "first" => FeedbackScope::FirstStep,
        "all" => FeedbackScope::AllSteps,
        other => return Err(PyValueError::new_err(format!("scope must be 'first' or 'all', got {other:?}"))),
    };
    if k == 0 {
        return Err(PyValueError::new_err("k must be at least 1"));
    }
    let corpus = unwrap_corpus(corpus);
    let model = &model.0;
    py.detach(|| eval::feedback_eval(&corpus, model, FeedbackPolicy::oracle(k, scope))).map_err(value_err)
}

/// Runs the recipe suite for `seed`; one dict per recipe scenario.
#[pyfunction]
#[pyo3(signature = (model, seed=0, k=None))]
fn chain(py: Python<'_>, model: &PyModel, seed: u64, k: Option<usize>) -> PyResult<Vec<Py<PyAny>>> {
    let suite = corpus::generate_recipe_suite(seed).map_err(value_err)?;
    let mut out = Vec::new();
    for s in &suite {
        let outcome = eval::chain_tasks(&s.tasks, &s.initial_state, &model.0, k);
        let d = PyDict::new(py);
        d.set_item("scenario_id", &s.scenario_id)?;
        d.set_item("recipe", s.recipe.name())?;
        d.set_item("tasks", s.tasks.len())?;
        d.set_item("success", outcome.success)?;
        d.set_item("completed_tasks", outcome.completed_tasks)?;
        d.set_item("trace", outcome.trace.into_iter().map(PyAction).collect::<Vec<_>>())?;
        d.set_item("error", outcome.error)?;
        out.push(d.into_any().unbind());
    }
    Ok(out)
}

#[pymodule(name = "taskseq")]
fn taskseq_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAction>()?;
    m.add_class::<PyTaskSpec>()?;
    m.add_class::<PyWorldState>()?;
    m.add_class::<PyExample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(save_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(feedback_eval, m)?)?;
    m.add_function(wrap_pyfunction!(chain, m)?)?;
    m.add("FEATURE_DIM", taskseq::features::DIM)?;
    m.add("MAX_STEPS", taskseq::model::DEFAULT_MAX_STEPS)?;
    Ok(())
}
