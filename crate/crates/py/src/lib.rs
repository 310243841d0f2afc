//! Python bindings: workflow mining and a live recommender over a checkpoint
//! and preprocessing bundle.

use std::path::PathBuf;

use bimflow_core::align::providers::StubTranslator;
use bimflow_core::augment::bpe::{learn_workflows as learn, BpeModel};
use bimflow_core::io::event_from_json;
use bimflow_core::live::{Engine, SessionStore};
use bimflow_core::model::checkpoint::Checkpoint;
use bimflow_core::model::train::TrainConfig;
use bimflow_core::model::ModelConfig;
use bimflow_core::pipeline::Bundle;
use bimflow_core::synthetic::{grammar_service, GrammarConfig};
use bimflow_core::CoreError;
use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::Value;

fn py_err(e: CoreError) -> PyErr {
    match e {
        CoreError::UnknownSession(_) => PyKeyError::new_err(e.to_string()),
        CoreError::Validation(_) | CoreError::EmptySession => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Serializable value to native Python objects via the json module.
fn to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Learns `merges` workflow merges; returns `(workflow, constituents)` pairs.
#[pyfunction]
fn learn_workflows(corpus: Vec<Vec<String>>, merges: usize) -> Vec<(String, Vec<String>)> {
    learn(&corpus, merges).workflows()
}

/// Rewrites each sequence with the merges, in order.
#[pyfunction]
fn encode_workflows(corpus: Vec<Vec<String>>, merges: usize, sequences: Vec<Vec<String>>) -> Vec<Vec<String>> {
    let model: BpeModel = learn(&corpus, merges);
    sequences.iter().map(|s| model.encode(s)).collect()
}

/// Trains a small model on the built-in session grammar and writes a
/// checkpoint and matching bundle under `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, epochs = 3, sessions = 1500))]
fn train_demo(py: Python<'_>, out_dir: PathBuf, epochs: usize, sessions: usize) -> PyResult<(PathBuf, PathBuf)> {
    let grammar = GrammarConfig { sessions, ..Default::default() };
    let tc = TrainConfig { epochs, batch: 32, lr: 3e-3, ..Default::default() };
    let (ckpt, bundle) = py.detach(|| grammar_service(&grammar, ModelConfig::default(), &tc)).map_err(py_err)?;
    let (c, b) = (out_dir.join("checkpoint.json"), out_dir.join("bundle"));
    std::fs::create_dir_all(&out_dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    ckpt.save(&c).map_err(py_err)?;
    bundle.save(&b).map_err(py_err)?;
    Ok((c, b))
}

#[pyclass(frozen)]
struct Recommender {
    engine: Engine,
    sessions: SessionStore,
}

#[pymethods]
impl Recommender {
    #[new]
    fn new(checkpoint: PathBuf, bundle: PathBuf) -> PyResult<Self> {
        let engine = Engine::new(
            Checkpoint::load(&checkpoint).map_err(py_err)?,
            Bundle::load(&bundle).map_err(py_err)?,
            Box::new(StubTranslator),
        )
        .map_err(py_err)?;
        Ok(Recommender { engine, sessions: SessionStore::new() })
    }

    #[getter]
    fn version(&self) -> String {
        self.engine.version.clone()
    }

    #[getter]
    fn vocabulary_hash(&self) -> String {
        self.engine.bundle.vocabulary.hash()
    }

    fn create_session(&self) -> String {
        self.sessions.create(chrono::Utc::now())
    }

    /// Appends one raw event (`ts`, `category`, `prefix`, `message`, optional
    /// `command_id` and `lang`); returns the change to the processed sequence.
    fn append(&self, py: Python<'_>, session_id: &str, event: &Bound<'_, PyDict>) -> PyResult<Py<PyAny>> {
        let value = from_py(py, event.as_any())?;
        let entry = event_from_json(&value, session_id).map_err(py_err)?;
        let session = self.sessions.get(session_id).map_err(py_err)?;
        let mut s = session.lock().expect("session lock");
        let delta = self.engine.append(&mut s, entry, chrono::Utc::now()).map_err(py_err)?;
        to_py(py, &delta)
    }

    /// Names of the processed steps, oldest first.
    fn steps(&self, session_id: &str) -> PyResult<Vec<String>> {
        let session = self.sessions.get(session_id).map_err(py_err)?;
        let s = session.lock().expect("session lock");
        Ok(s.steps().iter().map(|st| st.name.clone()).collect())
    }

    #[pyo3(signature = (session_id, k = 10))]
    fn recommend(&self, py: Python<'_>, session_id: &str, k: usize) -> PyResult<Py<PyAny>> {
        let steps = {
            let session = self.sessions.get(session_id).map_err(py_err)?;
            let s = session.lock().expect("session lock");
            s.steps().to_vec()
        };
        if steps.is_empty() {
            return Err(py_err(CoreError::EmptySession));
        }
        let resp = py.detach(|| self.engine.recommend(&steps, k)).map_err(py_err)?;
        to_py(py, &resp)
    }
}

#[pymodule]
fn bimflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(learn_workflows, m)?)?;
    m.add_function(wrap_pyfunction!(encode_workflows, m)?)?;
    m.add_function(wrap_pyfunction!(train_demo, m)?)?;
    m.add_class::<Recommender>()?;
    Ok(())
}
