//! Python bindings. Structured results cross the boundary as plain dicts
//! and lists (serialized through `json`), so Python needs no extra types.

use std::path::PathBuf;

use bumper_core::guidelines::{self, CheckVariant, Guidelines};
use bumper_core::llm::{tokenize, Completion, TokenInfo};
use bumper_core::pipeline::{AskOptions, Thread};
use bumper_core::stability::{self, EvaluateSettings};
use bumper_core::EmbeddingVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let raw = serde_json::to_string(value).map_err(runtime_err)?;
    Ok(py.import("json")?.call_method1("loads", (raw,))?.unbind())
}

fn vectors(points: Vec<Vec<f64>>) -> PyResult<Vec<EmbeddingVector>> {
    points.into_iter().map(|p| EmbeddingVector::new(p).map_err(value_err)).collect()
}

fn parse_variant(variant: &str) -> PyResult<CheckVariant> {
    variant.parse().map_err(PyValueError::new_err)
}

/// Per-element compliance score from criterion and topic affirmative probabilities.
#[pyfunction]
fn compliance_score_elements(criteria: Vec<f64>, topics: Vec<f64>) -> PyResult<f64> {
    guidelines::compliance_score_elements(&criteria, &topics).map_err(value_err)
}

/// Word-set Jaccard similarity of two texts.
#[pyfunction]
fn jaccard(a: &str, b: &str) -> f64 {
    stability::jaccard(a, b)
}

/// Check prompt(s) for a variant: one for whole, one per element otherwise.
#[pyfunction]
#[pyo3(signature = (criteria, topics, evidence, variant = "per-element"))]
fn render_check_prompt(criteria: Vec<String>, topics: Vec<String>, evidence: &str, variant: &str) -> PyResult<Vec<String>> {
    let g = Guidelines { criteria, topics };
    guidelines::render_check_prompt(&g, evidence, parse_variant(variant)?).map_err(value_err)
}

/// Reads a yes/no verdict from a reply whose first token had probability `p0`.
#[pyfunction]
fn parse_verdict(py: Python<'_>, text: &str, p0: f64) -> PyResult<Py<PyAny>> {
    if !(p0 > 0.0 && p0 <= 1.0) {
        return Err(PyValueError::new_err(format!("p0 {p0} is outside (0, 1]")));
    }
    let tokens = tokenize(text)
        .into_iter()
        .enumerate()
        .map(|(i, t)| TokenInfo::new(t, if i == 0 { p0.ln() } else { 0.0 }))
        .collect();
    let probe = guidelines::parse_verdict(&Completion { text: text.to_string(), tokens }).map_err(value_err)?;
    to_py(py, &probe)
}

#[pyfunction]
#[pyo3(signature = (points, k, seed = 0))]
fn kmeans(py: Python<'_>, points: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let report = stability::kmeans(&vectors(points)?, k, seed).map_err(value_err)?;
    to_py(py, &report)
}

/// Principal-component projection to two dimensions.
#[pyfunction]
fn project_2d(points: Vec<Vec<f64>>) -> PyResult<Vec<(f64, f64)>> {
    stability::project_2d(&vectors(points)?).map_err(value_err)
}

/// A loaded config with one running conversation.
#[pyclass(name = "Bumper")]
struct PyBumper {
    inner: bumper_core::Bumper,
    thread: Thread,
}

#[pymethods]
impl PyBumper {
    /// `mock` replays a mock script instead of the configured provider.
    #[new]
    #[pyo3(signature = (config, mock = None))]
    fn new(config: PathBuf, mock: Option<PathBuf>) -> PyResult<Self> {
        let inner = bumper_core::Bumper::load(&config, mock.as_deref()).map_err(value_err)?;
        Ok(Self { inner, thread: Thread::new() })
    }

    /// Asks within the running conversation and returns the answer as a dict.
    fn ask(&mut self, py: Python<'_>, query: &str) -> PyResult<Py<PyAny>> {
        let (inner, thread) = (&self.inner, &mut self.thread);
        let answer = py.detach(|| inner.ask(thread, query));
        to_py(py, &answer)
    }

    /// One-off answer outside the conversation, with an explicit check variant.
    #[pyo3(signature = (query, variant = None))]
    fn answer(&self, py: Python<'_>, query: &str, variant: Option<&str>) -> PyResult<Py<PyAny>> {
        let options = AskOptions { variant: variant.map(parse_variant).transpose()?, ..Default::default() };
        let inner = &self.inner;
        let answer = py.detach(|| inner.answer(&[], query, options));
        to_py(py, &answer)
    }

    fn actions(&self) -> Vec<String> {
        self.inner.knowledge_base().specs().iter().map(|s| s.name.clone()).collect()
    }

    fn transcript(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.thread)
    }

    /// Runs the stability protocol; writes a bundle when `out` is given.
    #[pyo3(signature = (query, n_answers = stability::DEFAULT_ANSWERS, n_checks = stability::DEFAULT_CHECKS, variant = None, k = stability::DEFAULT_CLUSTERS, seed = 0, out = None))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        py: Python<'_>,
        query: &str,
        n_answers: usize,
        n_checks: usize,
        variant: Option<&str>,
        k: usize,
        seed: u64,
        out: Option<PathBuf>,
    ) -> PyResult<Py<PyAny>> {
        let variant = match variant {
            Some(v) => parse_variant(v)?,
            None => self.inner.config().check.variant(),
        };
        let settings = EvaluateSettings { n_answers, n_checks, variant, k, seed, ..Default::default() };
        let inner = &self.inner;
        let eval = py.detach(|| stability::evaluate(inner, query, &settings)).map_err(value_err)?;
        if let Some(dir) = out {
            stability::write_bundle(&dir, &eval).map_err(runtime_err)?;
        }
        to_py(py, &stability::ReportSummary::from_evaluation(&eval))
    }
}

#[pymodule]
fn bumper(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compliance_score_elements, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(render_check_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_verdict, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(project_2d, m)?)?;
    m.add_class::<PyBumper>()?;
    Ok(())
}
