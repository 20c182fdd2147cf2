//! Python bindings: configuration, the staged pipeline, reports, the user
//! index and the standalone metric and distribution functions.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use cfrag_core::corpus::{hash_embed, Document, Sample, Task};
use cfrag_core::pipeline::{
    build_prompt as core_build_prompt, generate_synthetic, load_report, run_eval, run_train,
    write_synthetic, PipelineConfig, RunReport, SyntheticSpec, Workspace,
};
use cfrag_core::user_model::UserIndex as CoreIndex;

create_exception!(cfrag, CfragError, PyException);

fn err(e: cfrag_core::Error) -> PyErr {
    CfragError::new_err(e.to_string())
}

/// Pipeline configuration. Keys and values use the flat config-file syntax.
#[pyclass(name = "Config", module = "cfrag")]
struct Config {
    inner: PipelineConfig,
}

#[pymethods]
impl Config {
    /// Defaults, then `path` if given, then keyword overrides.
    #[new]
    #[pyo3(signature = (path=None, **overrides))]
    fn new(path: Option<PathBuf>, overrides: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let mut inner = PipelineConfig::default();
        if let Some(p) = path {
            inner.apply_file(p).map_err(err)?;
        }
        for (k, v) in overrides.unwrap_or_default() {
            inner.set(&k, &v).map_err(err)?;
        }
        Ok(Config { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .snapshot()
            .remove(key)
            .ok_or_else(|| CfragError::new_err(format!("unknown config key `{key}`")))
    }

    fn snapshot(&self) -> BTreeMap<String, String> {
        self.inner.snapshot()
    }

    fn to_flat(&self) -> String {
        self.inner.to_flat()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(out_dir={:?}, dim={}, m={}, k={})",
            self.inner.out_dir, self.inner.dim, self.inner.m, self.inner.k
        )
    }
}

/// An evaluation report.
#[pyclass(name = "Report", module = "cfrag", frozen)]
struct Report {
    inner: RunReport,
}

#[pymethods]
impl Report {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Report {
            inner: load_report(path).map_err(err)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn variants(&self) -> Vec<String> {
        self.inner.variants.iter().map(|v| v.name.clone()).collect()
    }

    /// Mean feedback score of one variant.
    fn score(&self, variant: &str) -> PyResult<f64> {
        self.inner
            .variant(variant)
            .map(|v| v.mean_score)
            .ok_or_else(|| CfragError::new_err(format!("no variant `{variant}`")))
    }

    fn evidence_hit_rate(&self, variant: &str) -> PyResult<Option<f64>> {
        self.inner
            .variant(variant)
            .map(|v| v.evidence_hit_rate)
            .ok_or_else(|| CfragError::new_err(format!("no variant `{variant}`")))
    }

    fn summary(&self) -> String {
        self.inner.summary()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json_string(&self.inner)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        py.import("json")?.call_method1("loads", (self.to_json()?,))
    }
}

fn serde_json_string(report: &RunReport) -> PyResult<String> {
    cfrag_core::pipeline::report_json(report).map_err(err)
}

/// Trained user embeddings, loaded from a run directory's index file.
#[pyclass(name = "UserIndex", module = "cfrag", frozen)]
struct UserIndex {
    inner: CoreIndex,
}

#[pymethods]
impl UserIndex {
    #[staticmethod]
    #[pyo3(signature = (path, dim=None))]
    fn load(path: PathBuf, dim: Option<usize>) -> PyResult<Self> {
        Ok(UserIndex {
            inner: CoreIndex::load(path, dim).map_err(err)?,
        })
    }

    /// The `m` most similar users as `(user_id, cosine)`, best first.
    fn retrieve(&self, user_id: &str, m: usize) -> PyResult<Vec<(String, f64)>> {
        self.inner.retrieve(user_id, m).map_err(err)
    }

    fn embedding(&self, user_id: &str) -> Option<Vec<f64>> {
        self.inner.embedding(user_id).map(<[f64]>::to_vec)
    }

    fn user_ids(&self) -> Vec<String> {
        self.inner.iter().map(|(id, _)| id.to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Writes a synthetic benchmark into `out_dir` and returns
/// `(users, samples)`. Keyword arguments are synthetic spec keys.
#[pyfunction]
#[pyo3(signature = (out_dir, **spec))]
fn synth(out_dir: PathBuf, spec: Option<BTreeMap<String, String>>) -> PyResult<(usize, usize)> {
    let mut s = SyntheticSpec::default();
    for (k, v) in spec.unwrap_or_default() {
        s.set(&k, &v).map_err(err)?;
    }
    let data = generate_synthetic(&s).map_err(err)?;
    write_synthetic(&data, out_dir).map_err(err)?;
    Ok((data.dataset.users.len(), data.dataset.samples.len()))
}

/// Runs all three training stages; returns the loss traces by stage.
#[pyfunction]
fn train(py: Python<'_>, config: &Config) -> PyResult<BTreeMap<String, Vec<f64>>> {
    let cfg = config.inner.clone();
    let t = py.detach(move || run_train(&cfg)).map_err(err)?;
    Ok(BTreeMap::from([
        ("user".to_string(), t.user),
        ("retriever".to_string(), t.retriever),
        ("reranker".to_string(), t.reranker),
    ]))
}

/// Runs one training stage: `"user"`, `"retriever"` or `"reranker"`.
#[pyfunction]
fn train_stage(py: Python<'_>, config: &Config, stage: &str) -> PyResult<Vec<f64>> {
    let cfg = config.inner.clone();
    let stage = stage.to_string();
    py.detach(move || {
        let ws = Workspace::open(&cfg)?;
        match stage.as_str() {
            "user" => ws.train_user(),
            "retriever" => ws.train_retriever(),
            "reranker" => ws.train_reranker(),
            other => Err(cfrag_core::Error::Config(format!(
                "unknown stage `{other}`"
            ))),
        }
    })
    .map_err(err)
}

/// Evaluates trained checkpoints and writes the report files.
#[pyfunction]
fn evaluate(py: Python<'_>, config: &Config) -> PyResult<Report> {
    let cfg = config.inner.clone();
    let inner = py.detach(move || run_eval(&cfg)).map_err(err)?;
    Ok(Report { inner })
}

/// Builds the generation prompt for `task` from ranked documents. Each
/// document is a dict with `id` and `text`; other keys (such as `title` or
/// `tag`) become auxiliary fields. `fields` fills named template slots of
/// the query such as `title` or `reference_1`.
#[pyfunction]
#[pyo3(signature = (task, query, docs, fields=None))]
fn build_prompt(
    task: &str,
    query: &str,
    docs: Vec<BTreeMap<String, String>>,
    fields: Option<BTreeMap<String, String>>,
) -> PyResult<String> {
    let sample = Sample {
        id: "python".into(),
        user_id: "python".into(),
        query: query.into(),
        target: String::new(),
        task: task.parse::<Task>().map_err(err)?,
        fields: fields.unwrap_or_default(),
    };
    let docs = docs
        .into_iter()
        .enumerate()
        .map(|(i, mut d)| {
            let id = d.remove("id").unwrap_or_else(|| format!("doc{i}"));
            let text = d
                .remove("text")
                .ok_or_else(|| CfragError::new_err(format!("document {i} has no `text`")))?;
            let mut doc = Document::new(id, text);
            doc.aux = d;
            doc.position = i;
            Ok(doc)
        })
        .collect::<PyResult<Vec<Document>>>()?;
    let refs: Vec<&Document> = docs.iter().collect();
    core_build_prompt(&sample, &refs).map_err(err)
}

/// `(precision, recall, f1)` of unigram overlap.
#[pyfunction]
fn rouge1(candidate: &str, reference: &str) -> (f64, f64, f64) {
    let s = cfrag_core::metrics::rouge1(candidate, reference);
    (s.precision, s.recall, s.f1)
}

/// `(precision, recall, f1)` of the longest common subsequence.
#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> (f64, f64, f64) {
    let s = cfrag_core::metrics::rouge_l(candidate, reference);
    (s.precision, s.recall, s.f1)
}

/// `(mae, rmse)`.
#[pyfunction]
fn regression_metrics(preds: Vec<f64>, targets: Vec<f64>) -> PyResult<(f64, f64)> {
    cfrag_core::metrics::regression_metrics(&preds, &targets).map_err(err)
}

#[pyfunction]
fn softmax(scores: Vec<f64>) -> PyResult<Vec<f64>> {
    cfrag_core::distribution::softmax(&scores).map_err(err)
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    cfrag_core::distribution::kl_divergence(&p, &q).map_err(err)
}

/// Deterministic unit-norm hash embedding of `text`.
#[pyfunction(name = "hash_embed")]
fn py_hash_embed(text: &str, dim: usize) -> PyResult<Vec<f64>> {
    if dim == 0 {
        return Err(CfragError::new_err("dim must be positive"));
    }
    Ok(hash_embed(text, dim))
}

#[pymodule]
fn cfrag(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CfragError", m.py().get_type::<CfragError>())?;
    m.add_class::<Config>()?;
    m.add_class::<Report>()?;
    m.add_class::<UserIndex>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(rouge1, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(regression_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(py_hash_embed, m)?)?;
    Ok(())
}
