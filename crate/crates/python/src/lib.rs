//! Python bindings. Structured results come back as plain dicts and lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyAny;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use relmine::decision::{self, DecisionRule, VerifiedCandidate};
use relmine::grouping::{self, GroupingMethod};
use relmine::llm::MockBackend;
use relmine::metrics::{self, EvalPair};
use relmine::pipeline::{self, LabeledSample, Mode, RunSettings};
use relmine::prompt::{self, PromptTemplates, Query};
use relmine::schema::{parse_corpus, RelationSchema, UnlabeledSentence};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> PyResult<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(err)?);
        out.push('\n');
    }
    Ok(out)
}

/// A relation schema.
#[pyclass(name = "Schema", frozen)]
struct PySchema {
    inner: RelationSchema,
}

#[pymethods]
impl PySchema {
    /// `"tacred"` or `"semeval"`.
    #[staticmethod]
    fn bundled(name: &str) -> PyResult<Self> {
        Ok(PySchema {
            inner: RelationSchema::bundled(name).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PySchema {
            inner: RelationSchema::from_json(text).map_err(err)?,
        })
    }

    #[getter]
    fn na_label(&self) -> String {
        self.inner.na_label.clone()
    }

    fn relation_names(&self) -> Vec<String> {
        self.inner.relations.iter().map(|r| r.name.clone()).collect()
    }

    fn non_na_names(&self) -> Vec<String> {
        self.inner.non_na_names()
    }

    fn total_labels(&self) -> usize {
        self.inner.total_labels()
    }

    fn to_json(&self) -> String {
        self.inner.to_json_pretty()
    }

    fn __len__(&self) -> usize {
        self.inner.total_labels()
    }

    fn __repr__(&self) -> String {
        format!("Schema({} labels, na_label={:?})", self.inner.total_labels(), self.inner.na_label)
    }
}

#[pyfunction]
fn default_group_count(n_total: usize) -> usize {
    grouping::default_group_count(n_total)
}

/// Groups of relation names. `k=None` applies the default rule.
#[pyfunction]
#[pyo3(signature = (schema, k=None, method="algorithmic", seed=0))]
fn build_groups(schema: &PySchema, k: Option<usize>, method: &str, seed: u64) -> PyResult<Vec<Vec<String>>> {
    let method: GroupingMethod = method.parse().map_err(PyValueError::new_err)?;
    let k = k.unwrap_or_else(|| grouping::default_group_count(schema.inner.total_labels()));
    Ok(grouping::build_groups(&schema.inner, k, method, seed).map_err(err)?.groups)
}

/// Cosine similarity of the TF-IDF vectors of the non-NA explanations.
#[pyfunction]
fn similarity_matrix(schema: &PySchema) -> PyResult<Vec<Vec<f64>>> {
    let tfidf = grouping::vectorize_explanations(&schema.inner).map_err(err)?;
    Ok(grouping::similarity_matrix(&tfidf).rows())
}

/// Mean of per-token top probabilities.
#[pyfunction]
fn confidence(token_top_probs: Vec<f64>) -> PyResult<f64> {
    decision::mean_top_prob(&token_top_probs).map_err(err)
}

/// `candidates` is a list of `(relation, affirmed, confidence)`.
#[pyfunction]
#[pyo3(signature = (candidates, na_label, theta=decision::DEFAULT_THETA, strict_multiyes=false))]
fn decide<'py>(
    py: Python<'py>,
    candidates: Vec<(String, bool, f64)>,
    na_label: &str,
    theta: f64,
    strict_multiyes: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cands: Vec<VerifiedCandidate> = candidates
        .into_iter()
        .map(|(relation, affirmed, confidence)| VerifiedCandidate {
            relation,
            affirmed,
            confidence,
            group_index: None,
        })
        .collect();
    let d = decision::decide_with(&cands, DecisionRule { theta, strict_multiyes }, na_label).map_err(err)?;
    to_py(py, &d)
}

/// Label named by a multi-class answer, or `None` for the NA option or an unusable answer.
#[pyfunction]
fn parse_multi(text: &str, group: Vec<String>, na_label: &str) -> Option<String> {
    prompt::parse_multi_response(text, &group, na_label).label
}

/// Whether a binary answer affirms the relation.
#[pyfunction]
fn parse_binary(text: &str, relation: &str) -> bool {
    prompt::parse_binary_response(text, relation).affirmed
}

fn sentence(text: &str) -> UnlabeledSentence {
    UnlabeledSentence {
        id: "python".into(),
        text: text.into(),
        entities: Vec::new(),
    }
}

#[pyfunction]
#[pyo3(signature = (schema, relations, sentence_text, head, tail, demos_per_relation=prompt::DEFAULT_DEMOS_PER_RELATION))]
fn render_multi_prompt(
    schema: &PySchema,
    relations: Vec<String>,
    sentence_text: &str,
    head: &str,
    tail: &str,
    demos_per_relation: usize,
) -> PyResult<String> {
    let rels = relations
        .iter()
        .map(|n| schema.inner.get(n).ok_or_else(|| PyValueError::new_err(format!("unknown relation {n:?}"))))
        .collect::<PyResult<Vec<_>>>()?;
    let s = sentence(sentence_text);
    let p = prompt::build_multi_prompt(
        &PromptTemplates::builtin(),
        &rels,
        None,
        &schema.inner.na_label,
        Query::new(&s, head, tail),
        demos_per_relation,
    )
    .map_err(err)?;
    Ok(p.text)
}

#[pyfunction]
fn render_binary_prompt(schema: &PySchema, relation: &str, sentence_text: &str, head: &str, tail: &str) -> PyResult<String> {
    let rel = schema
        .inner
        .get(relation)
        .ok_or_else(|| PyValueError::new_err(format!("unknown relation {relation:?}")))?;
    let s = sentence(sentence_text);
    Ok(prompt::build_binary_prompt(&PromptTemplates::builtin(), rel, Query::new(&s, head, tail))
        .map_err(err)?
        .text)
}

fn to_pairs(items: Vec<(Vec<String>, Vec<String>)>) -> Vec<EvalPair> {
    items.into_iter().map(|(p, r)| EvalPair::new(p, r)).collect()
}

/// `pairs` is a list of `(predicted labels, gold labels)`.
#[pyfunction]
fn special_avg_f1(pairs: Vec<(Vec<String>, Vec<String>)>) -> PyResult<f64> {
    metrics::special_avg_f1(&to_pairs(pairs)).map_err(err)
}

#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pairs: Vec<(Vec<String>, Vec<String>)>, na_label: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &metrics::evaluate(&to_pairs(pairs), na_label).map_err(err)?)
}

/// Annotates a JSONL corpus with a scripted mock backend. Returns
/// `(dataset_jsonl, trace_jsonl, stats)`.
#[pyfunction]
#[pyo3(signature = (schema, corpus_jsonl, script_jsonl, mode="mbre", k=None, theta=decision::DEFAULT_THETA, seed=0, workers=1))]
#[allow(clippy::too_many_arguments)]
fn run_mock<'py>(
    py: Python<'py>,
    schema: &PySchema,
    corpus_jsonl: &str,
    script_jsonl: &str,
    mode: &str,
    k: Option<usize>,
    theta: f64,
    seed: u64,
    workers: usize,
) -> PyResult<(String, String, Bound<'py, PyAny>)> {
    let mode: Mode = mode.parse().map_err(PyValueError::new_err)?;
    let corpus = parse_corpus(corpus_jsonl).map_err(err)?;
    let backend = MockBackend::from_jsonl(script_jsonl).map_err(err)?;
    let groups = match mode {
        Mode::Mbre => {
            let k = k.unwrap_or_else(|| grouping::default_group_count(schema.inner.total_labels()));
            Some(grouping::build_groups(&schema.inner, k, GroupingMethod::Algorithmic, seed).map_err(err)?)
        }
        _ => None,
    };
    let settings = RunSettings {
        mode,
        rule: DecisionRule::new(theta).map_err(err)?,
        seed,
        workers,
        ..Default::default()
    };
    let templates = PromptTemplates::builtin();
    let out = py
        .detach(|| pipeline::run_corpus(&corpus, &schema.inner, groups.as_ref(), &templates, &backend, &settings))
        .map_err(err)?;
    let mut stats = out.stats;
    stats.wall_time_ms = None;
    Ok((jsonl(&out.samples)?, jsonl(&out.records)?, to_py(py, &stats)?))
}

/// Downsamples NA rows of a dataset JSONL; returns the kept rows as JSONL.
#[pyfunction]
#[pyo3(signature = (dataset_jsonl, na_label, seed=0))]
fn balance_na(dataset_jsonl: &str, na_label: &str, seed: u64) -> PyResult<String> {
    let samples = dataset_jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<LabeledSample>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    jsonl(&pipeline::balance_na(&samples, na_label, &mut ChaCha8Rng::seed_from_u64(seed)))
}

#[pymodule]
fn relmine_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchema>()?;
    m.add_function(wrap_pyfunction!(default_group_count, m)?)?;
    m.add_function(wrap_pyfunction!(build_groups, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(confidence, m)?)?;
    m.add_function(wrap_pyfunction!(decide, m)?)?;
    m.add_function(wrap_pyfunction!(parse_multi, m)?)?;
    m.add_function(wrap_pyfunction!(parse_binary, m)?)?;
    m.add_function(wrap_pyfunction!(render_multi_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(render_binary_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(special_avg_f1, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_mock, m)?)?;
    m.add_function(wrap_pyfunction!(balance_na, m)?)?;
    m.add("THETA_GRID", decision::THETA_GRID.to_vec())?;
    Ok(())
}
