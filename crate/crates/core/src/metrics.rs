//! Evaluation of predicted label sets against gold labels.
//!
//! * Special average F1 scores each prediction set as a set, so long lists pay
//!   in precision. An empty intersection scores `1e-10`.
//! * Micro/macro F1 use the inclusion criterion: a prediction containing the gold
//!   label counts as that label. Otherwise it collapses to its most confident
//!   label (ties by name, missing confidences count as 0), or to the NA label
//!   when empty.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::RunStats;

/// Score assigned to precision and recall when prediction and reference are disjoint.
pub const DISJOINT_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    Empty,
    #[error("pair {0}: reference set is empty")]
    EmptyReference(usize),
    #[error("pair {0}: inclusion metrics need a single gold label, got {1}")]
    MultiLabelReference(usize, usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalPair {
    pub prediction: BTreeSet<String>,
    pub reference: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<BTreeMap<String, f64>>,
}

impl EvalPair {
    pub fn new<P, R, S, T>(prediction: P, reference: R) -> Self
    where
        P: IntoIterator<Item = S>,
        R: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        EvalPair {
            prediction: prediction.into_iter().map(Into::into).collect(),
            reference: reference.into_iter().map(Into::into).collect(),
            confidences: None,
        }
    }

    pub fn with_confidences(mut self, confidences: impl IntoIterator<Item = (String, f64)>) -> Self {
        self.confidences = Some(confidences.into_iter().collect());
        self
    }

    /// Set-based F1 with the disjoint floor.
    pub fn set_f1(&self) -> f64 {
        let hit = self.prediction.intersection(&self.reference).count();
        let (p, r) = if hit == 0 {
            (DISJOINT_FLOOR, DISJOINT_FLOOR)
        } else {
            (hit as f64 / self.prediction.len() as f64, hit as f64 / self.reference.len() as f64)
        };
        2.0 * p * r / (p + r)
    }

    /// The single label this prediction counts as under the inclusion criterion.
    pub fn collapse(&self, gold: &str, na_label: &str) -> String {
        if self.prediction.contains(gold) {
            return gold.to_string();
        }
        let conf = |l: &str| {
            self.confidences
                .as_ref()
                .and_then(|c| c.get(l).copied())
                .unwrap_or(0.0)
        };
        let mut best: Option<(&String, f64)> = None;
        // BTreeSet iterates by name, so a strict comparison keeps the first name on ties.
        for label in &self.prediction {
            let c = conf(label);
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((label, c));
            }
        }
        best.map(|(l, _)| l.clone()).unwrap_or_else(|| na_label.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub special_avg_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionScores {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn check_pairs(pairs: &[EvalPair]) -> Result<(), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(i) = pairs.iter().position(|p| p.reference.is_empty()) {
        return Err(MetricsError::EmptyReference(i));
    }
    Ok(())
}

pub fn special_avg_f1(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    check_pairs(pairs)?;
    Ok(pairs.iter().map(EvalPair::set_f1).sum::<f64>() / pairs.len() as f64)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro and macro scores over the collapsed single-label confusion. Macro
/// averages are unweighted over the labels that occur as gold.
pub fn inclusion_micro_macro(pairs: &[EvalPair], na_label: &str) -> Result<InclusionScores, MetricsError> {
    check_pairs(pairs)?;
    let mut tp: BTreeMap<String, usize> = BTreeMap::new();
    let mut predicted: BTreeMap<String, usize> = BTreeMap::new();
    let mut gold_count: BTreeMap<String, usize> = BTreeMap::new();
    for (i, pair) in pairs.iter().enumerate() {
        if pair.reference.len() != 1 {
            return Err(MetricsError::MultiLabelReference(i, pair.reference.len()));
        }
        let gold = pair.reference.iter().next().expect("singleton");
        let pred = pair.collapse(gold, na_label);
        *gold_count.entry(gold.clone()).or_default() += 1;
        if &pred == gold {
            *tp.entry(pred.clone()).or_default() += 1;
        }
        *predicted.entry(pred).or_default() += 1;
    }
    let tp_total: usize = tp.values().sum();
    let micro_precision = ratio(tp_total, predicted.values().sum());
    let micro_recall = ratio(tp_total, gold_count.values().sum());

    let mut mp = 0.0;
    let mut mr = 0.0;
    let mut mf = 0.0;
    for (label, &g) in &gold_count {
        let t = tp.get(label).copied().unwrap_or(0);
        let p = ratio(t, predicted.get(label).copied().unwrap_or(0));
        let r = ratio(t, g);
        mp += p;
        mr += r;
        mf += f1(p, r);
    }
    let labels = gold_count.len() as f64;
    Ok(InclusionScores {
        micro_precision,
        micro_recall,
        micro_f1: f1(micro_precision, micro_recall),
        macro_precision: mp / labels,
        macro_recall: mr / labels,
        macro_f1: mf / labels,
    })
}

pub fn evaluate(pairs: &[EvalPair], na_label: &str) -> Result<EvalReport, MetricsError> {
    let inc = inclusion_micro_macro(pairs, na_label)?;
    Ok(EvalReport {
        n: pairs.len(),
        micro_precision: inc.micro_precision,
        micro_recall: inc.micro_recall,
        micro_f1: inc.micro_f1,
        macro_precision: inc.macro_precision,
        macro_recall: inc.macro_recall,
        macro_f1: inc.macro_f1,
        special_avg_f1: special_avg_f1(pairs)?,
        elapsed_ms: None,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Deserialize)]
struct EvalLine {
    prediction: OneOrMany,
    #[serde(default)]
    confidences: Option<BTreeMap<String, f64>>,
    gold: OneOrMany,
}

/// Parses `{"prediction": [..] | "..", "confidences": {..}?, "gold": ".." | [..]}` lines.
pub fn parse_eval_jsonl(text: &str) -> Result<Vec<EvalPair>, MetricsError> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EvalLine = serde_json::from_str(line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        pairs.push(EvalPair {
            prediction: parsed.prediction.into_vec().into_iter().collect(),
            reference: parsed.gold.into_vec().into_iter().collect(),
            confidences: parsed.confidences,
        });
    }
    Ok(pairs)
}

pub fn load_eval_jsonl(path: impl AsRef<Path>) -> Result<Vec<EvalPair>, MetricsError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_eval_jsonl(&text)
}

/// One row of a report: a mode or run with its scores and cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub label: String,
    pub metrics: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calls_multi: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calls_binary: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calls_total: Option<u64>,
}

impl ReportEntry {
    pub fn new(label: impl Into<String>, metrics: EvalReport) -> Self {
        ReportEntry {
            label: label.into(),
            metrics,
            calls_multi: None,
            calls_binary: None,
            calls_total: None,
        }
    }

    pub fn with_stats(mut self, stats: &RunStats) -> Self {
        self.calls_multi = Some(stats.calls_multi);
        self.calls_binary = Some(stats.calls_binary);
        self.calls_total = Some(stats.calls_total);
        if self.metrics.elapsed_ms.is_none() {
            self.metrics.elapsed_ms = Some(stats.wall_time_ms.unwrap_or(stats.model_time_ms));
        }
        self
    }
}

/// Percentage with two decimals.
pub fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn opt(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

pub fn render_table(entries: &[ReportEntry]) -> String {
    let header = [
        "run", "n", "micro_f1", "macro_f1", "macro_p", "macro_r", "special_avg_f1", "calls_multi", "calls_binary",
        "calls_total", "elapsed_ms",
    ];
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            let m = &e.metrics;
            vec![
                e.label.clone(),
                m.n.to_string(),
                pct(m.micro_f1),
                pct(m.macro_f1),
                pct(m.macro_precision),
                pct(m.macro_recall),
                pct(m.special_avg_f1),
                opt(e.calls_multi),
                opt(e.calls_binary),
                opt(e.calls_total),
                opt(m.elapsed_ms),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let mut s = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ");
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for row in &rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

/// Writes `path` (JSON) and the same path with a `.txt` extension (table).
/// Returns the table path.
pub fn emit_report(entries: &[ReportEntry], path: impl AsRef<Path>) -> Result<PathBuf, MetricsError> {
    let path = path.as_ref();
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| MetricsError::Io { path: p, source }
    };
    let doc = serde_json::json!({ "entries": entries });
    let mut json = serde_json::to_string_pretty(&doc).expect("report serializes");
    json.push('\n');
    fs::write(path, json).map_err(io(path))?;
    let table_path = path.with_extension("txt");
    fs::write(&table_path, render_table(entries)).map_err(io(&table_path))?;
    Ok(table_path)
}
