//! Corpus annotation.
//!
//! Three modes share the same building blocks:
//!
//! * `mbre`: one multi-class prompt per relation group, then one binary
//!   verification per distinct proposed relation, then the label decision;
//! * `multi`: a single multi-class prompt over every non-NA relation;
//! * `binary`: one binary prompt per non-NA relation, then the label decision.

mod balance;
mod entities;

pub use balance::balance_na;
pub use entities::{candidate_entities, fallback_entities, sample_entity_pair, sentence_rng};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{self, Decision, DecisionCase, DecisionError, DecisionRule, VerifiedCandidate};
use crate::grouping::{GroupingError, RelationGroups};
use crate::llm::{Backend, CompletionParams, LlmError, ModelResponse};
use crate::prompt::{
    build_binary_prompt, build_multi_prompt, parse_binary_response, parse_multi_response, BinaryVerdict,
    MultiVerdict, PromptBundle, PromptError, PromptTemplates, Query, DEFAULT_DEMOS_PER_RELATION,
};
use crate::schema::{RelationDef, RelationSchema, UnlabeledSentence};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error(transparent)]
    Groups(#[from] GroupingError),
    #[error("mode mbre requires relation groups")]
    MissingGroups,
    #[error("relation {0:?} is not in the schema")]
    UnknownRelation(String),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mbre,
    Multi,
    Binary,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mbre => "mbre",
            Mode::Multi => "multi",
            Mode::Binary => "binary",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mbre" => Ok(Mode::Mbre),
            "multi" => Ok(Mode::Multi),
            "binary" => Ok(Mode::Binary),
            other => Err(format!("unknown mode {other:?} (expected mbre, multi or binary)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCandidate {
    /// `None` for the single whole-schema prompt of multi mode.
    pub group_index: Option<usize>,
    pub verdict: MultiVerdict,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sentence_id: String,
    pub pair_index: usize,
    pub head: String,
    pub tail: String,
    pub mode: Mode,
    pub group_candidates: Vec<GroupCandidate>,
    /// One entry per binary call, aligned with `binary_verdicts`.
    pub verified: Vec<VerifiedCandidate>,
    pub binary_verdicts: Vec<BinaryVerdict>,
    pub decision: Decision,
    pub calls_multi: u32,
    pub calls_binary: u32,
    pub malformed: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub model_time_ms: u64,
}

impl AnnotationRecord {
    /// Checks the per-mode call counts. `k` is the group count, `relations`
    /// the number of non-NA relations.
    pub fn check_call_accounting(&self, k: usize, relations: usize) -> Result<(), String> {
        let proposed = self
            .group_candidates
            .iter()
            .filter(|g| g.verdict.label.is_some())
            .count();
        let ok = match self.mode {
            Mode::Multi => self.calls_multi == 1 && self.calls_binary == 0,
            Mode::Binary => self.calls_multi == 0 && self.calls_binary as usize == relations,
            Mode::Mbre => {
                self.calls_multi as usize == k
                    && self.calls_binary as usize <= proposed
                    && self.calls_binary as usize <= k
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!(
                "{} record {}#{}: calls ({}, {}) violate accounting (k={k}, relations={relations})",
                self.mode.as_str(),
                self.sentence_id,
                self.pair_index,
                self.calls_multi,
                self.calls_binary
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub run_id: String,
    pub mode: Mode,
    pub theta: f64,
    pub model: String,
    pub case: DecisionCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sentence_id: String,
    pub sentence: String,
    pub head: String,
    pub tail: String,
    pub relation: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceFailure {
    pub sentence_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mode: Option<Mode>,
    pub sentences: usize,
    pub annotated_sentences: usize,
    pub records: usize,
    pub calls_multi: u64,
    pub calls_binary: u64,
    pub calls_total: u64,
    pub malformed_responses: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Sum of per-call latencies reported by the backend.
    pub model_time_ms: u64,
    /// Wall-clock time of the run; left out of reproducible reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
    pub decision_cases: BTreeMap<String, usize>,
    pub emitted_samples: usize,
    pub na_samples: usize,
    pub relation_histogram: BTreeMap<String, usize>,
    pub skipped: Vec<String>,
    pub failures: Vec<SentenceFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl RunStats {
    pub fn add_record(&mut self, record: &AnnotationRecord) {
        self.records += 1;
        self.calls_multi += record.calls_multi as u64;
        self.calls_binary += record.calls_binary as u64;
        self.calls_total += (record.calls_multi + record.calls_binary) as u64;
        self.malformed_responses += record.malformed as u64;
        self.prompt_tokens += record.prompt_tokens;
        self.completion_tokens += record.completion_tokens;
        self.model_time_ms += record.model_time_ms;
        *self
            .decision_cases
            .entry(record.decision.case.as_str().to_string())
            .or_default() += 1;
    }

    pub fn add_samples(&mut self, samples: &[LabeledSample], na_label: &str) {
        for s in samples {
            self.emitted_samples += 1;
            if s.relation == na_label {
                self.na_samples += 1;
            }
            *self.relation_histogram.entry(s.relation.clone()).or_default() += 1;
        }
    }

    /// Commutative, associative merge of counters.
    pub fn merge(&mut self, other: &RunStats) {
        if self.mode.is_none() {
            self.mode = other.mode;
        }
        self.sentences += other.sentences;
        self.annotated_sentences += other.annotated_sentences;
        self.records += other.records;
        self.calls_multi += other.calls_multi;
        self.calls_binary += other.calls_binary;
        self.calls_total += other.calls_total;
        self.malformed_responses += other.malformed_responses;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.model_time_ms += other.model_time_ms;
        self.emitted_samples += other.emitted_samples;
        self.na_samples += other.na_samples;
        for (k, v) in &other.decision_cases {
            *self.decision_cases.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.relation_histogram {
            *self.relation_histogram.entry(k.clone()).or_default() += v;
        }
        self.skipped.extend(other.skipped.iter().cloned());
        self.skipped.sort();
        self.failures.extend(other.failures.iter().cloned());
        self.failures.sort_by(|a, b| a.sentence_id.cmp(&b.sentence_id));
    }
}

#[derive(Default)]
struct CallTally {
    multi: u32,
    binary: u32,
    malformed: u32,
    prompt_tokens: u64,
    completion_tokens: u64,
    model_time_ms: u64,
}

/// Everything needed to annotate one entity pair.
pub struct Annotator<'a> {
    pub schema: &'a RelationSchema,
    pub templates: &'a PromptTemplates,
    pub backend: &'a dyn Backend,
    pub params: &'a CompletionParams,
    pub rule: DecisionRule,
    pub demos_per_relation: usize,
}

impl<'a> Annotator<'a> {
    pub fn new(
        schema: &'a RelationSchema,
        templates: &'a PromptTemplates,
        backend: &'a dyn Backend,
        params: &'a CompletionParams,
    ) -> Self {
        Annotator {
            schema,
            templates,
            backend,
            params,
            rule: DecisionRule::default(),
            demos_per_relation: DEFAULT_DEMOS_PER_RELATION,
        }
    }

    fn relation(&self, name: &str) -> Result<&'a RelationDef, PipelineError> {
        self.schema
            .get(name)
            .ok_or_else(|| PipelineError::UnknownRelation(name.to_string()))
    }

    fn call(&self, prompt: &PromptBundle, tally: &mut CallTally) -> Result<ModelResponse, PipelineError> {
        let resp = self.backend.complete(prompt, self.params)?;
        resp.validate()?;
        tally.prompt_tokens += resp.usage.prompt_tokens;
        tally.completion_tokens += resp.usage.completion_tokens;
        tally.model_time_ms += resp.latency_ms;
        Ok(resp)
    }

    fn ask_multi(
        &self,
        relations: &[&RelationDef],
        group_index: Option<usize>,
        query: Query<'_>,
        tally: &mut CallTally,
    ) -> Result<GroupCandidate, PipelineError> {
        let prompt = build_multi_prompt(
            self.templates,
            relations,
            group_index,
            &self.schema.na_label,
            query,
            self.demos_per_relation,
        )?;
        let resp = self.call(&prompt, tally)?;
        tally.multi += 1;
        let names: Vec<String> = relations.iter().map(|r| r.name.clone()).collect();
        let verdict = parse_multi_response(&resp.text, &names, &self.schema.na_label);
        if verdict.malformed {
            tally.malformed += 1;
        }
        Ok(GroupCandidate {
            group_index,
            verdict,
            confidence: decision::confidence(&resp).ok(),
        })
    }

    fn verify(
        &self,
        relation: &RelationDef,
        group_index: Option<usize>,
        query: Query<'_>,
        tally: &mut CallTally,
    ) -> Result<(VerifiedCandidate, BinaryVerdict), PipelineError> {
        let prompt = build_binary_prompt(self.templates, relation, query)?;
        let resp = self.call(&prompt, tally)?;
        tally.binary += 1;
        let verdict = parse_binary_response(&resp.text, &relation.name);
        if verdict.malformed {
            tally.malformed += 1;
        }
        let candidate = VerifiedCandidate {
            relation: relation.name.clone(),
            affirmed: verdict.affirmed,
            confidence: decision::confidence(&resp)?,
            group_index,
        };
        Ok((candidate, verdict))
    }

    fn record(
        &self,
        query: Query<'_>,
        pair_index: usize,
        mode: Mode,
        group_candidates: Vec<GroupCandidate>,
        checked: Vec<(VerifiedCandidate, BinaryVerdict)>,
        decision: Decision,
        tally: CallTally,
    ) -> AnnotationRecord {
        let (verified, binary_verdicts) = checked.into_iter().unzip();
        AnnotationRecord {
            sentence_id: query.sentence.id.clone(),
            pair_index,
            head: query.head.to_string(),
            tail: query.tail.to_string(),
            mode,
            group_candidates,
            verified,
            binary_verdicts,
            decision,
            calls_multi: tally.multi,
            calls_binary: tally.binary,
            malformed: tally.malformed,
            prompt_tokens: tally.prompt_tokens,
            completion_tokens: tally.completion_tokens,
            model_time_ms: tally.model_time_ms,
        }
    }

    /// One multi-class call per group, one binary call per distinct proposal.
    pub fn annotate_mbre(
        &self,
        query: Query<'_>,
        pair_index: usize,
        groups: &RelationGroups,
    ) -> Result<AnnotationRecord, PipelineError> {
        if groups.groups.is_empty() {
            return Err(PipelineError::MissingGroups);
        }
        let mut tally = CallTally::default();
        let mut group_candidates = Vec::with_capacity(groups.k);
        let mut proposals: Vec<(String, usize)> = Vec::new();
        for (gi, names) in groups.groups.iter().enumerate() {
            let relations = names
                .iter()
                .map(|n| self.relation(n))
                .collect::<Result<Vec<_>, _>>()?;
            let candidate = self.ask_multi(&relations, Some(gi), query, &mut tally)?;
            if let Some(label) = &candidate.verdict.label {
                if !proposals.iter().any(|(r, _)| r == label) {
                    proposals.push((label.clone(), gi));
                }
            }
            group_candidates.push(candidate);
        }
        let mut checked = Vec::with_capacity(proposals.len());
        for (name, gi) in &proposals {
            checked.push(self.verify(self.relation(name)?, Some(*gi), query, &mut tally)?);
        }
        let verified: Vec<VerifiedCandidate> = checked.iter().map(|(c, _)| c.clone()).collect();
        let decision = decision::decide_with(&verified, self.rule, &self.schema.na_label)?;
        Ok(self.record(query, pair_index, Mode::Mbre, group_candidates, checked, decision, tally))
    }

    /// A single multi-class call over every non-NA relation.
    pub fn annotate_multi_only(&self, query: Query<'_>, pair_index: usize) -> Result<AnnotationRecord, PipelineError> {
        let mut tally = CallTally::default();
        let relations: Vec<&RelationDef> = self.schema.non_na().collect();
        let candidate = self.ask_multi(&relations, None, query, &mut tally)?;
        let decision = match &candidate.verdict.label {
            Some(label) => Decision {
                case: DecisionCase::SingleYes,
                labels: vec![label.clone()],
                theta: self.rule.theta,
                retained_confidences: vec![candidate.confidence],
                fallback: false,
            },
            None => Decision {
                case: DecisionCase::WithoutYes,
                labels: vec![self.schema.na_label.clone()],
                theta: self.rule.theta,
                retained_confidences: vec![None],
                fallback: false,
            },
        };
        Ok(self.record(query, pair_index, Mode::Multi, vec![candidate], Vec::new(), decision, tally))
    }

    /// One binary call per non-NA relation, in schema order.
    pub fn annotate_binary_only(&self, query: Query<'_>, pair_index: usize) -> Result<AnnotationRecord, PipelineError> {
        let mut tally = CallTally::default();
        let mut checked = Vec::new();
        for rel in self.schema.non_na() {
            checked.push(self.verify(rel, None, query, &mut tally)?);
        }
        let verified: Vec<VerifiedCandidate> = checked.iter().map(|(c, _)| c.clone()).collect();
        let decision = decision::decide_with(&verified, self.rule, &self.schema.na_label)?;
        Ok(self.record(query, pair_index, Mode::Binary, Vec::new(), checked, decision, tally))
    }

    pub fn annotate(
        &self,
        mode: Mode,
        query: Query<'_>,
        pair_index: usize,
        groups: Option<&RelationGroups>,
    ) -> Result<AnnotationRecord, PipelineError> {
        match mode {
            Mode::Mbre => self.annotate_mbre(query, pair_index, groups.ok_or(PipelineError::MissingGroups)?),
            Mode::Multi => self.annotate_multi_only(query, pair_index),
            Mode::Binary => self.annotate_binary_only(query, pair_index),
        }
    }
}

/// One sample per retained label.
pub fn samples_for(
    record: &AnnotationRecord,
    sentence: &UnlabeledSentence,
    run_id: &str,
    model: &str,
) -> Vec<LabeledSample> {
    record
        .decision
        .labels
        .iter()
        .map(|relation| LabeledSample {
            sentence_id: sentence.id.clone(),
            sentence: sentence.text.clone(),
            head: record.head.clone(),
            tail: record.tail.clone(),
            relation: relation.clone(),
            provenance: Provenance {
                run_id: run_id.to_string(),
                mode: record.mode,
                theta: record.decision.theta,
                model: model.to_string(),
                case: record.decision.case,
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub mode: Mode,
    pub rule: DecisionRule,
    pub params: CompletionParams,
    pub seed: u64,
    pub workers: usize,
    pub pairs_per_sentence: usize,
    pub demos_per_relation: usize,
    pub run_id: String,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            mode: Mode::Mbre,
            rule: DecisionRule::default(),
            params: CompletionParams::default(),
            seed: 0,
            workers: 1,
            pairs_per_sentence: 1,
            demos_per_relation: DEFAULT_DEMOS_PER_RELATION,
            run_id: "run".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub samples: Vec<LabeledSample>,
    pub records: Vec<AnnotationRecord>,
    pub stats: RunStats,
}

enum Outcome {
    Skipped,
    Done(Vec<AnnotationRecord>),
    Failed(String),
}

/// Annotates a corpus with a bounded worker pool. Output order follows the
/// corpus regardless of completion order; a failing sentence is recorded in
/// the stats and does not stop the run.
pub fn run_corpus(
    corpus: &[UnlabeledSentence],
    schema: &RelationSchema,
    groups: Option<&RelationGroups>,
    templates: &PromptTemplates,
    backend: &dyn Backend,
    settings: &RunSettings,
) -> Result<RunOutput, PipelineError> {
    settings.rule.validate()?;
    settings.params.validate()?;
    if settings.pairs_per_sentence == 0 {
        return Err(PipelineError::Config("pairs_per_sentence must be >= 1".into()));
    }
    let k = match (settings.mode, groups) {
        (Mode::Mbre, None) => return Err(PipelineError::MissingGroups),
        (Mode::Mbre, Some(g)) => {
            g.check_against(schema)?;
            g.k
        }
        _ => 0,
    };
    let relations = schema.non_na().count();

    let started = Instant::now();
    let mut annotator = Annotator::new(schema, templates, backend, &settings.params);
    annotator.rule = settings.rule;
    annotator.demos_per_relation = settings.demos_per_relation;

    let process = |sentence: &UnlabeledSentence| -> Outcome {
        let mut rng = sentence_rng(settings.seed, &sentence.id);
        let mut records = Vec::with_capacity(settings.pairs_per_sentence);
        for pair_index in 0..settings.pairs_per_sentence {
            let Some((head, tail)) = sample_entity_pair(sentence, &mut rng) else {
                return Outcome::Skipped;
            };
            let query = Query::new(sentence, &head, &tail);
            match annotator.annotate(settings.mode, query, pair_index, groups) {
                Ok(r) => records.push(r),
                Err(e) => return Outcome::Failed(e.to_string()),
            }
        }
        Outcome::Done(records)
    };

    let slots: Vec<Mutex<Option<Outcome>>> = corpus.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = settings.workers.clamp(1, corpus.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= corpus.len() {
                    break;
                }
                let outcome = process(&corpus[i]);
                *slots[i].lock().expect("slot mutex poisoned") = Some(outcome);
            });
        }
    });

    let mut out = RunOutput {
        samples: Vec::new(),
        records: Vec::new(),
        stats: RunStats {
            mode: Some(settings.mode),
            sentences: corpus.len(),
            ..Default::default()
        },
    };
    for (sentence, slot) in corpus.iter().zip(slots) {
        match slot.into_inner().expect("slot mutex poisoned").expect("every sentence processed") {
            Outcome::Skipped => out.stats.skipped.push(sentence.id.clone()),
            Outcome::Failed(error) => {
                log::warn!("sentence {} failed: {error}", sentence.id);
                out.stats.failures.push(SentenceFailure {
                    sentence_id: sentence.id.clone(),
                    error,
                });
            }
            Outcome::Done(records) => {
                out.stats.annotated_sentences += 1;
                for record in records {
                    if let Err(msg) = record.check_call_accounting(k, relations) {
                        panic!("{msg}");
                    }
                    out.stats.add_record(&record);
                    let samples = samples_for(&record, sentence, &settings.run_id, &settings.params.model);
                    out.stats.add_samples(&samples, &schema.na_label);
                    out.samples.extend(samples);
                    out.records.push(record);
                }
            }
        }
    }
    out.stats.wall_time_ms = Some(started.elapsed().as_millis() as u64);
    Ok(out)
}

/// Re-runs the label decision of recorded mbre/binary traces under a new
/// rule, without any model calls. Multi-mode records are left as recorded.
pub fn redecide(record: &AnnotationRecord, rule: DecisionRule, na_label: &str) -> Result<Decision, DecisionError> {
    match record.mode {
        Mode::Multi => Ok(Decision {
            theta: rule.theta,
            ..record.decision.clone()
        }),
        Mode::Mbre | Mode::Binary => decision::decide_with(&record.verified, rule, na_label),
    }
}
