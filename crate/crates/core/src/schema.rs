//! Relation schemas and unlabeled corpora.
//!
//! A schema is a single JSON document:
//!
//! ```json
//! {
//!   "dataset": "TACRED",
//!   "na_label": "no_relation",
//!   "relations": [
//!     {
//!       "name": "org:founded",
//!       "explanation": "The founding time of an organization.",
//!       "positive_demos": [{"sentence": "...", "head": "...", "tail": "...", "relation": "org:founded"}],
//!       "negative_demos": [{"sentence": "...", "head": "...", "tail": "...", "relation": "per:title"}]
//!     }
//!   ]
//! }
//! ```
//!
//! A corpus is JSONL with one `{"id", "text", "entities"}` record per line.
//! `entities` may be omitted. Blank lines are ignored.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const TACRED_JSON: &str = include_str!("../data/tacred.json");
const SEMEVAL_JSON: &str = include_str!("../data/semeval.json");

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed schema document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("relation with empty name at position {0}")]
    EmptyName(usize),
    #[error("duplicate relation name {0:?}")]
    DuplicateRelation(String),
    #[error("relation {0:?} has no explanation")]
    MissingExplanation(String),
    #[error("na_label {0:?} is not one of the schema relations")]
    NaLabelAbsent(String),
    #[error("relation {relation:?}: {kind} demonstration labeled {found:?}")]
    DemoRelationMismatch {
        relation: String,
        kind: &'static str,
        found: String,
    },
    #[error("relation {relation:?}: demonstration entity {entity:?} not found in {sentence:?}")]
    DemoEntityMissing {
        relation: String,
        entity: String,
        sentence: String,
    },
    #[error("unknown bundled schema {0:?} (expected \"tacred\" or \"semeval\")")]
    UnknownBundled(String),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: duplicate sentence id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: record {id:?} lists entity {entity:?} which does not occur in its text")]
    EntityNotFound {
        line: usize,
        id: String,
        entity: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub sentence: String,
    pub head: String,
    pub tail: String,
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationDef {
    pub name: String,
    #[serde(default)]
    pub explanation: String,
    #[serde(default)]
    pub positive_demos: Vec<Demonstration>,
    #[serde(default)]
    pub negative_demos: Vec<Demonstration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSchema {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub na_label: String,
    pub relations: Vec<RelationDef>,
}

impl RelationSchema {
    /// Parses and validates a schema document.
    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let schema: RelationSchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    /// One of the schemas shipped with the crate: `"tacred"` or `"semeval"`.
    pub fn bundled(name: &str) -> Result<Self, SchemaError> {
        match name.to_ascii_lowercase().as_str() {
            "tacred" => Self::from_json(TACRED_JSON),
            "semeval" => Self::from_json(SEMEVAL_JSON),
            _ => Err(SchemaError::UnknownBundled(name.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = HashSet::new();
        for (i, rel) in self.relations.iter().enumerate() {
            if rel.name.trim().is_empty() {
                return Err(SchemaError::EmptyName(i));
            }
            if !seen.insert(rel.name.as_str()) {
                return Err(SchemaError::DuplicateRelation(rel.name.clone()));
            }
            let is_na = rel.name == self.na_label;
            if !is_na && rel.explanation.trim().is_empty() {
                return Err(SchemaError::MissingExplanation(rel.name.clone()));
            }
            for demo in &rel.positive_demos {
                if demo.relation != rel.name {
                    return Err(SchemaError::DemoRelationMismatch {
                        relation: rel.name.clone(),
                        kind: "positive",
                        found: demo.relation.clone(),
                    });
                }
                check_demo_entities(rel, demo)?;
            }
            for demo in &rel.negative_demos {
                if demo.relation == rel.name {
                    return Err(SchemaError::DemoRelationMismatch {
                        relation: rel.name.clone(),
                        kind: "negative",
                        found: demo.relation.clone(),
                    });
                }
                check_demo_entities(rel, demo)?;
            }
        }
        if !seen.contains(self.na_label.as_str()) {
            return Err(SchemaError::NaLabelAbsent(self.na_label.clone()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("schema serializes");
        out.push('\n');
        out
    }

    /// Every label including the NA-like one.
    pub fn total_labels(&self) -> usize {
        self.relations.len()
    }

    pub fn non_na(&self) -> impl Iterator<Item = &RelationDef> {
        self.relations.iter().filter(move |r| r.name != self.na_label)
    }

    pub fn non_na_names(&self) -> Vec<String> {
        self.non_na().map(|r| r.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&RelationDef> {
        self.relations.iter().find(|r| r.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }
}

fn check_demo_entities(rel: &RelationDef, demo: &Demonstration) -> Result<(), SchemaError> {
    for entity in [&demo.head, &demo.tail] {
        if !demo.sentence.contains(entity.as_str()) {
            return Err(SchemaError::DemoEntityMissing {
                relation: rel.name.clone(),
                entity: entity.clone(),
                sentence: demo.sentence.clone(),
            });
        }
    }
    Ok(())
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<RelationSchema, SchemaError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RelationSchema::from_json(&text)
}

pub fn save_schema(schema: &RelationSchema, path: impl AsRef<Path>) -> std::io::Result<()> {
    fs::write(path, schema.to_json_pretty())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabeledSentence {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub entities: Vec<String>,
}

pub fn parse_corpus(text: &str) -> Result<Vec<UnlabeledSentence>, CorpusError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: UnlabeledSentence =
            serde_json::from_str(raw).map_err(|e| CorpusError::MalformedLine {
                line,
                message: e.to_string(),
            })?;
        if !ids.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line,
                id: record.id,
            });
        }
        if let Some(missing) = record.entities.iter().find(|e| !record.text.contains(e.as_str())) {
            return Err(CorpusError::EntityNotFound {
                line,
                id: record.id.clone(),
                entity: missing.clone(),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<UnlabeledSentence>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&text)
}
