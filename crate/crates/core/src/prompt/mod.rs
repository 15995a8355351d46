//! Multi-class and binary prompt assembly, and parsing of model replies.
//!
//! Both prompt kinds share the same three parts: a task description, a block
//! of demonstrations, and a single target query (sentence plus head/tail
//! pair) followed by the expected output format. Wording lives in
//! `templates/*.txt`; this module only fills slots.

mod parse;
mod template;

pub use parse::{parse_binary_response, parse_multi_response, BinaryVerdict, MultiVerdict};
pub use template::{PromptTemplates, Template};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Demonstration, RelationDef, UnlabeledSentence};

/// Demonstrations embedded in every binary prompt.
pub const BINARY_POSITIVES: usize = 3;
pub const BINARY_NEGATIVES: usize = 4;

pub const DEFAULT_DEMOS_PER_RELATION: usize = 1;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("multi-class prompt needs at least one relation")]
    EmptyGroup,
    #[error("head and tail are the same entity {0:?}")]
    SameEntity(String),
    #[error("entity {entity:?} does not occur in sentence {sentence_id:?}")]
    EntityNotInSentence { sentence_id: String, entity: String },
    #[error("relation {relation:?} has {have} {kind} demonstrations, {needed} needed")]
    InsufficientDemos {
        relation: String,
        kind: &'static str,
        needed: usize,
        have: usize,
    },
    #[error("template {template}: {message}")]
    Template { template: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Multi,
    Binary,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Multi => "multi",
            PromptKind::Binary => "binary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub kind: PromptKind,
    pub text: String,
    /// Set for group prompts; `None` for a multi-class prompt over the whole schema.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    pub sentence_id: String,
    pub head: String,
    pub tail: String,
}

impl PromptBundle {
    /// `"g<index>"` for a group prompt, `"all"` for a whole-schema prompt,
    /// the relation name for a binary prompt.
    pub fn target(&self) -> String {
        match (self.kind, self.group_index, &self.relation) {
            (PromptKind::Binary, _, Some(r)) => r.clone(),
            (PromptKind::Multi, Some(g), _) => format!("g{g}"),
            _ => "all".to_string(),
        }
    }
}

/// The sentence and entity pair a prompt asks about.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub sentence: &'a UnlabeledSentence,
    pub head: &'a str,
    pub tail: &'a str,
}

impl<'a> Query<'a> {
    pub fn new(sentence: &'a UnlabeledSentence, head: &'a str, tail: &'a str) -> Self {
        Query { sentence, head, tail }
    }

    fn check(&self) -> Result<(), PromptError> {
        if self.head == self.tail {
            return Err(PromptError::SameEntity(self.head.to_string()));
        }
        for entity in [self.head, self.tail] {
            if entity.is_empty() || !self.sentence.text.contains(entity) {
                return Err(PromptError::EntityNotInSentence {
                    sentence_id: self.sentence.id.clone(),
                    entity: entity.to_string(),
                });
            }
        }
        Ok(())
    }
}

fn render_demo(t: &Template, demo: &Demonstration, last_slot: (&str, &str)) -> Result<String, PromptError> {
    t.render(&[
        ("sentence", &demo.sentence),
        ("head", &demo.head),
        ("tail", &demo.tail),
        last_slot,
    ])
}

/// Multi-class prompt over `group`: one definition per relation, then the
/// first `demos_per_relation` positive demonstrations of each relation in
/// group order, then the target query.
pub fn build_multi_prompt(
    templates: &PromptTemplates,
    group: &[&RelationDef],
    group_index: Option<usize>,
    na_label: &str,
    query: Query<'_>,
    demos_per_relation: usize,
) -> Result<PromptBundle, PromptError> {
    if group.is_empty() {
        return Err(PromptError::EmptyGroup);
    }
    query.check()?;

    let mut definitions = Vec::with_capacity(group.len());
    let mut demo_lines = Vec::new();
    for rel in group {
        definitions.push(
            templates
                .definition
                .render(&[("name", &rel.name), ("explanation", &rel.explanation)])?,
        );
        if rel.positive_demos.len() < demos_per_relation {
            return Err(PromptError::InsufficientDemos {
                relation: rel.name.clone(),
                kind: "positive",
                needed: demos_per_relation,
                have: rel.positive_demos.len(),
            });
        }
        for demo in &rel.positive_demos[..demos_per_relation] {
            demo_lines.push(render_demo(&templates.multi_demo, demo, ("relation", &demo.relation))?);
        }
    }
    let definitions = definitions.join("\n");
    let demonstrations = if demo_lines.is_empty() {
        String::new()
    } else {
        templates.demo_section.render(&[("lines", &demo_lines.join("\n"))])?
    };
    let text = templates.multi.render(&[
        ("definitions", &definitions),
        ("demonstrations", &demonstrations),
        ("na_label", na_label),
        ("sentence", &query.sentence.text),
        ("head", query.head),
        ("tail", query.tail),
    ])?;
    Ok(PromptBundle {
        kind: PromptKind::Multi,
        text,
        group_index,
        relation: None,
        sentence_id: query.sentence.id.clone(),
        head: query.head.to_string(),
        tail: query.tail.to_string(),
    })
}

/// Binary verification prompt: the first three positive demonstrations
/// (answered in the Yes form) followed by the first four negatives
/// (answered "No."), in schema file order.
pub fn build_binary_prompt(
    templates: &PromptTemplates,
    relation: &RelationDef,
    query: Query<'_>,
) -> Result<PromptBundle, PromptError> {
    for (kind, have, needed) in [
        ("positive", relation.positive_demos.len(), BINARY_POSITIVES),
        ("negative", relation.negative_demos.len(), BINARY_NEGATIVES),
    ] {
        if have < needed {
            return Err(PromptError::InsufficientDemos {
                relation: relation.name.clone(),
                kind,
                needed,
                have,
            });
        }
    }
    query.check()?;

    let mut lines = Vec::with_capacity(BINARY_POSITIVES + BINARY_NEGATIVES);
    for demo in &relation.positive_demos[..BINARY_POSITIVES] {
        let answer = yes_answer(&demo.head, &relation.name, &demo.tail);
        lines.push(render_demo(&templates.binary_demo, demo, ("answer", &answer))?);
    }
    for demo in &relation.negative_demos[..BINARY_NEGATIVES] {
        lines.push(render_demo(&templates.binary_demo, demo, ("answer", "No."))?);
    }
    let text = templates.binary.render(&[
        ("relation", &relation.name),
        ("explanation", &relation.explanation),
        ("demonstrations", &lines.join("\n")),
        ("sentence", &query.sentence.text),
        ("head", query.head),
        ("tail", query.tail),
    ])?;
    Ok(PromptBundle {
        kind: PromptKind::Binary,
        text,
        group_index: None,
        relation: Some(relation.name.clone()),
        sentence_id: query.sentence.id.clone(),
        head: query.head.to_string(),
        tail: query.tail.to_string(),
    })
}

/// `Yes. (head, relation, tail)`
pub fn yes_answer(head: &str, relation: &str, tail: &str) -> String {
    format!("Yes. ({head}, {relation}, {tail})")
}
