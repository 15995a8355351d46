//! Slot templates: literal text with `{{name}}` placeholders.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::PromptError;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(name: &str, src: &str) -> Result<Self, PromptError> {
        let mut segments = Vec::new();
        let mut rest = src;
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                segments.push(Segment::Text(rest[..open].to_string()));
            }
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or_else(|| PromptError::Template {
                template: name.to_string(),
                message: "unterminated slot".into(),
            })?;
            let slot = after[..close].trim();
            if slot.is_empty() || !slot.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(PromptError::Template {
                    template: name.to_string(),
                    message: format!("invalid slot name {slot:?}"),
                });
            }
            segments.push(Segment::Slot(slot.to_string()));
            rest = &after[close + 2..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Text(rest.to_string()));
        }
        Ok(Template {
            name: name.to_string(),
            segments,
        })
    }

    pub fn slots(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.as_str()),
                Segment::Text(_) => None,
            })
            .collect()
    }

    /// Substitutes every slot in a single pass; substituted values are not rescanned.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(slot) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| k == slot)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| PromptError::Template {
                            template: self.name.clone(),
                            message: format!("no value for slot {slot:?}"),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// The six templates that make up the multi-class and binary prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub multi: Template,
    pub definition: Template,
    pub demo_section: Template,
    pub multi_demo: Template,
    pub binary: Template,
    pub binary_demo: Template,
}

const FILES: [&str; 6] = [
    "multi.txt",
    "definition.txt",
    "demo_section.txt",
    "multi_demo.txt",
    "binary.txt",
    "binary_demo.txt",
];

const REQUIRED: [&[&str]; 6] = [
    &["definitions", "demonstrations", "na_label", "sentence", "head", "tail"],
    &["name", "explanation"],
    &["lines"],
    &["sentence", "head", "tail", "relation"],
    &["relation", "explanation", "demonstrations", "sentence", "head", "tail"],
    &["sentence", "head", "tail", "answer"],
];

impl PromptTemplates {
    /// Templates compiled into the crate from `templates/`.
    pub fn builtin() -> Self {
        Self::from_sources([
            include_str!("../../templates/multi.txt"),
            include_str!("../../templates/definition.txt"),
            include_str!("../../templates/demo_section.txt"),
            include_str!("../../templates/multi_demo.txt"),
            include_str!("../../templates/binary.txt"),
            include_str!("../../templates/binary_demo.txt"),
        ])
        .expect("builtin templates are valid")
    }

    /// Loads the same six files from a directory. Every file must be present.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut sources = Vec::with_capacity(FILES.len());
        for file in FILES {
            let path = dir.join(file);
            sources.push(fs::read_to_string(&path).map_err(|e| PromptError::Template {
                template: path.display().to_string(),
                message: e.to_string(),
            })?);
        }
        let arr: [&str; 6] = std::array::from_fn(|i| sources[i].as_str());
        Self::from_sources(arr)
    }

    fn from_sources(src: [&str; 6]) -> Result<Self, PromptError> {
        let mut parsed = Vec::with_capacity(6);
        for ((file, text), required) in FILES.iter().zip(src).zip(REQUIRED) {
            let t = Template::parse(file, text)?;
            let slots = t.slots();
            if let Some(missing) = required.iter().find(|s| !slots.contains(*s)) {
                return Err(PromptError::Template {
                    template: file.to_string(),
                    message: format!("missing required slot {missing:?}"),
                });
            }
            parsed.push(t);
        }
        let mut it = parsed.into_iter();
        let mut next = || it.next().expect("six templates");
        Ok(PromptTemplates {
            multi: next(),
            definition: next(),
            demo_section: next(),
            multi_demo: next(),
            binary: next(),
            binary_demo: next(),
        })
    }
}
