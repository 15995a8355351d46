#![allow(dead_code)]

use std::path::PathBuf;

use relmine::grouping::{build_groups, default_group_count, GroupingMethod, RelationGroups};
use relmine::llm::{MockBackend, MockKey, MockReply};
use relmine::prompt::PromptKind;
use relmine::schema::{RelationSchema, UnlabeledSentence};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn tacred() -> RelationSchema {
    RelationSchema::bundled("tacred").unwrap()
}

pub fn semeval() -> RelationSchema {
    RelationSchema::bundled("semeval").unwrap()
}

pub fn auto_groups(schema: &RelationSchema) -> RelationGroups {
    build_groups(schema, default_group_count(schema.total_labels()), GroupingMethod::Algorithmic, 0).unwrap()
}

pub fn sentence(id: &str) -> UnlabeledSentence {
    UnlabeledSentence {
        id: id.into(),
        text: "Alice Smith joined Acme Corp in 2004.".into(),
        entities: vec!["Alice Smith".into(), "Acme Corp".into()],
    }
}

pub fn reply(text: &str, probs: &[f64]) -> MockReply {
    MockReply {
        text: text.into(),
        token_top_probs: probs.to_vec(),
    }
}

pub fn multi(id: &str, group: usize, text: &str) -> (MockKey, MockReply) {
    (MockKey::new(id, PromptKind::Multi, format!("g{group}")), reply(text, &[0.9]))
}

pub fn multi_all(id: &str, text: &str) -> (MockKey, MockReply) {
    (MockKey::new(id, PromptKind::Multi, "all"), reply(text, &[0.9]))
}

pub fn binary(id: &str, relation: &str, yes: bool, conf: f64) -> (MockKey, MockReply) {
    let text = if yes {
        format!("Yes. (Alice Smith, {relation}, Acme Corp)")
    } else {
        "No.".to_string()
    };
    (MockKey::new(id, PromptKind::Binary, relation), reply(&text, &[conf, conf]))
}

pub fn mock(entries: Vec<(MockKey, MockReply)>) -> MockBackend {
    MockBackend::new(entries).unwrap()
}

/// Every group proposes its first relation and every binary check says Yes:
/// the most calls an mbre record can make.
pub fn worst_case_mbre_script(id: &str, groups: &RelationGroups) -> Vec<(MockKey, MockReply)> {
    let mut script = Vec::new();
    for (g, names) in groups.groups.iter().enumerate() {
        script.push(multi(id, g, &names[0]));
        script.push(binary(id, &names[0], true, 0.999));
    }
    script
}

pub fn all_binary_script(id: &str, schema: &RelationSchema, yes: &[(&str, f64)]) -> Vec<(MockKey, MockReply)> {
    schema
        .non_na()
        .map(|r| match yes.iter().find(|(n, _)| *n == r.name) {
            Some((_, c)) => binary(id, &r.name, true, *c),
            None => binary(id, &r.name, false, 0.9),
        })
        .collect()
}
