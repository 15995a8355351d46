//! Lenient parsing of model replies.
//!
//! Sampled decoding wraps labels in prose, quotes and markdown, so matching
//! works on a normalized copy of the reply. All case folding is ASCII-only so
//! byte offsets stay valid against the original text.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiVerdict {
    /// `None` means no group member was chosen.
    pub label: Option<String>,
    pub raw: String,
    /// The reply named neither exactly one group member nor the NA label.
    #[serde(default)]
    pub malformed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryVerdict {
    pub affirmed: bool,
    /// `(head, relation, tail)`; the relation is always the prompted one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triple: Option<(String, String, String)>,
    pub raw: String,
    #[serde(default)]
    pub malformed: bool,
}

/// Drops `<think>...</think>` blocks emitted by reasoning models.
fn strip_reasoning(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("<think>") {
        out.push_str(&rest[..start]);
        match rest[start..].find("</think>") {
            Some(end) => rest = &rest[start + end + "</think>".len()..],
            None => {
                rest = "";
                break;
            }
        }
    }
    out.push_str(rest);
    out
}

fn is_edge_punct(c: char) -> bool {
    c.is_whitespace()
        || matches!(
            c,
            '"' | '\'' | '`' | '.' | ',' | ';' | ':' | '!' | '?' | '*' | '[' | ']' | '{' | '}' | '#'
                | '\u{201c}' | '\u{201d}' | '\u{2018}' | '\u{2019}'
        )
}

fn normalize(text: &str) -> String {
    let collapsed: Vec<&str> = text.split_whitespace().collect();
    collapsed.join(" ").to_ascii_lowercase()
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Whether `needle` occurs in `hay` with no word character on either side.
fn contains_bounded(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let bytes = hay.as_bytes();
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = start == 0 || !is_word_byte(bytes[start - 1]);
        let after_ok = end == bytes.len() || !is_word_byte(bytes[end]);
        if before_ok && after_ok {
            return true;
        }
        from = start + 1;
        while !hay.is_char_boundary(from) {
            from += 1;
        }
    }
    false
}

/// Maps a multi-class reply onto a group member.
///
/// An exact match (after case folding and trimming surrounding punctuation)
/// wins. Otherwise the reply is scanned for word-bounded occurrences of every
/// group member name and of the NA label: exactly one distinct hit decides,
/// anything else yields no label and sets `malformed`.
pub fn parse_multi_response(text: &str, group: &[String], na_label: &str) -> MultiVerdict {
    let cleaned = normalize(&strip_reasoning(text));
    let trimmed = cleaned.trim_matches(is_edge_punct);
    let na = na_label.to_ascii_lowercase();
    let verdict = |label: Option<&String>, malformed| MultiVerdict {
        label: label.cloned(),
        raw: text.to_string(),
        malformed,
    };

    if let Some(hit) = group.iter().find(|g| g.to_ascii_lowercase() == trimmed) {
        return verdict(Some(hit), false);
    }
    if trimmed == na {
        return verdict(None, false);
    }

    let mut hits: Vec<&String> = group
        .iter()
        .filter(|g| contains_bounded(&cleaned, &g.to_ascii_lowercase()))
        .collect();
    hits.dedup();
    let na_hit = contains_bounded(&cleaned, &na);
    match (hits.as_slice(), na_hit) {
        ([one], false) => verdict(Some(one), false),
        ([], true) => verdict(None, false),
        _ => verdict(None, true),
    }
}

fn find_ci(hay: &str, needle: &str) -> Option<usize> {
    hay.find(needle)
        .or_else(|| hay.to_ascii_lowercase().find(&needle.to_ascii_lowercase()))
}

fn extract_triple(body: &str, relation: &str) -> Option<(String, String, String)> {
    let open = body.find('(')?;
    let close = body.rfind(')')?;
    if close <= open {
        return None;
    }
    let inner = &body[open + 1..close];
    let clean = |s: &str| s.trim().trim_matches(',').trim().to_string();

    let delimited = format!(", {relation}, ");
    let (head, tail) = if let Some(p) = find_ci(inner, &delimited) {
        (&inner[..p], &inner[p + delimited.len()..])
    } else if let Some(p) = find_ci(inner, relation) {
        (&inner[..p], &inner[p + relation.len()..])
    } else {
        let parts: Vec<&str> = inner.split(',').collect();
        if parts.len() != 3 {
            return None;
        }
        (parts[0], parts[2])
    };
    let (head, tail) = (clean(head), clean(tail));
    if head.is_empty() || tail.is_empty() {
        return None;
    }
    Some((head, relation.to_string(), tail))
}

fn leading_word(text: &str, word: &str) -> bool {
    let lower = text.to_ascii_lowercase();
    lower.starts_with(word)
        && !lower[word.len()..]
            .chars()
            .next()
            .is_some_and(char::is_alphanumeric)
}

/// A reply starting with "Yes" affirms; one starting with "No" denies;
/// anything else denies and is flagged malformed.
pub fn parse_binary_response(text: &str, relation: &str) -> BinaryVerdict {
    let cleaned = strip_reasoning(text);
    let body = cleaned.trim_start_matches(is_edge_punct);
    if leading_word(body, "yes") {
        BinaryVerdict {
            affirmed: true,
            triple: extract_triple(&body[3..], relation),
            raw: text.to_string(),
            malformed: false,
        }
    } else {
        BinaryVerdict {
            affirmed: false,
            triple: None,
            raw: text.to_string(),
            malformed: !leading_word(body, "no"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn group() -> Vec<String> {
        ["org:founded", "org:founded_by", "per:title", "per:titles_held"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn exact_label() {
        let v = parse_multi_response("org:founded", &group(), "no_relation");
        assert_eq!(v.label.as_deref(), Some("org:founded"));
        assert!(!v.malformed);
        let v = parse_multi_response("  \"ORG:FOUNDED_BY\".\n", &group(), "no_relation");
        assert_eq!(v.label.as_deref(), Some("org:founded_by"));
    }

    #[test]
    fn na_escape() {
        let v = parse_multi_response("no_relation", &group(), "no_relation");
        assert_eq!(v.label, None);
        assert!(!v.malformed);
        let v = parse_multi_response("The answer is no_relation.", &group(), "no_relation");
        assert_eq!(v.label, None);
        assert!(!v.malformed);
    }

    #[test]
    fn label_inside_prose() {
        let v = parse_multi_response("I think the relation is per:title.", &group(), "no_relation");
        assert_eq!(v.label.as_deref(), Some("per:title"));
        // per:title is a prefix of per:titles_held but the word boundary rules it out.
        let v = parse_multi_response("It is per:titles_held here", &group(), "no_relation");
        assert_eq!(v.label.as_deref(), Some("per:titles_held"));
    }

    #[test]
    fn ambiguous_and_garbage() {
        let v = parse_multi_response("either per:title or org:founded", &group(), "no_relation");
        assert_eq!(v.label, None);
        assert!(v.malformed);
        let v = parse_multi_response("banana", &group(), "no_relation");
        assert_eq!(v.label, None);
        assert!(v.malformed);
    }

    #[test]
    fn reasoning_block_ignored() {
        let v = parse_multi_response("<think>maybe org:founded?</think>\nper:title", &group(), "no_relation");
        assert_eq!(v.label.as_deref(), Some("per:title"));
    }

    #[test]
    fn semeval_directional_names() {
        let g = vec!["Cause-Effect(e1,e2)".to_string(), "Cause-Effect(e2,e1)".to_string()];
        let v = parse_multi_response("Cause-Effect(e2,e1)", &g, "Other");
        assert_eq!(v.label.as_deref(), Some("Cause-Effect(e2,e1)"));
    }

    #[test]
    fn binary_yes_with_triple() {
        let v = parse_binary_response("Yes. (Paris, org:city_of_headquarters, IBM)", "org:city_of_headquarters");
        assert!(v.affirmed);
        assert!(!v.malformed);
        assert_eq!(
            v.triple,
            Some(("Paris".into(), "org:city_of_headquarters".into(), "IBM".into()))
        );
    }

    #[test]
    fn binary_yes_without_triple() {
        let v = parse_binary_response("yes", "per:age");
        assert!(v.affirmed);
        assert_eq!(v.triple, None);
    }

    #[test]
    fn binary_no_and_malformed() {
        let v = parse_binary_response("No.", "per:age");
        assert!(!v.affirmed && !v.malformed);
        let v = parse_binary_response("Maybe", "per:age");
        assert!(!v.affirmed && v.malformed);
        let v = parse_binary_response("Yesterday it rained", "per:age");
        assert!(!v.affirmed && v.malformed);
        let v = parse_binary_response("Nobody knows", "per:age");
        assert!(v.malformed);
    }

    #[test]
    fn binary_semeval_triple_with_commas() {
        let v = parse_binary_response("Yes. (wire, Cause-Effect(e1,e2), fire)", "Cause-Effect(e1,e2)");
        assert_eq!(v.triple, Some(("wire".into(), "Cause-Effect(e1,e2)".into(), "fire".into())));
    }

    proptest! {
        #[test]
        fn multi_never_leaves_group(text in ".{0,80}") {
            let g = group();
            let v = parse_multi_response(&text, &g, "no_relation");
            if let Some(label) = v.label {
                prop_assert!(g.contains(&label));
            }
        }

        #[test]
        fn yes_echo_round_trips(
            head in "[A-Za-z][A-Za-z0-9 .'-]{0,20}[A-Za-z0-9]",
            tail in "[A-Za-z0-9][A-Za-z0-9 .,'-]{0,20}[A-Za-z0-9]",
            rel in prop::sample::select(vec!["org:founded", "per:title", "Cause-Effect(e1,e2)"]),
        ) {
            let reply = crate::prompt::yes_answer(&head, rel, &tail);
            let v = parse_binary_response(&reply, rel);
            prop_assert!(v.affirmed);
            prop_assert_eq!(v.triple, Some((head.clone(), rel.to_string(), tail.clone())));
        }
    }
}
