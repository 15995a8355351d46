//! Entity-pair sampling and the fallback entity heuristic.

use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use crate::schema::UnlabeledSentence;

static CAPITALIZED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\p{Lu}[\p{L}\p{N}'&-]*(?:\s+\p{Lu}[\p{L}\p{N}'&-]*)*").expect("valid regex")
});
static DIGITS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\p{N}+(?:[.,:/-]\p{N}+)*").expect("valid regex"));

/// Maximal runs of capitalized tokens and digit spans, in text order, deduplicated.
pub fn fallback_entities(text: &str) -> Vec<String> {
    let mut spans: Vec<(usize, &str)> = CAPITALIZED
        .find_iter(text)
        .chain(DIGITS.find_iter(text))
        .map(|m| (m.start(), m.as_str()))
        .collect();
    spans.sort_by_key(|(start, _)| *start);
    let mut out: Vec<String> = Vec::new();
    for (_, span) in spans {
        if !out.iter().any(|e| e == span) {
            out.push(span.to_string());
        }
    }
    out
}

/// The sentence's listed entities, or the fallback heuristic when none are listed.
pub fn candidate_entities(sentence: &UnlabeledSentence) -> Vec<String> {
    if sentence.entities.is_empty() {
        return fallback_entities(&sentence.text);
    }
    let mut out: Vec<String> = Vec::new();
    for e in &sentence.entities {
        if !out.contains(e) {
            out.push(e.clone());
        }
    }
    out
}

/// Uniform ordered pair of distinct entities; `None` when fewer than two exist.
pub fn sample_entity_pair<R: Rng + ?Sized>(sentence: &UnlabeledSentence, rng: &mut R) -> Option<(String, String)> {
    let entities = candidate_entities(sentence);
    let n = entities.len();
    if n < 2 {
        return None;
    }
    let head = rng.random_range(0..n);
    let mut tail = rng.random_range(0..n - 1);
    if tail >= head {
        tail += 1;
    }
    Some((entities[head].clone(), entities[tail].clone()))
}

/// Per-sentence RNG stream derived from the master seed and the sentence id,
/// so sampling does not depend on scheduling.
pub fn sentence_rng(master_seed: u64, sentence_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(sentence_id.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(entities: &[&str]) -> UnlabeledSentence {
        UnlabeledSentence {
            id: "s".into(),
            text: entities.join(" and "),
            entities: entities.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn two_entities_uniform() {
        let s = sentence(&["A", "B"]);
        let mut ab = 0;
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match sample_entity_pair(&s, &mut rng).unwrap() {
                (h, t) if h == "A" && t == "B" => ab += 1,
                (h, t) => assert_eq!((h.as_str(), t.as_str()), ("B", "A")),
            }
        }
        let f = ab as f64 / 1000.0;
        assert!((f - 0.5).abs() <= 0.05, "{f}");
    }

    #[test]
    fn single_entity_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_entity_pair(&sentence(&["A"]), &mut rng), None);
        assert_eq!(sample_entity_pair(&sentence(&["A", "A"]), &mut rng), None);
    }

    #[test]
    fn seeded_determinism() {
        let s = sentence(&["A", "B", "C"]);
        let a = sample_entity_pair(&s, &mut sentence_rng(7, "s1"));
        let b = sample_entity_pair(&s, &mut sentence_rng(7, "s1"));
        assert_eq!(a, b);
        let (h, t) = a.unwrap();
        assert_ne!(h, t);
    }

    #[test]
    fn fallback_spans() {
        let e = fallback_entities("Laura Chen founded Acme Robotics in 1998, hiring 4,500 staff.");
        assert_eq!(e, vec!["Laura Chen", "Acme Robotics", "1998", "4,500"]);
    }

    #[test]
    fn listed_entities_take_precedence() {
        let s = UnlabeledSentence {
            id: "x".into(),
            text: "Paris and Rome".into(),
            entities: vec!["Rome".into(), "Paris".into()],
        };
        assert_eq!(candidate_entities(&s), vec!["Rome", "Paris"]);
    }
}
