//! Relation grouping: TF-IDF over relation explanations, cosine similarity,
//! and a greedy balanced partition that keeps similar relations apart.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::RelationSchema;

#[derive(Debug, Error)]
pub enum GroupingError {
    #[error("schema has no non-NA relations to group")]
    NoRelations,
    #[error("group count {k} out of range 1..={n}")]
    GroupCount { k: usize, n: usize },
    #[error("similarity matrix is {n}x{n} but {names} names were given")]
    NameCount { n: usize, names: usize },
    #[error("invalid similarity matrix: {0}")]
    InvalidMatrix(String),
    #[error("groups file does not match schema: {0}")]
    SchemaMismatch(String),
    #[error("groups file: {0}")]
    Io(#[from] std::io::Error),
    #[error("groups file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Lowercases and splits on non-alphanumeric boundaries.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Dense TF-IDF rows, one per relation, L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfMatrix {
    pub names: Vec<String>,
    pub vocabulary: Vec<String>,
    pub idf: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    /// Rows whose text had no tokens; these stay all-zero.
    pub zero_rows: Vec<bool>,
}

impl TfidfMatrix {
    /// `tf = raw count`, `idf = ln((1 + n) / (1 + df)) + 1`, then L2 normalization.
    pub fn from_texts(names: Vec<String>, texts: &[&str]) -> Self {
        let docs: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in &docs {
            let mut uniq: Vec<&str> = doc.iter().map(String::as_str).collect();
            uniq.sort_unstable();
            uniq.dedup();
            for term in uniq {
                *df.entry(term).or_default() += 1;
            }
        }
        let n = docs.len() as f64;
        let vocabulary: Vec<String> = df.keys().map(|t| t.to_string()).collect();
        let idf: Vec<f64> = df
            .values()
            .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        let index: BTreeMap<&str, usize> = vocabulary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();

        let mut rows = Vec::with_capacity(docs.len());
        let mut zero_rows = Vec::with_capacity(docs.len());
        for doc in &docs {
            let mut row = vec![0.0; vocabulary.len()];
            for term in doc {
                row[index[term.as_str()]] += 1.0;
            }
            for (w, idf) in row.iter_mut().zip(&idf) {
                *w *= idf;
            }
            let norm = row.iter().map(|w| w * w).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|w| *w /= norm);
            }
            zero_rows.push(norm == 0.0);
            rows.push(row);
        }
        TfidfMatrix {
            names,
            vocabulary,
            idf,
            rows,
            zero_rows,
        }
    }
}

/// One row per non-NA relation, in schema order.
pub fn vectorize_explanations(schema: &RelationSchema) -> Result<TfidfMatrix, GroupingError> {
    let rels: Vec<_> = schema.non_na().collect();
    if rels.is_empty() {
        return Err(GroupingError::NoRelations);
    }
    let names = rels.iter().map(|r| r.name.clone()).collect();
    let texts: Vec<&str> = rels.iter().map(|r| r.explanation.as_str()).collect();
    Ok(TfidfMatrix::from_texts(names, &texts))
}

/// Symmetric n×n matrix with entries in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, GroupingError> {
        let n = rows.len();
        let mut values = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(GroupingError::InvalidMatrix(format!(
                    "row {i} has {} columns, expected {n}",
                    row.len()
                )));
            }
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(GroupingError::InvalidMatrix(format!("entry {v} outside [0,1]")));
                }
            }
            values.extend_from_slice(row);
        }
        for i in 0..n {
            for j in 0..i {
                if values[i * n + j] != values[j * n + i] {
                    return Err(GroupingError::InvalidMatrix(format!("not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(SimilarityMatrix { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Pairwise dot products of the normalized rows, clamped into [0, 1].
pub fn similarity_matrix(v: &TfidfMatrix) -> SimilarityMatrix {
    let n = v.rows.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = v.rows[i].iter().zip(&v.rows[j]).map(|(a, b)| a * b).sum();
            let s = dot.clamp(0.0, 1.0);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    SimilarityMatrix { n, values }
}

/// `max(1, floor(n_total / 6))`, where `n_total` counts every label including NA.
pub fn default_group_count(n_total: usize) -> usize {
    (n_total / 6).max(1)
}

/// Group sizes where exactly `n mod k` groups hold `ceil(n/k)`.
pub fn balanced_sizes(n: usize, k: usize) -> Vec<usize> {
    let (base, rem) = (n / k, n % k);
    (0..k).map(|g| if g < rem { base + 1 } else { base }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMethod {
    Algorithmic,
    Random,
}

impl std::str::FromStr for GroupingMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "algorithmic" => Ok(GroupingMethod::Algorithmic),
            "random" => Ok(GroupingMethod::Random),
            other => Err(format!("unknown grouping method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationGroups {
    pub k: usize,
    pub groups: Vec<Vec<String>>,
    pub method: GroupingMethod,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct GroupsFile {
    k: usize,
    method: GroupingMethod,
    seed: Option<u64>,
    groups: Vec<GroupEntry>,
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    index: usize,
    relations: Vec<String>,
}

impl RelationGroups {
    pub fn to_json_pretty(&self) -> String {
        let file = GroupsFile {
            k: self.k,
            method: self.method,
            seed: self.seed,
            groups: self
                .groups
                .iter()
                .enumerate()
                .map(|(index, relations)| GroupEntry {
                    index,
                    relations: relations.clone(),
                })
                .collect(),
        };
        let mut out = serde_json::to_string_pretty(&file).expect("groups serialize");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, GroupingError> {
        let mut file: GroupsFile = serde_json::from_str(text)?;
        file.groups.sort_by_key(|g| g.index);
        if file.groups.len() != file.k
            || file.groups.iter().enumerate().any(|(i, g)| g.index != i)
        {
            return Err(GroupingError::SchemaMismatch(format!(
                "expected group indices 0..{}",
                file.k
            )));
        }
        Ok(RelationGroups {
            k: file.k,
            groups: file.groups.into_iter().map(|g| g.relations).collect(),
            method: file.method,
            seed: file.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GroupingError> {
        fs::write(path, self.to_json_pretty())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GroupingError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Checks that the groups partition exactly the schema's non-NA relations.
    pub fn check_against(&self, schema: &RelationSchema) -> Result<(), GroupingError> {
        let mut expected = schema.non_na_names();
        let mut got: Vec<String> = self.groups.iter().flatten().cloned().collect();
        expected.sort();
        got.sort();
        if expected != got {
            return Err(GroupingError::SchemaMismatch(
                "groups must partition the non-NA relations exactly".into(),
            ));
        }
        if self.groups.iter().any(Vec::is_empty) {
            return Err(GroupingError::SchemaMismatch("empty group".into()));
        }
        Ok(())
    }
}

/// One commit of the greedy loop.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentStep {
    pub relation: usize,
    pub group: usize,
    pub score: f64,
    /// `(relation, best group, best score)` for every relation unassigned at this round.
    pub candidates: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingTrace {
    pub seeds: (usize, Option<usize>),
    pub steps: Vec<AssignmentStep>,
}

pub fn group_relations(
    s: &SimilarityMatrix,
    names: &[String],
    k: usize,
) -> Result<RelationGroups, GroupingError> {
    group_relations_traced(s, names, k).map(|(g, _)| g)
}

/// Greedy balanced partition.
///
/// The two most dissimilar relations seed the first two groups. Each round,
/// every unassigned relation is scored against every group still below its
/// cap by the maximum similarity to that group's members (an empty group
/// scores -1), takes its lowest-scoring group, and the relation whose best
/// score is lowest overall is committed. Ties go to the lower relation index,
/// then the lower group index. Members are listed in original index order.
pub fn group_relations_traced(
    s: &SimilarityMatrix,
    names: &[String],
    k: usize,
) -> Result<(RelationGroups, GroupingTrace), GroupingError> {
    let n = s.len();
    if names.len() != n {
        return Err(GroupingError::NameCount { n, names: names.len() });
    }
    if k < 1 || k > n {
        return Err(GroupingError::GroupCount { k, n });
    }

    let (base, rem) = (n / k, n % k);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut assigned = vec![false; n];

    let seeds = if n == 1 {
        (0, None)
    } else {
        let mut best = (0, 1);
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = 1.0 - s.get(i, j);
                if d > best_d {
                    best_d = d;
                    best = (i, j);
                }
            }
        }
        (best.0, Some(best.1))
    };
    members[0].push(seeds.0);
    assigned[seeds.0] = true;
    if let Some(j) = seeds.1 {
        members[if k >= 2 { 1 } else { 0 }].push(j);
        assigned[j] = true;
    }

    let mut steps = Vec::new();
    while assigned.iter().any(|a| !a) {
        let at_ceil = members.iter().filter(|m| m.len() > base).count();
        let eligible: Vec<usize> = (0..k)
            .filter(|&g| {
                let len = members[g].len();
                len < base || (len == base && rem > 0 && at_ceil < rem)
            })
            .collect();
        debug_assert!(!eligible.is_empty());

        let mut candidates = Vec::new();
        for u in (0..n).filter(|&u| !assigned[u]) {
            let mut best: Option<(usize, f64)> = None;
            for &g in &eligible {
                let score = members[g]
                    .iter()
                    .map(|&m| s.get(u, m))
                    .fold(-1.0, f64::max);
                if best.is_none_or(|(_, b)| score < b) {
                    best = Some((g, score));
                }
            }
            let (g, score) = best.expect("at least one eligible group");
            candidates.push((u, g, score));
        }
        let &(u, g, score) = candidates
            .iter()
            .fold(None, |acc: Option<&(usize, usize, f64)>, c| match acc {
                Some(a) if a.2 <= c.2 => Some(a),
                _ => Some(c),
            })
            .expect("unassigned relation exists");
        members[g].push(u);
        assigned[u] = true;
        steps.push(AssignmentStep {
            relation: u,
            group: g,
            score,
            candidates,
        });
    }

    let groups = members
        .into_iter()
        .map(|mut m| {
            m.sort_unstable();
            m.into_iter().map(|i| names[i].clone()).collect()
        })
        .collect();
    Ok((
        RelationGroups {
            k,
            groups,
            method: GroupingMethod::Algorithmic,
            seed: None,
        },
        GroupingTrace { seeds, steps },
    ))
}

/// Shuffles `names` with a seeded RNG and deals them into balanced groups.
pub fn random_groups(names: &[String], k: usize, seed: u64) -> Result<RelationGroups, GroupingError> {
    let n = names.len();
    if k < 1 || k > n {
        return Err(GroupingError::GroupCount { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut groups = Vec::with_capacity(k);
    let mut rest = order.as_slice();
    for size in balanced_sizes(n, k) {
        let (head, tail) = rest.split_at(size);
        let mut g = head.to_vec();
        g.sort_unstable();
        groups.push(g.into_iter().map(|i| names[i].clone()).collect());
        rest = tail;
    }
    Ok(RelationGroups {
        k,
        groups,
        method: GroupingMethod::Random,
        seed: Some(seed),
    })
}

/// Builds groups for a schema with the chosen method.
pub fn build_groups(
    schema: &RelationSchema,
    k: usize,
    method: GroupingMethod,
    seed: u64,
) -> Result<RelationGroups, GroupingError> {
    let names = schema.non_na_names();
    if names.is_empty() {
        return Err(GroupingError::NoRelations);
    }
    match method {
        GroupingMethod::Algorithmic => {
            let tfidf = vectorize_explanations(schema)?;
            group_relations(&similarity_matrix(&tfidf), &names, k)
        }
        GroupingMethod::Random => random_groups(&names, k, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i}")).collect()
    }

    fn hand_trace_matrix() -> SimilarityMatrix {
        // A, B, C, D
        SimilarityMatrix::from_rows(vec![
            vec![1.0, 0.9, 0.1, 0.4],
            vec![0.9, 1.0, 0.3, 0.2],
            vec![0.1, 0.3, 1.0, 0.8],
            vec![0.4, 0.2, 0.8, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn tokenizer_splits_on_punctuation() {
        assert_eq!(tokenize("The top members/employees, of X."), vec!["the", "top", "members", "employees", "of", "x"]);
    }

    #[test]
    fn identical_explanations_identical_rows() {
        let m = TfidfMatrix::from_texts(names(2), &["the age of a person", "the age of a person"]);
        assert_eq!(m.rows[0], m.rows[1]);
    }

    #[test]
    fn disjoint_explanations_orthogonal() {
        let m = TfidfMatrix::from_texts(names(2), &["alpha beta", "gamma delta"]);
        let dot: f64 = m.rows[0].iter().zip(&m.rows[1]).map(|(a, b)| a * b).sum();
        assert_eq!(dot, 0.0);
        assert_eq!(similarity_matrix(&m).get(0, 1), 0.0);
    }

    #[test]
    fn smooth_idf_by_hand() {
        // n = 3; df(founder) = 2, df(city) = 1.
        let m = TfidfMatrix::from_texts(names(3), &["founder", "founder", "city"]);
        assert_eq!(m.vocabulary, vec!["city", "founder"]);
        let idf_city = (4.0f64 / 2.0).ln() + 1.0;
        let idf_founder = (4.0f64 / 3.0).ln() + 1.0;
        assert!((m.idf[0] - 1.693_147_180_559_945).abs() < 1e-12);
        assert!((m.idf[0] - idf_city).abs() < 1e-15);
        assert!((m.idf[1] - 1.287_682_072_451_781).abs() < 1e-12);
        assert!((m.idf[1] - idf_founder).abs() < 1e-15);
        // Single-term rows normalize to unit basis vectors.
        assert_eq!(m.rows, vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn repeated_terms_weighted_by_count() {
        // "a a b" vs "b": df(a)=1, df(b)=2, n=2.
        let m = TfidfMatrix::from_texts(names(2), &["a a b", "b"]);
        let ia = (3.0f64 / 2.0).ln() + 1.0;
        let ib = (3.0f64 / 3.0).ln() + 1.0;
        let (wa, wb) = (2.0 * ia, ib);
        let norm = (wa * wa + wb * wb).sqrt();
        assert!((m.rows[0][0] - wa / norm).abs() < 1e-12);
        assert!((m.rows[0][1] - wb / norm).abs() < 1e-12);
    }

    #[test]
    fn empty_explanation_flagged() {
        let m = TfidfMatrix::from_texts(names(2), &["...", "word"]);
        assert_eq!(m.zero_rows, vec![true, false]);
        let s = similarity_matrix(&m);
        assert_eq!(s.get(0, 0), 0.0);
        assert_eq!(s.get(1, 1), 1.0);
    }

    #[test]
    fn group_count_rule() {
        assert_eq!(default_group_count(42), 7);
        assert_eq!(default_group_count(19), 3);
        assert_eq!(default_group_count(5), 1);
    }

    #[test]
    fn hand_trace_reproduced() {
        let abcd: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let (g, trace) = group_relations_traced(&hand_trace_matrix(), &abcd, 2).unwrap();
        assert_eq!(trace.seeds, (0, Some(2)));
        assert_eq!(trace.steps[0].relation, 1);
        assert!((trace.steps[0].score - 0.3).abs() < 1e-12);
        assert_eq!(trace.steps[0].candidates[1], (3, 0, 0.4));
        assert_eq!(g.groups, vec![vec!["A".to_string(), "D".into()], vec!["B".into(), "C".into()]]);
    }

    #[test]
    fn single_group() {
        let s = SimilarityMatrix::from_rows(vec![vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let g = group_relations(&s, &names(2), 1).unwrap();
        assert_eq!(g.groups, vec![names(2)]);
    }

    #[test]
    fn k_out_of_range() {
        let s = hand_trace_matrix();
        assert!(matches!(group_relations(&s, &names(4), 5), Err(GroupingError::GroupCount { .. })));
        assert!(matches!(group_relations(&s, &names(4), 0), Err(GroupingError::GroupCount { .. })));
        assert!(random_groups(&names(3), 4, 0).is_err());
    }

    #[test]
    fn rejects_asymmetric_matrix() {
        assert!(SimilarityMatrix::from_rows(vec![vec![1.0, 0.2], vec![0.3, 1.0]]).is_err());
    }

    #[test]
    fn tacred_seven_groups() {
        let schema = RelationSchema::bundled("tacred").unwrap();
        let k = default_group_count(schema.total_labels());
        let g = build_groups(&schema, k, GroupingMethod::Algorithmic, 0).unwrap();
        let mut sizes: Vec<usize> = g.groups.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![5, 6, 6, 6, 6, 6, 6]);
        g.check_against(&schema).unwrap();
    }

    #[test]
    fn random_singletons_and_determinism() {
        let g = random_groups(&names(6), 6, 99).unwrap();
        assert!(g.groups.iter().all(|g| g.len() == 1));
        assert_eq!(random_groups(&names(7), 3, 5).unwrap(), random_groups(&names(7), 3, 5).unwrap());
    }

    #[test]
    fn random_groups_uniform() {
        let ns = names(12);
        let mut counts = vec![[0usize; 3]; 12];
        for seed in 0..1000 {
            let g = random_groups(&ns, 3, seed).unwrap();
            for (gi, members) in g.groups.iter().enumerate() {
                for m in members {
                    let idx: usize = m[1..].parse().unwrap();
                    counts[idx][gi] += 1;
                }
            }
        }
        for row in counts {
            for c in row {
                let f = c as f64 / 1000.0;
                assert!((f - 1.0 / 3.0).abs() <= 0.05, "frequency {f}");
            }
        }
    }

    #[test]
    fn groups_file_round_trip() {
        let g = random_groups(&names(7), 3, 11).unwrap();
        assert_eq!(RelationGroups::from_json(&g.to_json_pretty()).unwrap(), g);
    }

    fn arb_similarity() -> impl Strategy<Value = SimilarityMatrix> {
        (1usize..=12).prop_flat_map(|n| {
            proptest::collection::vec(0u8..=10, n * n).prop_map(move |raw| {
                let mut rows = vec![vec![0.0; n]; n];
                for i in 0..n {
                    rows[i][i] = 1.0;
                    for j in (i + 1)..n {
                        let v = raw[i * n + j] as f64 / 10.0;
                        rows[i][j] = v;
                        rows[j][i] = v;
                    }
                }
                SimilarityMatrix::from_rows(rows).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn partition_balanced_and_greedy(s in arb_similarity(), kseed in 0usize..100) {
            let n = s.len();
            let k = 1 + kseed % n;
            let ns = names(n);
            let (g, trace) = group_relations_traced(&s, &ns, k).unwrap();
            let mut all: Vec<String> = g.groups.iter().flatten().cloned().collect();
            all.sort();
            let mut expect = ns.clone();
            expect.sort();
            prop_assert_eq!(all, expect);
            let mut sizes: Vec<usize> = g.groups.iter().map(Vec::len).collect();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            prop_assert_eq!(sizes, balanced_sizes(n, k));
            for step in &trace.steps {
                prop_assert!(step.candidates.iter().all(|c| c.2 >= step.score));
            }
            prop_assert_eq!(group_relations(&s, &ns, k).unwrap(), g);
        }
    }
}
