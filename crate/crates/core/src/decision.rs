//! Response confidence and the three-case label decision.
//!
//! Confidence is the mean, over generated tokens, of the probability of the
//! most likely token at each position. After binary verification:
//!
//! * no affirmed relation: the NA label;
//! * one affirmed relation: that relation, whatever its confidence;
//! * several: every affirmed relation with confidence `>= 1 - theta`, sorted by
//!   confidence. If none clears the bar the single most confident one is kept,
//!   or the NA label in strict mode.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::ModelResponse;

pub const DEFAULT_THETA: f64 = 0.01;

/// Threshold grid swept by `sweep-theta` by default.
pub const THETA_GRID: [f64; 5] = [0.001, 0.01, 0.02, 0.05, 0.1];

#[derive(Debug, Error, PartialEq)]
pub enum DecisionError {
    #[error("response has no generated tokens")]
    NoTokens,
    #[error("theta {0} outside [0, 1)")]
    ThetaOutOfRange(f64),
}

/// Arithmetic mean of per-token top probabilities.
pub fn mean_top_prob(token_top_probs: &[f64]) -> Result<f64, DecisionError> {
    if token_top_probs.is_empty() {
        return Err(DecisionError::NoTokens);
    }
    Ok(token_top_probs.iter().sum::<f64>() / token_top_probs.len() as f64)
}

pub fn confidence(resp: &ModelResponse) -> Result<f64, DecisionError> {
    mean_top_prob(&resp.token_top_probs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedCandidate {
    pub relation: String,
    pub affirmed: bool,
    pub confidence: f64,
    /// Group whose multi-class prompt proposed the relation; `None` in binary-only mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DecisionCase {
    WithoutYes,
    SingleYes,
    MultiYes,
}

impl DecisionCase {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionCase::WithoutYes => "WithoutYes",
            DecisionCase::SingleYes => "SingleYes",
            DecisionCase::MultiYes => "MultiYes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub case: DecisionCase,
    pub labels: Vec<String>,
    pub theta: f64,
    /// Aligned with `labels`; `None` for the NA label.
    pub retained_confidences: Vec<Option<f64>>,
    /// Multi-Yes with nothing above `1 - theta`: the argmax relation was kept.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub theta: f64,
    /// Emit the NA label instead of the argmax fallback.
    pub strict_multiyes: bool,
}

impl Default for DecisionRule {
    fn default() -> Self {
        DecisionRule {
            theta: DEFAULT_THETA,
            strict_multiyes: false,
        }
    }
}

impl DecisionRule {
    pub fn new(theta: f64) -> Result<Self, DecisionError> {
        let rule = DecisionRule {
            theta,
            strict_multiyes: false,
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<(), DecisionError> {
        if !(0.0..1.0).contains(&self.theta) {
            return Err(DecisionError::ThetaOutOfRange(self.theta));
        }
        Ok(())
    }
}

fn by_confidence_then_name(a: &&VerifiedCandidate, b: &&VerifiedCandidate) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.relation.cmp(&b.relation))
}

pub fn decide(candidates: &[VerifiedCandidate], theta: f64, na_label: &str) -> Result<Decision, DecisionError> {
    decide_with(candidates, DecisionRule { theta, strict_multiyes: false }, na_label)
}

pub fn decide_with(
    candidates: &[VerifiedCandidate],
    rule: DecisionRule,
    na_label: &str,
) -> Result<Decision, DecisionError> {
    rule.validate()?;
    let mut affirmed: Vec<&VerifiedCandidate> = candidates.iter().filter(|c| c.affirmed).collect();
    let na = |case| Decision {
        case,
        labels: vec![na_label.to_string()],
        theta: rule.theta,
        retained_confidences: vec![None],
        fallback: false,
    };
    match affirmed.len() {
        0 => Ok(na(DecisionCase::WithoutYes)),
        1 => Ok(Decision {
            case: DecisionCase::SingleYes,
            labels: vec![affirmed[0].relation.clone()],
            theta: rule.theta,
            retained_confidences: vec![Some(affirmed[0].confidence)],
            fallback: false,
        }),
        _ => {
            affirmed.sort_by(by_confidence_then_name);
            let bar = 1.0 - rule.theta;
            let kept: Vec<&VerifiedCandidate> = affirmed.iter().copied().filter(|c| c.confidence >= bar).collect();
            let (kept, fallback) = if !kept.is_empty() {
                (kept, false)
            } else if rule.strict_multiyes {
                return Ok(na(DecisionCase::MultiYes));
            } else {
                (vec![affirmed[0]], true)
            };
            Ok(Decision {
                case: DecisionCase::MultiYes,
                labels: kept.iter().map(|c| c.relation.clone()).collect(),
                theta: rule.theta,
                retained_confidences: kept.iter().map(|c| Some(c.confidence)).collect(),
                fallback,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(relation: &str, affirmed: bool, confidence: f64) -> VerifiedCandidate {
        VerifiedCandidate {
            relation: relation.into(),
            affirmed,
            confidence,
            group_index: None,
        }
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(mean_top_prob(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!((mean_top_prob(&[0.9, 0.8]).unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(mean_top_prob(&[0.5]).unwrap(), 0.5);
        assert_eq!(mean_top_prob(&[]), Err(DecisionError::NoTokens));
    }

    #[test]
    fn without_yes() {
        let d = decide(&[cand("r1", false, 0.99), cand("r2", false, 0.7)], 0.01, "no_relation").unwrap();
        assert_eq!(d.case, DecisionCase::WithoutYes);
        assert_eq!(d.labels, vec!["no_relation"]);
        let d = decide(&[], 0.01, "NA").unwrap();
        assert_eq!(d.labels, vec!["NA"]);
    }

    #[test]
    fn single_yes_ignores_confidence() {
        let d = decide(&[cand("r1", true, 0.5), cand("r2", false, 0.99)], 0.01, "NA").unwrap();
        assert_eq!(d.case, DecisionCase::SingleYes);
        assert_eq!(d.labels, vec!["r1"]);
    }

    #[test]
    fn multi_yes_threshold() {
        let c = [cand("r3", true, 0.90), cand("r2", true, 0.992), cand("r1", true, 0.995)];
        let d = decide(&c, 0.01, "NA").unwrap();
        assert_eq!(d.case, DecisionCase::MultiYes);
        assert_eq!(d.labels, vec!["r1", "r2"]);
        assert!(!d.fallback);
    }

    #[test]
    fn multi_yes_fallback_and_strict() {
        let c = [cand("r2", true, 0.90), cand("r1", true, 0.95)];
        let d = decide(&c, 0.01, "NA").unwrap();
        assert_eq!(d.labels, vec!["r1"]);
        assert!(d.fallback);
        let strict = DecisionRule { theta: 0.01, strict_multiyes: true };
        let d = decide_with(&c, strict, "NA").unwrap();
        assert_eq!(d.case, DecisionCase::MultiYes);
        assert_eq!(d.labels, vec!["NA"]);
    }

    #[test]
    fn ties_broken_by_name() {
        let c = [cand("b", true, 0.995), cand("a", true, 0.995)];
        assert_eq!(decide(&c, 0.01, "NA").unwrap().labels, vec!["a", "b"]);
        let c = [cand("b", true, 0.5), cand("a", true, 0.5)];
        assert_eq!(decide(&c, 0.01, "NA").unwrap().labels, vec!["a"]);
    }

    #[test]
    fn theta_range() {
        assert!(decide(&[], 1.0, "NA").is_err());
        assert!(decide(&[], -0.1, "NA").is_err());
        assert!(decide(&[], 0.0, "NA").is_ok());
    }
}
