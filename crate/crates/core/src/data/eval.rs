use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::GoldTriple;
use crate::error::{Error, Result};
use crate::tagger::{Triple, TypeRelationMap};

/// Span-level identity of a triple for scoring.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TripleKey {
    pub head: (usize, usize),
    pub relation: String,
    pub tail: (usize, usize),
}

impl From<&GoldTriple> for TripleKey {
    fn from(t: &GoldTriple) -> Self {
        Self {
            head: t.head,
            relation: t.relation.clone(),
            tail: t.tail,
        }
    }
}

impl TripleKey {
    pub fn from_triple(t: &Triple, map: &TypeRelationMap) -> Self {
        Self {
            head: (t.head.start, t.head.end),
            relation: map.relation_name(t.relation).to_string(),
            tail: (t.tail.start, t.tail.end),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MatchMode {
    /// Relation plus the last token of head and tail.
    #[default]
    Partial,
    /// Relation plus both full spans.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
            tp,
            fp,
            fn_,
        }
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn match_key(k: &TripleKey, mode: MatchMode) -> (String, usize, usize, usize, usize) {
    match mode {
        MatchMode::Partial => (k.relation.clone(), usize::MAX, k.head.1, usize::MAX, k.tail.1),
        MatchMode::Exact => (k.relation.clone(), k.head.0, k.head.1, k.tail.0, k.tail.1),
    }
}

/// Per-sentence (tp, fp, fn).
pub fn sentence_counts(pred: &[TripleKey], gold: &[TripleKey], mode: MatchMode) -> (usize, usize, usize) {
    let p: BTreeSet<_> = pred.iter().map(|k| match_key(k, mode)).collect();
    let g: BTreeSet<_> = gold.iter().map(|k| match_key(k, mode)).collect();
    let tp = p.intersection(&g).count();
    (tp, p.len() - tp, g.len() - tp)
}

/// Micro-averaged precision, recall and F1 over aligned sentences.
pub fn evaluate(pred: &[Vec<TripleKey>], gold: &[Vec<TripleKey>], mode: MatchMode) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted sentences vs {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let (a, b, c) = sentence_counts(p, g, mode);
        tp += a;
        fp += b;
        fn_ += c;
    }
    Ok(EvalReport::from_counts(tp, fp, fn_))
}

pub fn evaluate_partial(pred: &[Vec<TripleKey>], gold: &[Vec<TripleKey>]) -> Result<EvalReport> {
    evaluate(pred, gold, MatchMode::Partial)
}
