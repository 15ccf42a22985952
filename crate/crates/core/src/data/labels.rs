use std::collections::BTreeMap;
use std::sync::Arc;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::tagger::{potential_relations, relation_mask, EntityType, TypeRelationMap};

/// Positive relation columns per token for one gold head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TailPass {
    pub head: (usize, usize),
    pub head_type: EntityType,
    /// Active relation columns (`R′` of the head type).
    pub active: Arc<[bool]>,
    pub start: Vec<Vec<usize>>,
    pub end: Vec<Vec<usize>>,
}

/// Per-position positive classes for every tagger of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTensors {
    pub len: usize,
    /// Entity-type ids starting/ending at each position.
    pub head_start: Vec<Vec<usize>>,
    pub head_end: Vec<Vec<usize>>,
    /// One pass per distinct gold head, ordered by span then type.
    pub tails: Vec<TailPass>,
}

impl LabelTensors {
    pub fn positive_count(&self) -> usize {
        let count = |v: &Vec<Vec<usize>>| v.iter().map(Vec::len).sum::<usize>();
        count(&self.head_start)
            + count(&self.head_end)
            + self.tails.iter().map(|t| count(&t.start) + count(&t.end)).sum::<usize>()
    }
}

fn add(cells: &mut [Vec<usize>], pos: usize, class: usize) {
    if !cells[pos].contains(&class) {
        cells[pos].push(class);
        cells[pos].sort_unstable();
    }
}

pub fn build_labels(example: &Example, map: &TypeRelationMap, mapping_enabled: bool) -> Result<LabelTensors> {
    let n = example.len();
    let mut labels = LabelTensors {
        len: n,
        head_start: vec![Vec::new(); n],
        head_end: vec![Vec::new(); n],
        tails: Vec::new(),
    };
    let mut passes: BTreeMap<((usize, usize), EntityType), TailPass> = BTreeMap::new();
    for t in &example.triples {
        if t.head.1 >= n || t.tail.1 >= n || t.head.0 > t.head.1 || t.tail.0 > t.tail.1 {
            return Err(Error::InvalidArgument(format!("triple {t:?} outside a {n}-token sentence")));
        }
        let rel = map
            .relation_id(&t.relation)
            .ok_or_else(|| Error::Schema(format!("relation {:?} is not in the type-relation map", t.relation)))?;
        let allowed = potential_relations(t.head_type.index(), map, mapping_enabled)?;
        if !allowed.contains(&rel) {
            return Err(Error::Schema(format!(
                "relation {:?} is not permitted for head type {} by the type-relation map",
                t.relation, t.head_type
            )));
        }
        add(&mut labels.head_start, t.head.0, t.head_type.index());
        add(&mut labels.head_end, t.head.1, t.head_type.index());
        let pass = passes.entry((t.head, t.head_type)).or_insert_with(|| TailPass {
            head: t.head,
            head_type: t.head_type,
            active: relation_mask(&allowed, map.num_relations()),
            start: vec![Vec::new(); n],
            end: vec![Vec::new(); n],
        });
        add(&mut pass.start, t.tail.0, rel);
        add(&mut pass.end, t.tail.1, rel);
    }
    labels.tails = passes.into_values().collect();
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample, GoldTriple};
    use crate::numerics::Tensor;
    use crate::tagger::{decode_spans, ThresholdRule};

    fn triple(head: (usize, usize), ty: EntityType, rel: &str, tail: (usize, usize)) -> GoldTriple {
        GoldTriple {
            head,
            head_type: ty,
            relation: rel.into(),
            tail,
        }
    }

    fn example(n: usize, triples: Vec<GoldTriple>) -> Example {
        Example {
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            triples,
        }
    }

    #[test]
    fn one_triple_gives_four_positives() {
        let map = sample::map();
        let l = build_labels(&example(6, vec![triple((0, 1), EntityType::Per, "works_for", (4, 4))]), &map, true).unwrap();
        assert_eq!(l.positive_count(), 4);
        assert_eq!(l.head_start[0], vec![0]);
        assert_eq!(l.head_end[1], vec![0]);
        assert_eq!(l.tails.len(), 1);
        assert_eq!(l.tails[0].start[4], vec![0]);
        assert_eq!(&*l.tails[0].active, &[true, true, false]);
    }

    #[test]
    fn shared_head_uses_one_pass() {
        let map = sample::map();
        let ex = example(
            9,
            vec![
                triple((0, 1), EntityType::Per, "works_for", (4, 4)),
                triple((0, 1), EntityType::Per, "founded", (7, 8)),
            ],
        );
        let l = build_labels(&ex, &map, true).unwrap();
        assert_eq!(l.head_start.iter().map(Vec::len).sum::<usize>(), 1);
        assert_eq!(l.tails.len(), 1);
        assert_eq!(l.tails[0].start[4], vec![0]);
        assert_eq!(l.tails[0].start[7], vec![1]);
        assert_eq!(l.positive_count(), 2 + 4);
    }

    #[test]
    fn entity_pair_overlap_shares_a_position() {
        let map = sample::map();
        let ex = example(
            8,
            vec![
                triple((0, 0), EntityType::Per, "works_for", (6, 6)),
                triple((0, 0), EntityType::Per, "founded", (6, 6)),
            ],
        );
        let l = build_labels(&ex, &map, true).unwrap();
        assert_eq!(l.tails[0].start[6], vec![0, 1]);
        assert_eq!(l.tails[0].end[6], vec![0, 1]);
    }

    #[test]
    fn relation_outside_mapped_set_is_rejected() {
        let map = sample::map();
        let ex = example(5, vec![triple((0, 0), EntityType::Org, "works_for", (3, 3))]);
        assert!(matches!(build_labels(&ex, &map, true), Err(Error::Schema(_))));
        let l = build_labels(&ex, &map, false).unwrap();
        assert!(l.tails[0].active.iter().all(|&a| a));
        let unknown = example(5, vec![triple((0, 0), EntityType::Org, "owns", (3, 3))]);
        assert!(build_labels(&unknown, &map, false).is_err());
    }

    fn scores(cells: &[Vec<usize>], classes: usize) -> Tensor<f64> {
        let mut t = Tensor::full([cells.len(), classes + 1], -1.0);
        for (i, row) in cells.iter().enumerate() {
            t.set(i, classes, 0.0);
            for &c in row {
                t.set(i, c, 1.0);
            }
        }
        t
    }

    #[test]
    fn labels_decode_back_to_gold_on_sample() {
        let map = sample::map();
        let corpus = sample::corpus().unwrap();
        for ex in &corpus.examples {
            let l = build_labels(ex, &map, true).unwrap();
            let n = ex.len();
            let heads = decode_spans(&scores(&l.head_start, 4), &scores(&l.head_end, 4), 0..n, None, ThresholdRule::Adaptive);
            let mut got = Vec::new();
            for h in heads {
                let ty = EntityType::from_index(h.class).unwrap();
                let pass = l.tails.iter().find(|p| p.head == (h.start, h.end) && p.head_type == ty).unwrap();
                let n_rel = map.num_relations();
                let tails = decode_spans(
                    &scores(&pass.start, n_rel),
                    &scores(&pass.end, n_rel),
                    0..n,
                    Some(&pass.active),
                    ThresholdRule::Adaptive,
                );
                for t in tails {
                    got.push(triple((h.start, h.end), ty, map.relation_name(t.class), (t.start, t.end)));
                }
            }
            got.sort();
            let mut gold = ex.triples.clone();
            gold.sort();
            assert_eq!(got, gold, "{:?}", ex.tokens);
        }
    }
}
