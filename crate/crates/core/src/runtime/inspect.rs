use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Example, GoldTriple};
use crate::error::Result;
use crate::model::{row_norms, Model};
use crate::numerics::{Float, ParamStore};
use crate::tagger::EntityType;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Element counts keyed by the first segment of the parameter name.
    pub groups: BTreeMap<String, usize>,
}

/// Trainable element counts. Frozen word vectors are not parameters and
/// are never counted.
pub fn count_params<T: Float>(store: &ParamStore<T>) -> ParamCount {
    let mut count = ParamCount::default();
    for p in store.iter() {
        let group = p.name().split('.').next().unwrap_or_default().to_string();
        *count.groups.entry(group).or_default() += p.value.numel();
        count.total += p.value.numel();
    }
    count
}

/// Per-token L2 norm of the objective's gradient with respect to the word
/// vectors, scaled so the largest is 1 (all zeros stay zero).
///
/// Without `triples` the model's own extractions serve as targets.
pub fn gradient_attribution(model: &Model, tokens: &[String], triples: Option<&[GoldTriple]>) -> Result<Vec<f64>> {
    let triples = match triples {
        Some(t) => t.to_vec(),
        None => model
            .extract(tokens)?
            .into_iter()
            .map(|t| GoldTriple {
                head: (t.head.start, t.head.end),
                head_type: EntityType::from_index(t.head.class).expect("decoded types are valid"),
                relation: model.map().relation_name(t.relation).to_string(),
                tail: (t.tail.start, t.tail.end),
            })
            .collect(),
    };
    let example = Example {
        tokens: tokens.to_vec(),
        triples,
    };
    let mut norms = row_norms(&model.input_gradients(&example)?);
    let max = norms.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        norms.iter_mut().for_each(|n| *n /= max);
    }
    Ok(norms)
}
