//! Cascade binary tagging with typed heads, type-relation mapping and
//! position-dependent thresholds.
//!
//! Scores are `[rows, C + 1]` matrices whose last column is the threshold
//! (AT) class of each row. A class fires at a position when its score is
//! strictly greater than that position's AT score.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng, Float, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "ORG")]
    Org,
    #[serde(rename = "OTH")]
    Oth,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [EntityType::Per, EntityType::Loc, EntityType::Org, EntityType::Oth];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Per => "PER",
            EntityType::Loc => "LOC",
            EntityType::Org => "ORG",
            EntityType::Oth => "OTH",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim_matches(|c| c == '[' || c == ']');
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Schema(format!("unknown entity type {s:?} (expected PER, LOC, ORG or OTH)")))
    }
}

/// Head-type to relation-set mapping. Every relation belongs to exactly
/// one head type, so the inverse direction is a function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeRelationMap {
    relations: Vec<String>,
    forward: [Vec<usize>; EntityType::COUNT],
    inverse: Vec<EntityType>,
}

impl TypeRelationMap {
    /// Builds the map from `(type, relations)` pairs. Relation ids follow
    /// the order PER, LOC, ORG, OTH and, within a type, the listed order.
    pub fn new(entries: &BTreeMap<EntityType, Vec<String>>) -> Result<Self> {
        let mut relations = Vec::new();
        let mut forward: [Vec<usize>; EntityType::COUNT] = Default::default();
        let mut inverse = Vec::new();
        let mut seen: BTreeMap<&str, EntityType> = BTreeMap::new();
        for ty in EntityType::ALL {
            for name in entries.get(&ty).into_iter().flatten() {
                if let Some(prev) = seen.insert(name.as_str(), ty) {
                    return Err(Error::Schema(format!(
                        "relation {name:?} is listed under both {prev} and {ty}; each relation needs a unique head type"
                    )));
                }
                forward[ty.index()].push(relations.len());
                relations.push(name.clone());
                inverse.push(ty);
            }
        }
        Ok(Self {
            relations,
            forward,
            inverse,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("type-relation map must be an object of string arrays: {e}")))?;
        let mut entries = BTreeMap::new();
        for (key, rels) in raw {
            entries.insert(key.parse::<EntityType>()?, rels);
        }
        Self::new(&entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let obj: serde_json::Map<String, serde_json::Value> = EntityType::ALL
            .iter()
            .map(|t| {
                let names = self.forward[t.index()].iter().map(|&r| self.relations[r].clone().into()).collect();
                (t.as_str().to_string(), serde_json::Value::Array(names))
            })
            .collect();
        serde_json::Value::Object(obj)
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relations[id]
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn forward(&self, ty: EntityType) -> &[usize] {
        &self.forward[ty.index()]
    }

    pub fn head_type(&self, relation: usize) -> EntityType {
        self.inverse[relation]
    }
}

/// Relations scored for a head of the given type: its mapped set, or every
/// relation when mapping is disabled.
pub fn potential_relations(type_id: usize, map: &TypeRelationMap, mapping_enabled: bool) -> Result<Vec<usize>> {
    let ty = EntityType::from_index(type_id).ok_or_else(|| Error::InvalidArgument(format!("unknown entity type id {type_id}")))?;
    Ok(if mapping_enabled {
        map.forward(ty).to_vec()
    } else {
        (0..map.num_relations()).collect()
    })
}

/// Column-activity mask over the `N` relation columns for `R′`.
pub fn relation_mask(relations: &[usize], num_relations: usize) -> Arc<[bool]> {
    let mut mask = vec![false; num_relations];
    for &r in relations {
        mask[r] = true;
    }
    Arc::from(mask)
}

/// How a score row is turned into positive classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// Class score must exceed the row's AT score.
    Adaptive,
    /// `sigmoid(score) > tau`, evaluated as `score > logit(tau)`.
    Global { tau: f64 },
}

impl ThresholdRule {
    fn cutoff(&self, row: &[f64]) -> f64 {
        match *self {
            ThresholdRule::Adaptive => row[row.len() - 1],
            ThresholdRule::Global { tau } => (tau / (1.0 - tau)).ln(),
        }
    }
}

/// Positions and classes whose score clears the threshold, for the score
/// rows `rows` of `scores`. `active` limits the candidate classes.
/// Returned positions are relative to `rows.start`, each with its margin.
pub fn decode_positions<T: Float>(
    scores: &Tensor<T>,
    rows: std::ops::Range<usize>,
    active: Option<&[bool]>,
    rule: ThresholdRule,
) -> Vec<(usize, usize, f64)> {
    let classes = scores.cols() - 1;
    let mut out = Vec::new();
    let mut buf = vec![0.0; classes + 1];
    for (pos, r) in rows.enumerate() {
        for (b, &v) in buf.iter_mut().zip(scores.row(r)) {
            *b = v.as_f64();
        }
        let cut = rule.cutoff(&buf);
        for (j, &s) in buf[..classes].iter().enumerate() {
            if active.map_or(true, |m| m[j]) && s > cut {
                out.push((pos, j, s - cut));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypedSpan {
    pub start: usize,
    pub end: usize,
    /// Entity type for heads, relation id for tails.
    pub class: usize,
    /// Smaller of the start and end margins over the threshold.
    pub score: f64,
}

/// Pairs start and end tags of the same class: each start takes the nearest
/// end at or after it and strictly before the next start of that class.
/// Unpaired tags are dropped. Output is ordered by `(start, class)`.
pub fn pair_spans(starts: &[(usize, usize, f64)], ends: &[(usize, usize, f64)]) -> Vec<TypedSpan> {
    let mut by_class: BTreeMap<usize, (Vec<(usize, f64)>, Vec<(usize, f64)>)> = BTreeMap::new();
    for &(p, c, m) in starts {
        by_class.entry(c).or_default().0.push((p, m));
    }
    for &(p, c, m) in ends {
        by_class.entry(c).or_default().1.push((p, m));
    }
    let mut spans = Vec::new();
    for (class, (mut s, mut e)) in by_class {
        s.sort_by_key(|x| x.0);
        e.sort_by_key(|x| x.0);
        for (k, &(start, ms)) in s.iter().enumerate() {
            let limit = s.get(k + 1).map_or(usize::MAX, |x| x.0);
            if let Some(&(end, me)) = e.iter().find(|x| x.0 >= start && x.0 < limit) {
                spans.push(TypedSpan {
                    start,
                    end,
                    class,
                    score: ms.min(me),
                });
            }
        }
    }
    spans.sort_by_key(|s| (s.start, s.class, s.end));
    spans
}

/// Decodes and pairs one sentence's spans from start/end score matrices.
pub fn decode_spans<T: Float>(
    start: &Tensor<T>,
    end: &Tensor<T>,
    rows: std::ops::Range<usize>,
    active: Option<&[bool]>,
    rule: ThresholdRule,
) -> Vec<TypedSpan> {
    let s = decode_positions(start, rows.clone(), active, rule);
    let e = decode_positions(end, rows, active, rule);
    pair_spans(&s, &e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub head: TypedSpan,
    pub relation: usize,
    pub tail: TypedSpan,
}

impl Triple {
    pub fn head_type(&self) -> EntityType {
        EntityType::from_index(self.head.class).expect("decoded head classes are entity types")
    }

    /// Identity ignoring scores.
    pub fn key(&self) -> (usize, usize, usize, usize, usize, usize) {
        (self.head.start, self.head.end, self.head.class, self.relation, self.tail.start, self.tail.end)
    }
}

/// Start/end linear taggers with `classes + 1` outputs (last is AT).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaggerParams {
    pub start_weight: ParamId,
    pub start_bias: ParamId,
    pub end_weight: ParamId,
    pub end_bias: ParamId,
}

impl TaggerParams {
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        classes: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (1.0 / width as f64).sqrt();
        let start_weight = store.insert(format!("{prefix}_start.weight"), rng::uniform(&[classes + 1, width], bound, rng))?;
        let start_bias = store.insert(format!("{prefix}_start.bias"), Tensor::zeros([classes + 1]))?;
        let end_weight = store.insert(format!("{prefix}_end.weight"), rng::uniform(&[classes + 1, width], bound, rng))?;
        let end_bias = store.insert(format!("{prefix}_end.bias"), Tensor::zeros([classes + 1]))?;
        Ok(Self {
            start_weight,
            start_bias,
            end_weight,
            end_bias,
        })
    }

    fn apply<T: Float>(&self, tape: &mut Tape<'_, T>, features: Var) -> Result<(Var, Var)> {
        let (ws, bs) = (tape.param(self.start_weight), tape.param(self.start_bias));
        let start = tape.linear(features, ws, bs)?;
        let (we, be) = (tape.param(self.end_weight), tape.param(self.end_bias));
        let end = tape.linear(features, we, be)?;
        Ok((start, end))
    }
}

/// Type embeddings `[K, d_t]` and position embeddings `[n_max, d]` used to
/// build head-entity features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadFeatureTables {
    pub type_embedding: ParamId,
    pub position: ParamId,
}

impl HeadFeatureTables {
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        type_dim: usize,
        hidden: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            type_embedding: store.insert("tagger.type_embedding", rng::uniform(&[EntityType::COUNT, type_dim], 0.1, rng))?,
            position: store.insert("tagger.rel_position", rng::uniform(&[max_len, hidden], 0.1, rng))?,
        })
    }
}

/// Head start/end scores from `[H, H_h]`.
pub fn score_head<T: Float>(tape: &mut Tape<'_, T>, h: Var, h_head: Var, params: &TaggerParams) -> Result<(Var, Var)> {
    let features = tape.concat_cols(&[h, h_head])?;
    params.apply(tape, features)
}

/// One head entity to condition tail tagging on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadRef {
    /// Sentence index within the batch.
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
    pub type_id: usize,
}

/// `w^h = [(w_a + p_a), (w_b + p_b), t]` for every head, stacked to
/// `[heads, 2d + d_t]`. `seg_len` maps sentence positions to rows of `h`.
pub fn head_features<T: Float>(
    tape: &mut Tape<'_, T>,
    h: Var,
    heads: &[HeadRef],
    seg_len: usize,
    tables: &HeadFeatureTables,
) -> Result<Var> {
    let rows = tape.value(h).rows();
    for hr in heads {
        if hr.start > hr.end || hr.end >= seg_len || (hr.sentence + 1) * seg_len > rows || hr.type_id >= EntityType::COUNT {
            return Err(Error::InvalidArgument(format!("head span {hr:?} out of range")));
        }
    }
    let start_rows: Vec<usize> = heads.iter().map(|x| x.sentence * seg_len + x.start).collect();
    let end_rows: Vec<usize> = heads.iter().map(|x| x.sentence * seg_len + x.end).collect();
    let w_a = tape.gather_rows(h, start_rows)?;
    let w_b = tape.gather_rows(h, end_rows)?;
    let pos = tape.param(tables.position);
    let p_a = tape.gather_rows(pos, heads.iter().map(|x| x.start).collect::<Vec<_>>())?;
    let p_b = tape.gather_rows(pos, heads.iter().map(|x| x.end).collect::<Vec<_>>())?;
    let types = tape.param(tables.type_embedding);
    let t = tape.gather_rows(types, heads.iter().map(|x| x.type_id).collect::<Vec<_>>())?;
    let a = tape.add(w_a, p_a)?;
    let b = tape.add(w_b, p_b)?;
    tape.concat_cols(&[a, b, t])
}

/// Tail start/end scores for every head: rows `[head k, position i]` of
/// `[heads * seg_len, N + 1]`, computed from `[w_i, w_i^t, w^h_k]`. All
/// relation columns are scored; callers mask columns outside `R′`.
pub fn score_tail<T: Float>(
    tape: &mut Tape<'_, T>,
    h: Var,
    h_tail: Var,
    head_feats: Var,
    heads: &[HeadRef],
    seg_len: usize,
    params: &TaggerParams,
) -> Result<(Var, Var)> {
    // W [w_i, w_i^t, w^h_k] splits into a token part shared by every head
    // and a head part shared by every position, so the concatenated
    // features never need to be built per (head, position)
    let d2 = tape.value(h).cols() + tape.value(h_tail).cols();
    let tokens = tape.concat_cols(&[h, h_tail])?;
    let token_rows: Vec<usize> = heads
        .iter()
        .flat_map(|x| (0..seg_len).map(move |i| x.sentence * seg_len + i))
        .collect();
    let head_rows: Vec<usize> = (0..heads.len()).flat_map(|k| std::iter::repeat(k).take(seg_len)).collect();
    let token_rows: Rc<[usize]> = token_rows.into();
    let head_rows: Rc<[usize]> = head_rows.into();
    let mut side = |weight: ParamId, bias: ParamId| -> Result<Var> {
        let w = tape.param(weight);
        let b = tape.param(bias);
        let width = tape.value(w).cols();
        let w_tok = tape.slice_cols(w, 0, d2)?;
        let w_head = tape.slice_cols(w, d2, width)?;
        let per_token = tape.matmul_nt(tokens, w_tok)?;
        let per_head = tape.linear(head_feats, w_head, b)?;
        let a = tape.gather_rows(per_token, token_rows.clone())?;
        let c = tape.gather_rows(per_head, head_rows.clone())?;
        tape.add(a, c)
    };
    let start = side(params.start_weight, params.start_bias)?;
    let end = side(params.end_weight, params.end_bias)?;
    Ok((start, end))
}
