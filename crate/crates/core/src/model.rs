//! The assembled extractor: frozen word vectors, encoder, the two auxiliary
//! attention branches and both taggers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{aux_features, AttentionParams};
use crate::data::{build_labels, Example, LabelTensors, Vocab};
use crate::encoder::{embed_input, encode, BlockOptions, Dropout, EncoderConfig, EncoderParams, SegmentLayout};
use crate::error::{Error, Result};
use crate::loss::{total_loss, Objective, PositionLabels, TaggerTerms};
use crate::numerics::{rng, Float, ParamStore, Tape, Tensor, Var};
use crate::tagger::{
    decode_spans, head_features, potential_relations, relation_mask, score_head, score_tail, EntityType, HeadFeatureTables, HeadRef,
    TaggerParams, ThresholdRule, Triple, TypeRelationMap,
};

const INIT_STREAM: u64 = 1;
/// Most sentences stacked into one forward pass during extraction.
const GROUP: usize = 16;

/// Ablation switches. Each one changes a single computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Every block uses dilation 1.
    pub no_dilation: bool,
    /// Blocks skip the sigmoid gate branch.
    pub no_gate: bool,
    /// Blocks skip the identity shortcut.
    pub no_residual: bool,
    /// Every head type scores every relation.
    pub no_mapping: bool,
    /// Sigmoid + fixed threshold instead of the learned AT class.
    pub global_threshold: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["no_dilation", "no_gate", "no_residual", "no_mapping", "global_threshold"];

    pub fn enable(&mut self, name: &str) -> Result<()> {
        let flag = match name {
            "no_dilation" => &mut self.no_dilation,
            "no_gate" => &mut self.no_gate,
            "no_residual" => &mut self.no_residual,
            "no_mapping" => &mut self.no_mapping,
            "global_threshold" => &mut self.global_threshold,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        *flag = true;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub type_dim: usize,
    pub attention_heads: usize,
    pub ablation: Ablation,
    /// Decision threshold of the global-threshold ablation.
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            type_dim: 64,
            attention_heads: 1,
            ablation: Ablation::default(),
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.type_dim == 0 {
            return Err(Error::InvalidArgument("type_dim must be positive".into()));
        }
        if self.attention_heads == 0 || self.encoder.hidden % self.attention_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} attention heads do not divide hidden size {}",
                self.attention_heads, self.encoder.hidden
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    /// Encoder settings after applying the dilation ablation.
    pub fn effective_encoder(&self) -> EncoderConfig {
        let mut e = self.encoder.clone();
        if self.ablation.no_dilation {
            e.dilation_rates = vec![1; e.layers];
        }
        e
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            gate: !self.ablation.no_gate,
            residual: !self.ablation.no_residual,
        }
    }

    pub fn threshold_rule(&self) -> ThresholdRule {
        if self.ablation.global_threshold {
            ThresholdRule::Global { tau: self.threshold }
        } else {
            ThresholdRule::Adaptive
        }
    }

    pub fn objective(&self) -> Objective {
        if self.ablation.global_threshold {
            Objective::GlobalThreshold
        } else {
            Objective::AdaptiveThreshold
        }
    }

    pub fn mapping_enabled(&self) -> bool {
        !self.ablation.no_mapping
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelIds {
    pub encoder: EncoderParams,
    pub attn_head: AttentionParams,
    pub attn_tail: AttentionParams,
    pub head: TaggerParams,
    pub tail: TaggerParams,
    pub tables: HeadFeatureTables,
}

/// Encoder outputs of one stacked batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub layout: SegmentLayout,
    /// Frozen word vectors gathered per row; a leaf of the tape.
    pub word_vectors: Var,
    pub h: Var,
    pub h_head: Var,
    pub h_tail: Var,
}

/// Per-sentence bookkeeping of the tail stage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractTrace {
    pub heads: usize,
    pub tail_passes: usize,
    /// Active columns (`|R′| + 1`) of every tail pass.
    pub active_columns: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub triples: Vec<Triple>,
    pub trace: ExtractTrace,
}

/// A training sentence with its token ids and aligned labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainItem {
    pub ids: Vec<usize>,
    pub labels: LabelTensors,
}

#[derive(Debug, Clone)]
pub struct Model<T: Float = f32> {
    config: ModelConfig,
    map: TypeRelationMap,
    vocab: Vocab,
    embeddings: Tensor<T>,
    params: ParamStore<T>,
    ids: ModelIds,
}

impl<T: Float> Model<T> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, map: TypeRelationMap, vocab: Vocab, embeddings: Tensor<f32>, seed: u64) -> Result<Self> {
        config.validate()?;
        let g = config.encoder.glove_dim;
        if embeddings.shape() != [vocab.len(), g] {
            return Err(Error::shape(
                "Model::new",
                format!("embeddings {:?} vs vocabulary of {} and width {g}", embeddings.shape(), vocab.len()),
            ));
        }
        let d = config.encoder.hidden;
        let mut r = rng::derived(seed, INIT_STREAM);
        let mut params = ParamStore::new();
        let encoder = EncoderParams::init(&mut params, &config.encoder, &mut r)?;
        let attn_head = AttentionParams::init(&mut params, "attn_head", d, &mut r)?;
        let attn_tail = AttentionParams::init(&mut params, "attn_tail", d, &mut r)?;
        let head = TaggerParams::init(&mut params, "tagger.head", EntityType::COUNT, 2 * d, &mut r)?;
        let tail = TaggerParams::init(&mut params, "tagger.tail", map.num_relations(), 4 * d + config.type_dim, &mut r)?;
        let tables = HeadFeatureTables::init(&mut params, config.type_dim, d, config.encoder.max_len, &mut r)?;
        Ok(Self {
            config,
            map,
            vocab,
            embeddings: embeddings.cast(),
            params,
            ids: ModelIds {
                encoder,
                attn_head,
                attn_tail,
                head,
                tail,
                tables,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn map(&self) -> &TypeRelationMap {
        &self.map
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn ids(&self) -> &ModelIds {
        &self.ids
    }

    /// Same model in another precision. Optimizer state is not carried.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            map: self.map.clone(),
            vocab: self.vocab.clone(),
            embeddings: self.embeddings.cast(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Token ids, cut to the configured maximum length.
    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        let max = self.config.encoder.max_len;
        if tokens.len() > max {
            log::warn!("sentence of {} tokens truncated to {max}", tokens.len());
        }
        self.vocab.encode(&tokens[..tokens.len().min(max)])
    }

    /// Runs the encoder and both attention branches over a batch of
    /// non-empty sentences.
    pub fn encode_batch<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &[&[usize]],
        dropout: Option<&mut R>,
    ) -> Result<Encoded> {
        let lens: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let layout = SegmentLayout::new(&lens)?;
        let g = self.embeddings.cols();
        let mut rows = vec![T::zero(); layout.rows() * g];
        for (b, sentence) in batch.iter().enumerate() {
            for (i, &id) in sentence.iter().enumerate() {
                if id >= self.embeddings.rows() {
                    return Err(Error::InvalidArgument(format!("token id {id} outside vocabulary")));
                }
                let r = layout.row(b, i);
                rows[r * g..(r + 1) * g].copy_from_slice(self.embeddings.row(id));
            }
        }
        let word_vectors = tape.constant(Tensor::new([layout.rows(), g], rows)?);
        let encoder_cfg = self.config.effective_encoder();
        let x = embed_input(tape, word_vectors, &self.ids.encoder, &layout, encoder_cfg.max_len)?;
        let mut drop = dropout.map(|rng| Dropout {
            rate: encoder_cfg.dropout,
            rng,
        });
        let h = encode(tape, x, &self.ids.encoder, &encoder_cfg, &layout, self.config.block_options(), drop.as_mut())?;
        let heads = self.config.attention_heads;
        let h_head = aux_features(tape, h, &self.ids.attn_head, heads, &layout)?;
        let h_tail = aux_features(tape, h, &self.ids.attn_tail, heads, &layout)?;
        Ok(Encoded {
            layout,
            word_vectors,
            h,
            h_head,
            h_tail,
        })
    }

    /// Full cascade over a batch of token-id sentences. Empty sentences
    /// yield empty extractions.
    ///
    /// Batches larger than `GROUP` sentences are sorted by length and run
    /// in chunks of `GROUP`, which keeps padding and working-set size small.
    pub fn extract_ids(&self, batch: &[Vec<usize>]) -> Result<Vec<Extraction>> {
        let mut out = vec![Extraction::default(); batch.len()];
        let mut live: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].is_empty()).collect();
        if live.len() > GROUP {
            live.sort_by_key(|&i| batch[i].len());
        }
        for group in live.chunks(GROUP) {
            self.extract_group(batch, group, &mut out)?;
        }
        Ok(out)
    }

    /// Runs the sentences `live` of `batch` as one stacked batch, writing
    /// into the matching slots of `out`.
    fn extract_group(&self, batch: &[Vec<usize>], live: &[usize], out: &mut [Extraction]) -> Result<()> {
        if live.is_empty() {
            return Ok(());
        }
        let sentences: Vec<&[usize]> = live.iter().map(|&i| batch[i].as_slice()).collect();
        let mut tape = Tape::inference(&self.params);
        let enc = self.encode_batch::<rng::SeededRng>(&mut tape, &sentences, None)?;
        let seg = enc.layout.seg_len;
        let rule = self.config.threshold_rule();

        let (hs, he) = score_head(&mut tape, enc.h, enc.h_head, &self.ids.head)?;
        let mut refs = Vec::new();
        let mut pending = Vec::new();
        for (b, &len) in enc.layout.lens.iter().enumerate() {
            let heads = decode_spans(tape.value(hs), tape.value(he), b * seg..b * seg + len, None, rule);
            out[live[b]].trace.heads = heads.len();
            for head in heads {
                let relations = potential_relations(head.class, &self.map, self.config.mapping_enabled())?;
                if relations.is_empty() {
                    continue;
                }
                refs.push(HeadRef {
                    sentence: b,
                    start: head.start,
                    end: head.end,
                    type_id: head.class,
                });
                pending.push((b, head, relations));
            }
        }
        if refs.is_empty() {
            return Ok(());
        }
        let feats = head_features(&mut tape, enc.h, &refs, seg, &self.ids.tables)?;
        let (ts, te) = score_tail(&mut tape, enc.h, enc.h_tail, feats, &refs, seg, &self.ids.tail)?;
        for (k, (b, head, relations)) in pending.into_iter().enumerate() {
            let mask = relation_mask(&relations, self.map.num_relations());
            let len = enc.layout.lens[b];
            let tails = decode_spans(tape.value(ts), tape.value(te), k * seg..k * seg + len, Some(&mask), rule);
            let e = &mut out[live[b]];
            e.trace.tail_passes += 1;
            e.trace.active_columns.push(relations.len() + 1);
            e.triples.extend(tails.into_iter().map(|tail| Triple {
                head,
                relation: tail.class,
                tail,
            }));
        }
        for &i in live {
            let e = &mut out[i];
            e.triples.sort_by(|a, b| a.key().cmp(&b.key()));
            e.triples.dedup_by_key(|t| t.key());
        }
        Ok(())
    }

    pub fn extract_tokens(&self, batch: &[Vec<String>]) -> Result<Vec<Extraction>> {
        let ids: Vec<Vec<usize>> = batch.iter().map(|t| self.encode_tokens(t)).collect();
        self.extract_ids(&ids)
    }

    /// Triples of a single tokenized sentence.
    pub fn extract(&self, tokens: &[String]) -> Result<Vec<Triple>> {
        Ok(self.extract_tokens(&[tokens.to_vec()])?.remove(0).triples)
    }

    pub fn prepare(&self, example: &Example) -> Result<TrainItem> {
        let mut ex = example.clone();
        let max = self.config.encoder.max_len;
        if ex.tokens.len() > max {
            ex.tokens.truncate(max);
            ex.triples.retain(|t| t.head.1 < max && t.tail.1 < max);
        }
        Ok(TrainItem {
            ids: self.vocab.encode(&ex.tokens),
            labels: build_labels(&ex, &self.map, self.config.mapping_enabled())?,
        })
    }

    /// Batch objective with teacher-forced tail passes for every gold head.
    /// Returns the loss and the encoder outputs it was computed from.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        items: &[&TrainItem],
        dropout: Option<&mut R>,
    ) -> Result<(Var, Encoded)> {
        let sentences: Vec<&[usize]> = items.iter().map(|it| it.ids.as_slice()).collect();
        let enc = self.encode_batch(tape, &sentences, dropout)?;
        let seg = enc.layout.seg_len;
        let (hs, he) = score_head(tape, enc.h, enc.h_head, &self.ids.head)?;

        let k = EntityType::COUNT;
        let n_rel = self.map.num_relations();
        let (mut head_s, mut head_e) = (PositionLabels::new(k), PositionLabels::new(k));
        let (mut tail_s, mut tail_e) = (PositionLabels::new(n_rel), PositionLabels::new(n_rel));
        let mut refs = Vec::new();
        for (b, item) in items.iter().enumerate() {
            let l = &item.labels;
            for pos in 0..seg {
                if pos < l.len {
                    head_s.push(l.head_start[pos].clone(), None)?;
                    head_e.push(l.head_end[pos].clone(), None)?;
                } else {
                    head_s.push_ignored();
                    head_e.push_ignored();
                }
            }
            for pass in &l.tails {
                refs.push(HeadRef {
                    sentence: b,
                    start: pass.head.0,
                    end: pass.head.1,
                    type_id: pass.head_type.index(),
                });
                for pos in 0..seg {
                    if pos < l.len {
                        tail_s.push(pass.start[pos].clone(), Some(pass.active.clone()))?;
                        tail_e.push(pass.end[pos].clone(), Some(pass.active.clone()))?;
                    } else {
                        tail_s.push_ignored();
                        tail_e.push_ignored();
                    }
                }
            }
        }
        let head_terms = TaggerTerms {
            start: hs,
            end: he,
            start_labels: &head_s,
            end_labels: &head_e,
        };
        let tail_vars = if refs.is_empty() {
            None
        } else {
            let feats = head_features(tape, enc.h, &refs, seg, &self.ids.tables)?;
            Some(score_tail(tape, enc.h, enc.h_tail, feats, &refs, seg, &self.ids.tail)?)
        };
        let tail_terms = tail_vars.map(|(ts, te)| TaggerTerms {
            start: ts,
            end: te,
            start_labels: &tail_s,
            end_labels: &tail_e,
        });
        let loss = total_loss(tape, &head_terms, tail_terms.as_ref(), items.len(), self.config.objective())?;
        Ok((loss, enc))
    }

    /// Gradient of the objective for `example` with respect to each
    /// token's frozen word vector, as `[n, glove_dim]`.
    pub fn input_gradients(&self, example: &Example) -> Result<Tensor<T>> {
        let item = self.prepare(example)?;
        if item.ids.is_empty() {
            return Ok(Tensor::zeros([0, self.embeddings.cols()]));
        }
        let mut tape = Tape::new(&self.params);
        let (loss, enc) = self.batch_loss::<rng::SeededRng>(&mut tape, &[&item], None)?;
        let grads = tape.backward(loss)?;
        let g = grads.wrt(enc.word_vectors).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(enc.word_vectors).shape()));
        Ok(g)
    }

    /// Replaces parameter values by name; every parameter must be given
    /// exactly once with its current shape.
    pub fn load_state(&mut self, records: impl IntoIterator<Item = (String, Tensor<f32>)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in records {
            let id = self
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name:?}")))?;
            let p = self.params.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.cast();
            seen[id.0] = true;
        }
        if let Some(missing) = self.params.names().zip(&seen).find(|(_, &s)| !s).map(|(n, _)| n.to_string()) {
            return Err(Error::Checkpoint(format!("missing parameter {missing:?}")));
        }
        Ok(())
    }
}

/// L2 norm of every row.
pub(crate) fn row_norms<T: Float>(t: &Tensor<T>) -> Vec<f64> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect()
}
