use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{evaluate, Example, Glove, MatchMode, TripleKey, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{rng, AdamW, ParamStore, Tape};
use crate::runtime::LinearSchedule;
use crate::tagger::TypeRelationMap;

const SPLIT_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction held out for model selection; 0 trains on everything and
    /// keeps the final weights.
    pub val_split: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            warmup_fraction: 0.06,
            weight_decay: 0.01,
            seed: 42,
            val_split: 0.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidArgument(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if !(0.0..1.0).contains(&self.val_split) {
            return Err(Error::InvalidArgument(format!("val_split {} outside [0, 1)", self.val_split)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    /// Partial-match F1 on the validation split, or on the training set
    /// when there is none.
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
    /// Epoch whose weights the model holds on return.
    pub selected_epoch: usize,
}

/// Builds the vocabulary and a freshly initialised model for `corpus`.
pub fn init_model(corpus: &[Example], map: &TypeRelationMap, glove: &Glove, config: &TrainConfig) -> Result<Model> {
    let mut model_cfg = config.model.clone();
    model_cfg.encoder.glove_dim = glove.dim();
    let vocab = Vocab::build(corpus, glove);
    let embeddings = vocab.embedding_matrix(glove);
    Model::new(model_cfg, map.clone(), vocab, embeddings, config.seed)
}

/// Partial-match (or exact) scores of `model` on `examples`.
pub fn evaluate_model(model: &Model, examples: &[Example], mode: MatchMode, batch_size: usize) -> Result<crate::data::EvalReport> {
    let mut pred = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let tokens: Vec<Vec<String>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        for ex in model.extract_tokens(&tokens)? {
            pred.push(ex.triples.iter().map(|t| TripleKey::from_triple(t, model.map())).collect());
        }
    }
    let gold: Vec<Vec<TripleKey>> = examples.iter().map(|e| e.triples.iter().map(TripleKey::from).collect()).collect();
    evaluate(&pred, &gold, mode)
}

/// Splits off `fraction` of the examples (at least one when positive) with
/// a seeded permutation. Returns `(train, validation)`.
pub fn split_validation(examples: &[Example], fraction: f64, seed: u64) -> (Vec<Example>, Vec<Example>) {
    if fraction <= 0.0 || examples.len() < 2 {
        return (examples.to_vec(), Vec::new());
    }
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut rng::derived(seed, SPLIT_STREAM));
    let n_val = ((examples.len() as f64 * fraction).ceil() as usize).clamp(1, examples.len() - 1);
    let (val, train) = idx.split_at(n_val);
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| examples[i].clone()).collect()
    };
    (pick(train), pick(val))
}

/// Mini-batch AdamW training with the warmup/decay schedule.
///
/// `on_epoch` sees each epoch's metrics and the current model; returning
/// `ControlFlow::Break` ends training after that epoch.
pub fn train(
    model: &mut Model,
    examples: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model) -> ControlFlow<()>,
) -> Result<TrainReport> {
    config.validate()?;
    let (train_set, val_set) = split_validation(examples, config.val_split, config.seed);
    let items = train_set
        .iter()
        .filter(|e| !e.is_empty())
        .map(|e| model.prepare(e))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    let steps_per_epoch = items.len().div_ceil(config.batch_size);
    let schedule = LinearSchedule::new(config.lr, config.epochs * steps_per_epoch, config.warmup_fraction);
    let optimizer = AdamW::with_weight_decay(config.weight_decay);
    let mut shuffle_rng = rng::derived(config.seed, SHUFFLE_STREAM);
    let mut dropout_rng = rng::derived(config.seed, DROPOUT_STREAM);
    let eval_set = if val_set.is_empty() { &train_set } else { &val_set };

    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut metrics = Vec::new();
    let mut step = 0;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            let batch: Vec<_> = batch.iter().map(|&i| &items[i]).collect();
            let grads = {
                let mut tape = Tape::new(model.params());
                let (loss, _) = model.batch_loss(&mut tape, &batch, Some(&mut dropout_rng))?;
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged { step, loss: value });
                }
                loss_sum += value;
                tape.backward(loss)?
            };
            lr = schedule.lr(step);
            let store = model.params_mut();
            store.zero_grad();
            grads.accumulate_into(store);
            optimizer.scheduled_step(store, lr)?;
            step += 1;
        }
        let f1 = evaluate_model(model, eval_set, MatchMode::Partial, config.batch_size)?.f1;
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            lr,
            f1,
        };
        log::info!("epoch {epoch}: loss {:.5} lr {:.3e} f1 {:.4}", m.loss, m.lr, m.f1);
        metrics.push(m);
        if !val_set.is_empty() && best.as_ref().map_or(true, |b| f1 > b.0) {
            best = Some((f1, epoch, model.params().clone()));
        }
        if on_epoch(&m, model).is_break() {
            break;
        }
    }
    let selected_epoch = match best {
        Some((_, epoch, params)) => {
            *model.params_mut() = params;
            epoch
        }
        None => metrics.len(),
    };
    Ok(TrainReport {
        metrics,
        steps: step,
        selected_epoch,
    })
}
