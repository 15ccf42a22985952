use std::path::Path;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::checkpoint::{decode, encode, record_text, text_record};
use crate::numerics::Tensor;
use crate::runtime::atomic_write;
use crate::tagger::TypeRelationMap;

const CONFIG: &str = "meta.config";
const VOCAB: &str = "meta.vocab";
const MAP: &str = "meta.map";
const EMBEDDINGS: &str = "frozen.embeddings";

/// Every record of a self-describing checkpoint: metadata as JSON text
/// records, the frozen embedding table, then the parameters in order.
pub fn checkpoint_records(model: &Model) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut records = vec![
        (CONFIG.to_string(), text_record(&serde_json::to_string(model.config())?)),
        (VOCAB.to_string(), text_record(&serde_json::to_string(model.vocab().tokens())?)),
        (MAP.to_string(), text_record(&model.map().to_json().to_string())),
        (EMBEDDINGS.to_string(), model.embeddings().clone()),
    ];
    records.extend(model.params().iter().map(|p| (p.name().to_string(), p.value.clone())));
    Ok(records)
}

pub fn model_from_records(records: Vec<(String, Tensor<f32>)>) -> Result<Model> {
    let meta = |name: &str, records: &mut Vec<(String, Tensor<f32>)>| -> Result<Tensor<f32>> {
        let pos = records
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name:?}")))?;
        Ok(records.remove(pos).1)
    };
    let mut records = records;
    let config: ModelConfig = serde_json::from_str(&record_text(&meta(CONFIG, &mut records)?)?)
        .map_err(|e| Error::Checkpoint(format!("bad config record: {e}")))?;
    let tokens: Vec<String> = serde_json::from_str(&record_text(&meta(VOCAB, &mut records)?)?)
        .map_err(|e| Error::Checkpoint(format!("bad vocabulary record: {e}")))?;
    let map = TypeRelationMap::from_json_str(&record_text(&meta(MAP, &mut records)?)?)?;
    let embeddings = meta(EMBEDDINGS, &mut records)?;
    let vocab = Vocab::from_tokens(tokens)?;
    let mut model = Model::new(config, map, vocab, embeddings, 0)?;
    model.load_state(records)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode(&checkpoint_records(model)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_records(decode(&bytes)?)
}
