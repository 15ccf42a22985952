#![allow(dead_code)]

use fastre::data::{sample, Example};
use fastre::encoder::EncoderConfig;
use fastre::model::{Model, ModelConfig};
use fastre::runtime::{init_model, TrainConfig};

pub fn examples() -> Vec<Example> {
    sample::corpus().unwrap().examples
}

/// A narrow model so training tests finish in seconds.
pub fn small_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        seed,
        model: ModelConfig {
            encoder: EncoderConfig {
                hidden: 16,
                layers: 2,
                dilation_rates: vec![1, 2],
                ..EncoderConfig::default()
            },
            type_dim: 4,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub fn fresh_model(config: &TrainConfig) -> Model {
    init_model(&examples(), &sample::map(), &sample::glove(), config).unwrap()
}
