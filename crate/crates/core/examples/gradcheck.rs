//! Finite-difference check of every parameter gradient of a small model,
//! in double precision.
//!
//! `cargo run --release --example gradcheck`

use fastre::data::{sample, Vocab};
use fastre::encoder::EncoderConfig;
use fastre::model::{Model, ModelConfig};
use fastre::numerics::gradcheck::check_params;
use fastre::numerics::rng::SeededRng;

fn main() -> fastre::Result<()> {
    let glove = sample::glove();
    let corpus = sample::corpus()?.examples;
    let vocab = Vocab::build(&corpus, &glove);
    let embeddings = vocab.embedding_matrix(&glove);
    let config = ModelConfig {
        encoder: EncoderConfig {
            hidden: 8,
            layers: 3,
            dilation_rates: vec![1, 2, 4],
            glove_dim: glove.dim(),
            ..EncoderConfig::default()
        },
        type_dim: 4,
        ..ModelConfig::default()
    };
    let model: Model<f64> = Model::new(config, sample::map(), vocab, embeddings, 7)?;
    let items = corpus[..4].iter().map(|e| model.prepare(e)).collect::<fastre::Result<Vec<_>>>()?;
    let batch: Vec<_> = items.iter().collect();

    let report = check_params(model.params(), 8, |tape| {
        model.batch_loss::<SeededRng>(tape, &batch, None).map(|(loss, _)| loss)
    })?;
    println!(
        "{} entries across {} tensors, max relative error {:.2e} ({})",
        report.checked,
        model.params().len(),
        report.max_relative_error,
        if report.passes(1e-4) { "ok" } else { "FAILED" }
    );
    Ok(())
}
