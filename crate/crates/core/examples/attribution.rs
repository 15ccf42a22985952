//! Parameter budget by component and per-token gradient attribution for
//! one sentence.
//!
//! `cargo run --release --example attribution -- ["sentence"]`

use std::ops::ControlFlow;

use fastre::data::{sample, tokenize};
use fastre::runtime::{count_params, gradient_attribution, init_model, train, TrainConfig};

fn main() -> fastre::Result<()> {
    let text = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "frank moore works for initech and founded umbrella group .".into());
    let corpus = sample::corpus()?;
    let config = TrainConfig { epochs: 60, ..TrainConfig::default() };
    let mut model = init_model(&corpus.examples, &sample::map(), &sample::glove(), &config)?;
    train(&mut model, &corpus.examples, &config, |_, _| ControlFlow::Continue(()))?;

    let counts = count_params(model.params());
    for (group, n) in &counts.groups {
        println!("{group:<10} {n:>9}");
    }
    println!("{:<10} {:>9}\n", "total", counts.total);

    let tokens = tokenize(&text);
    let norms = gradient_attribution(&model, &tokens, None)?;
    for (tok, n) in tokens.iter().zip(&norms) {
        println!("{tok:<12} {n:.3} {}", "#".repeat((n * 40.0).round() as usize));
    }
    Ok(())
}
