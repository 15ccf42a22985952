//! Trains the full model and each single-switch ablation on the sample
//! corpus and reports when each first fits it perfectly.
//!
//! `cargo run --release --example ablations -- [max_epochs]`

use std::ops::ControlFlow;

use fastre::data::sample;
use fastre::model::Ablation;
use fastre::runtime::{count_params, init_model, train, TrainConfig};

fn main() -> fastre::Result<()> {
    let max_epochs = std::env::args().nth(1).map_or(100, |a| a.parse().expect("epochs must be an integer"));
    let corpus = sample::corpus()?;
    println!("{:<18} {:>9} {:>12} {:>9}", "variant", "params", "first F1=1", "last F1");
    for name in std::iter::once("full").chain(Ablation::NAMES) {
        let mut config = TrainConfig { epochs: max_epochs, ..TrainConfig::default() };
        if name != "full" {
            config.model.ablation.enable(name)?;
        }
        let mut model = init_model(&corpus.examples, &sample::map(), &sample::glove(), &config)?;
        let mut first = None;
        let report = train(&mut model, &corpus.examples, &config, |m, _| {
            if m.f1 == 1.0 && first.is_none() {
                first = Some(m.epoch);
            }
            ControlFlow::Continue(())
        })?;
        let last = report.metrics.last().map_or(0.0, |m| m.f1);
        let first = first.map_or("-".to_string(), |e| e.to_string());
        println!("{name:<18} {:>9} {first:>12} {last:>9.3}", count_params(model.params()).total);
    }
    Ok(())
}
