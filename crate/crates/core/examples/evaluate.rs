//! Holds out part of the sample, trains on the rest and scores both
//! splits with partial and exact matching.
//!
//! `cargo run --release --example evaluate -- [epochs]`

use std::ops::ControlFlow;

use fastre::data::{sample, MatchMode};
use fastre::runtime::{evaluate_model, init_model, split_validation, train, TrainConfig};

fn main() -> fastre::Result<()> {
    let epochs = std::env::args().nth(1).map_or(60, |a| a.parse().expect("epochs must be an integer"));
    let corpus = sample::corpus()?;
    let (train_set, held_out) = split_validation(&corpus.examples, 0.2, 42);
    let config = TrainConfig { epochs, ..TrainConfig::default() };
    let mut model = init_model(&corpus.examples, &sample::map(), &sample::glove(), &config)?;
    train(&mut model, &train_set, &config, |_, _| ControlFlow::Continue(()))?;

    println!("{:<10} {:<8} {:>6} {:>6} {:>6}  tp/fp/fn", "split", "match", "P", "R", "F1");
    for (name, set) in [("train", &train_set), ("held-out", &held_out)] {
        for mode in [MatchMode::Partial, MatchMode::Exact] {
            let r = evaluate_model(&model, set, mode, 32)?;
            println!(
                "{name:<10} {:<8} {:>6.3} {:>6.3} {:>6.3}  {}/{}/{}",
                format!("{mode:?}").to_lowercase(),
                r.precision,
                r.recall,
                r.f1,
                r.tp,
                r.fp,
                r.fn_
            );
        }
    }
    Ok(())
}
