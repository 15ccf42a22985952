//! Trains on the bundled sample corpus and reports per-epoch metrics.
//!
//! `cargo run --release --example train_sample -- [epochs] [output.fre]`

use std::ops::ControlFlow;

use fastre::data::sample;
use fastre::runtime::{init_model, save_checkpoint, train, TrainConfig};

fn main() -> fastre::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(Ok(40), |a| a.parse()).expect("epochs must be an integer");
    let out = args.next();

    let corpus = sample::corpus()?;
    let config = TrainConfig { epochs, ..TrainConfig::default() };
    let mut model = init_model(&corpus.examples, &sample::map(), &sample::glove(), &config)?;
    let started = std::time::Instant::now();
    let report = train(&mut model, &corpus.examples, &config, |m, _| {
        println!("epoch {:>3}  loss {:>9.4}  lr {:.2e}  train F1 {:.3}", m.epoch, m.loss, m.lr, m.f1);
        ControlFlow::Continue(())
    })?;
    println!("{} steps in {:.1}s", report.steps, started.elapsed().as_secs_f64());
    if let Some(path) = out {
        save_checkpoint(&model, &path)?;
        println!("saved {path}");
    }
    Ok(())
}
