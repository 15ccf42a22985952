//! Inference latency per batch size and the cost of one training step.
//!
//! `cargo run --release --example benchmark -- [sentences] [threads]`

use fastre::data::{sample, Example};
use fastre::runtime::{benchmark, init_model, BenchOptions, TrainConfig};

fn main() -> fastre::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(500, |a| a.parse().expect("sentence count must be an integer"));
    let threads: usize = args.next().map_or(1, |a| a.parse().expect("thread count must be an integer"));

    let corpus = sample::corpus()?;
    let model = init_model(&corpus.examples, &sample::map(), &sample::glove(), &TrainConfig::default())?;
    let sentences: Vec<Example> = sample::sentences(n)?
        .into_iter()
        .map(|tokens| Example { tokens, triples: Vec::new() })
        .collect();
    let report = benchmark(&model, &sentences, &BenchOptions { threads, ..BenchOptions::default() })?;

    println!("{} trainable parameters, {} sentences", report.param_count, n);
    println!("{:>6} {:>12} {:>10}", "batch", "ms/sentence", "total s");
    for e in &report.single_thread {
        println!("{:>6} {:>12.3} {:>10.3}", e.batch_size, e.ms_per_instance, e.total_seconds);
    }
    for e in &report.parallel {
        println!("{:>6} {:>12.3} {:>10.3}  ({} threads)", e.batch_size, e.ms_per_instance, e.total_seconds, report.threads);
    }
    if let Some(ms) = report.iteration_ms {
        println!("one training step of 32 sentences: {ms:.1} ms");
    }
    Ok(())
}
