//! Extracts triples from free text with a trained checkpoint. Without a
//! checkpoint a model is first fitted to the bundled sample.
//!
//! `cargo run --release --example extract -- [model.fre] ["sentence" ...]`

use std::ops::ControlFlow;

use fastre::data::{sample, tokenize};
use fastre::runtime::{init_model, load_checkpoint, train, TrainConfig};

fn main() -> fastre::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, texts) = match args.first() {
        Some(path) if path.ends_with(".fre") => (load_checkpoint(path)?, args[1..].to_vec()),
        _ => {
            let corpus = sample::corpus()?;
            let config = TrainConfig { epochs: 60, ..TrainConfig::default() };
            let mut model = init_model(&corpus.examples, &sample::map(), &sample::glove(), &config)?;
            train(&mut model, &corpus.examples, &config, |_, _| ControlFlow::Continue(()))?;
            (model, args)
        }
    };
    let texts = if texts.is_empty() {
        vec![
            "alice smith works for initech and founded umbrella group .".to_string(),
            "globex acquired initech last year .".to_string(),
        ]
    } else {
        texts
    };

    for text in &texts {
        let tokens = tokenize(text);
        println!("{text}");
        for t in model.extract(&tokens)? {
            println!(
                "  ({} : {}) --{}--> ({})  margin {:.2}",
                tokens[t.head.start..=t.head.end].join(" "),
                t.head_type(),
                model.map().relation_name(t.relation),
                tokens[t.tail.start..=t.tail.end].join(" "),
                t.head.score.min(t.tail.score),
            );
        }
    }
    Ok(())
}
