//! Loads a corpus, word vectors and a type-relation map, then shows the
//! vocabulary and the tagging targets built for one sentence.
//!
//! `cargo run --release --example data_pipeline -- [corpus.jsonl map.json glove.txt]`

use fastre::data::{build_labels, load_corpus, sample, Glove, LoadMode, Vocab};
use fastre::tagger::{EntityType, TypeRelationMap};

fn main() -> fastre::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (corpus, map, glove) = if let [c, m, g] = &args[..] {
        (load_corpus(c, LoadMode::Skip, 100)?, TypeRelationMap::load(m)?, Glove::load(g)?)
    } else {
        (sample::corpus()?, sample::map(), sample::glove())
    };
    println!("{} sentences, load stats {:?}", corpus.examples.len(), corpus.stats);
    let vocab = Vocab::build(&corpus.examples, &glove);
    println!("{} word vectors of width {}, vocabulary of {}", glove.len(), glove.dim(), vocab.len());
    for ty in EntityType::ALL {
        let names: Vec<&str> = map.forward(ty).iter().map(|&r| map.relation_name(r)).collect();
        println!("  {ty} heads may take {names:?}");
    }

    let Some(ex) = corpus.examples.iter().max_by_key(|e| e.triples.len()) else {
        return Ok(());
    };
    let labels = build_labels(ex, &map, true)?;
    println!("\n{}", ex.tokens.join(" "));
    for (i, tok) in ex.tokens.iter().enumerate() {
        let types = |ids: &[usize]| ids.iter().map(|&k| EntityType::ALL[k].as_str()).collect::<Vec<_>>().join(",");
        println!("  {i:>2} {tok:<12} head start [{}] end [{}]", types(&labels.head_start[i]), types(&labels.head_end[i]));
    }
    for pass in &labels.tails {
        println!("  tail pass for head {:?} ({})", pass.head, pass.head_type);
        for (i, (s, e)) in pass.start.iter().zip(&pass.end).enumerate() {
            let rel = |ids: &[usize]| ids.iter().map(|&r| map.relation_name(r)).collect::<Vec<_>>().join(",");
            if !s.is_empty() || !e.is_empty() {
                println!("     {i:>2} start [{}] end [{}]", rel(s), rel(e));
            }
        }
    }
    Ok(())
}
