//! Corpus ingestion, vocabulary, label alignment and scoring.

mod corpus;
mod embeddings;
mod eval;
mod labels;

pub use corpus::{load_corpus, load_texts, parse_corpus, tokenize, Corpus, Example, GoldTriple, LoadMode, LoadStats, MAX_TOKENS};
pub use embeddings::{Glove, Vocab, UNK};
pub use eval::{evaluate, evaluate_partial, f1_score, sentence_counts, EvalReport, MatchMode, TripleKey};
pub use labels::{build_labels, LabelTensors, TailPass};

/// The bundled 60-sentence corpus, its type-relation map and a small
/// matching embedding file.
pub mod sample {
    use std::path::Path;

    use super::{parse_corpus, Corpus, Glove, LoadMode, MAX_TOKENS};
    use crate::error::Result;
    use crate::tagger::TypeRelationMap;

    pub const CORPUS_JSONL: &str = include_str!("../../data/sample_corpus.jsonl");
    pub const MAP_JSON: &str = include_str!("../../data/sample_map.json");
    pub const GLOVE_TXT: &str = include_str!("../../data/sample_glove.txt");

    pub fn corpus() -> Result<Corpus> {
        parse_corpus(CORPUS_JSONL, Path::new("sample_corpus.jsonl"), LoadMode::FailFast, MAX_TOKENS)
    }

    pub fn map() -> TypeRelationMap {
        TypeRelationMap::from_json_str(MAP_JSON).expect("bundled map is valid")
    }

    pub fn glove() -> Glove {
        Glove::parse(GLOVE_TXT, Path::new("sample_glove.txt")).expect("bundled embeddings are valid")
    }

    /// `n` sentences drawn cyclically from the sample corpus.
    pub fn sentences(n: usize) -> Result<Vec<Vec<String>>> {
        let c = corpus()?;
        Ok(c.examples.iter().map(|e| e.tokens.clone()).cycle().take(n).collect())
    }

}
