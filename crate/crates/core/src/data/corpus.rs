use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tagger::EntityType;

/// Sentences are cut to this many tokens unless configured otherwise.
pub const MAX_TOKENS: usize = 100;

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GoldTriple {
    /// Inclusive token span.
    pub head: (usize, usize),
    pub head_type: EntityType,
    pub relation: String,
    pub tail: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<String>,
    pub triples: Vec<GoldTriple>,
}

impl Example {
    /// Unlabelled sentence, truncated to `max_len` tokens.
    pub fn from_text(text: &str, max_len: usize) -> Self {
        let mut tokens = tokenize(text);
        tokens.truncate(max_len);
        Self { tokens, triples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Stop at the first bad line.
    #[default]
    FailFast,
    /// Skip bad lines, logging and counting them.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LoadStats {
    pub lines: usize,
    pub skipped_lines: usize,
    /// Triples whose spans fall past the truncation boundary.
    pub dropped_triples: usize,
    pub truncated_sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub stats: LoadStats,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTriple {
    head: [usize; 2],
    head_type: String,
    relation: String,
    tail: [usize; 2],
}

#[derive(Deserialize)]
struct RawLine {
    text: String,
    #[serde(default)]
    triples: Vec<RawTriple>,
}

fn span(raw: [usize; 2], n: usize, what: &str) -> std::result::Result<(usize, usize), String> {
    let [s, e] = raw;
    if s > e || e >= n {
        return Err(format!("{what} span [{s}, {e}] is invalid for a sentence of {n} tokens"));
    }
    Ok((s, e))
}

fn parse_line(line: &str, max_len: usize, stats: &mut LoadStats) -> std::result::Result<Example, String> {
    let raw: RawLine = serde_json::from_str(line).map_err(|e| format!("malformed JSON: {e}"))?;
    let mut tokens = tokenize(&raw.text);
    let n = tokens.len();
    if n == 0 {
        return Err("text has no tokens".into());
    }
    let mut triples = BTreeSet::new();
    let mut dropped = 0;
    for t in raw.triples {
        let head = span(t.head, n, "head")?;
        let tail = span(t.tail, n, "tail")?;
        let head_type = t.head_type.parse::<EntityType>().map_err(|e| e.to_string())?;
        if t.relation.is_empty() {
            return Err("empty relation name".into());
        }
        if head.1 >= max_len || tail.1 >= max_len {
            dropped += 1;
            continue;
        }
        triples.insert(GoldTriple {
            head,
            head_type,
            relation: t.relation,
            tail,
        });
    }
    if n > max_len {
        tokens.truncate(max_len);
        stats.truncated_sentences += 1;
    }
    stats.dropped_triples += dropped;
    Ok(Example {
        tokens,
        triples: triples.into_iter().collect(),
    })
}

/// Parses JSONL corpus text; `origin` names the source in errors.
pub fn parse_corpus(text: &str, origin: &Path, mode: LoadMode, max_len: usize) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        corpus.stats.lines += 1;
        let mut line_stats = LoadStats::default();
        match parse_line(line, max_len, &mut line_stats) {
            Ok(ex) => {
                corpus.stats.dropped_triples += line_stats.dropped_triples;
                corpus.stats.truncated_sentences += line_stats.truncated_sentences;
                corpus.examples.push(ex);
            }
            Err(message) => {
                let err = Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message,
                };
                match mode {
                    LoadMode::FailFast => return Err(err),
                    LoadMode::Skip => {
                        log::warn!("skipping {err}");
                        corpus.stats.skipped_lines += 1;
                    }
                }
            }
        }
    }
    if corpus.stats.dropped_triples > 0 {
        log::warn!(
            "{}: dropped {} triples beyond the {max_len}-token limit",
            origin.display(),
            corpus.stats.dropped_triples
        );
    }
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>, mode: LoadMode, max_len: usize) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path, mode, max_len)
}

/// Reads one sentence per JSONL line from objects carrying a `"text"`
/// field; any labels are ignored.
pub fn load_texts(path: impl AsRef<Path>) -> Result<Vec<String>> {
    #[derive(Deserialize)]
    struct Line {
        text: String,
    }
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: PathBuf::from(path),
            line: i + 1,
            message: format!("expected an object with a \"text\" string: {e}"),
        })?;
        out.push(parsed.text);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, mode: LoadMode, max_len: usize) -> Result<Corpus> {
        parse_corpus(text, Path::new("test.jsonl"), mode, max_len)
    }

    #[test]
    fn empty_input_gives_empty_corpus() {
        let c = parse("", LoadMode::FailFast, MAX_TOKENS).unwrap();
        assert!(c.examples.is_empty());
        assert_eq!(c.stats, LoadStats::default());
    }

    #[test]
    fn one_valid_line() {
        let line = r#"{"text": "Ann Lee works for Acme .", "triples": [{"head": [0, 1], "head_type": "PER", "relation": "works_for", "tail": [4, 4]}]}"#;
        let c = parse(line, LoadMode::FailFast, MAX_TOKENS).unwrap();
        assert_eq!(c.examples.len(), 1);
        let ex = &c.examples[0];
        assert_eq!(ex.tokens, ["ann", "lee", "works", "for", "acme", "."]);
        assert_eq!(
            ex.triples,
            vec![GoldTriple {
                head: (0, 1),
                head_type: EntityType::Per,
                relation: "works_for".into(),
                tail: (4, 4)
            }]
        );
    }

    #[test]
    fn triple_past_truncation_is_dropped_and_counted() {
        let line = r#"{"text": "a b c d e f", "triples": [{"head": [0, 0], "head_type": "ORG", "relation": "r", "tail": [5, 5]}, {"head": [0, 0], "head_type": "ORG", "relation": "r", "tail": [2, 3]}]}"#;
        let c = parse(line, LoadMode::FailFast, 4).unwrap();
        assert_eq!(c.stats.dropped_triples, 1);
        assert_eq!(c.stats.truncated_sentences, 1);
        assert_eq!(c.examples[0].tokens.len(), 4);
        assert_eq!(c.examples[0].triples.len(), 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let good = r#"{"text": "a b", "triples": []}"#;
        let bad_span = r#"{"text": "a b", "triples": [{"head": [0, 2], "head_type": "PER", "relation": "r", "tail": [0, 0]}]}"#;
        let bad_type = r#"{"text": "a b", "triples": [{"head": [0, 0], "head_type": "DOG", "relation": "r", "tail": [1, 1]}]}"#;
        for (bad, needle) in [(bad_span, "head span"), (bad_type, "DOG"), ("{not json", "malformed")] {
            let text = format!("{good}\n\n{bad}\n");
            match parse(&text, LoadMode::FailFast, MAX_TOKENS) {
                Err(Error::Parse { line, message, .. }) => {
                    assert_eq!(line, 3);
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("expected parse error, got {other:?}"),
            }
            let skipped = parse(&text, LoadMode::Skip, MAX_TOKENS).unwrap();
            assert_eq!(skipped.examples.len(), 1);
            assert_eq!(skipped.stats.skipped_lines, 1);
        }
    }

    #[test]
    fn duplicate_triples_collapse() {
        let t = r#"{"head": [0, 0], "head_type": "PER", "relation": "r", "tail": [1, 1]}"#;
        let line = format!(r#"{{"text": "a b", "triples": [{t}, {t}]}}"#);
        assert_eq!(parse(&line, LoadMode::FailFast, MAX_TOKENS).unwrap().examples[0].triples.len(), 1);
    }
}
