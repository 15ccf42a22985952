use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const UNK: &str = "<unk>";

/// Word vectors in the GloVe text format: `word v_1 ... v_D` per line.
#[derive(Debug, Clone, PartialEq)]
pub struct Glove {
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Vec<f32>,
    /// Lines ignored because of a bad field count or number.
    pub skipped_lines: usize,
}

impl Glove {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut dim = 0;
        let mut index = HashMap::new();
        let mut vectors = Vec::new();
        let mut skipped = 0;
        for line in text.lines() {
            let mut fields = line.split(' ').filter(|f| !f.is_empty());
            let Some(word) = fields.next() else { continue };
            let values: std::result::Result<Vec<f32>, _> = fields.map(str::parse::<f32>).collect();
            let values = match values {
                Ok(v) if !v.is_empty() && (dim == 0 || v.len() == dim) => v,
                _ => {
                    skipped += 1;
                    continue;
                }
            };
            dim = values.len();
            if index.contains_key(word) {
                skipped += 1;
                continue;
            }
            index.insert(word.to_string(), index.len());
            vectors.extend(values);
        }
        if index.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 0,
                message: "no usable word vectors".into(),
            });
        }
        if skipped > 0 {
            log::warn!("{}: skipped {skipped} malformed embedding lines", origin.display());
        }
        Ok(Self {
            dim,
            index,
            vectors,
            skipped_lines: skipped,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn vector(&self, word: &str) -> Option<&[f32]> {
        self.index.get(word).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Mean of every vector, used for out-of-vocabulary tokens.
    pub fn mean(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for row in self.vectors.chunks(self.dim) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        acc.iter().map(|&a| (a / self.len() as f64) as f32).collect()
    }
}

/// Token ids: `UNK` is 0, then known tokens in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let set: BTreeSet<String> = tokens.into_iter().filter(|t| t != UNK).collect();
        let tokens: Vec<String> = std::iter::once(UNK.to_string()).chain(set).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }

    /// Corpus tokens that have a word vector, plus `UNK`.
    pub fn build(corpus: &[Example], glove: &Glove) -> Self {
        let known = corpus.iter().flat_map(|ex| ex.tokens.iter()).filter(|t| glove.contains(t)).cloned();
        Self::from_tokens(known).expect("token set is always valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Frozen `[V, D]` embedding table; row 0 is the mean vector.
    pub fn embedding_matrix(&self, glove: &Glove) -> Tensor<f32> {
        let mut data = glove.mean();
        for t in &self.tokens[1..] {
            data.extend_from_slice(glove.vector(t).expect("vocab tokens come from the embedding file"));
        }
        Tensor::new([self.len(), glove.dim()], data).expect("rows have the embedding width")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glove() -> Glove {
        Glove::parse("b 1 2\na 3 4\nbad 1\nc x y\na 9 9\n\n", Path::new("g.txt")).unwrap()
    }

    #[test]
    fn parses_and_skips_bad_lines() {
        let g = glove();
        assert_eq!((g.dim(), g.len(), g.skipped_lines), (2, 2, 3));
        assert_eq!(g.vector("a"), Some(&[3.0, 4.0][..]));
        assert_eq!(g.mean(), vec![2.0, 3.0]);
        assert!(Glove::parse("only words\n", Path::new("g.txt")).is_err());
    }

    #[test]
    fn vocab_ids_and_unknowns() {
        let g = glove();
        let empty = Vocab::build(&[], &g);
        assert_eq!(empty.tokens(), [UNK]);
        let ex = Example::from_text("b zz a b", 10);
        let v = Vocab::build(&[ex.clone()], &g);
        assert_eq!(v.tokens(), [UNK, "a", "b"]);
        assert_eq!(v.encode(&ex.tokens), vec![2, 0, 1, 2]);
        let again = Vocab::build(&[ex], &g);
        assert_eq!(v, again);
        let m = v.embedding_matrix(&g);
        assert_eq!(m.data(), &[2.0, 3.0, 3.0, 4.0, 1.0, 2.0]);
    }
}
