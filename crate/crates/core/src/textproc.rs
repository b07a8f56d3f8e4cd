//! Word-level tokenization, vocabulary and TF-IDF sentence embeddings.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace; every non-alphanumeric,
/// non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VocabEntry {
    token: String,
    index: usize,
    df: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    documents: usize,
    entries: Vec<VocabEntry>,
}

/// Token/index bijection with per-token document frequencies.
///
/// Indices 0..4 are the specials `<pad> <bos> <eos> <unk>`; they carry no
/// document frequency and never contribute to embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    df: Vec<usize>,
    documents: usize,
}

impl Vocabulary {
    /// Keeps tokens whose total corpus frequency is at least `min_freq`.
    /// Each text counts as one document for the idf statistics.
    pub fn build<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
        }
        if texts.is_empty() {
            return Err(Error::EmptyInput("vocabulary corpus"));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        for text in texts {
            let toks = tokenize(text.as_ref());
            let mut seen = std::collections::HashSet::new();
            for t in toks {
                if SPECIALS.contains(&t.as_str()) {
                    continue;
                }
                let f = freq.entry(t.clone()).or_insert(0);
                if *f == 0 {
                    order.push(t.clone());
                }
                *f += 1;
                if seen.insert(t.clone()) {
                    *df.entry(t).or_insert(0) += 1;
                }
            }
        }
        let mut vocab = Self::empty(texts.len());
        // First-occurrence order keeps indices stable and deterministic.
        for t in order {
            if freq[&t] >= min_freq {
                vocab.push(t.clone(), df[&t]);
            }
        }
        Ok(vocab)
    }

    fn empty(documents: usize) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            df: Vec::new(),
            documents,
        };
        for s in SPECIALS {
            v.index.insert(s.to_string(), v.tokens.len());
            v.tokens.push(s.to_string());
            v.df.push(0);
        }
        v
    }

    fn push(&mut self, token: String, df: usize) {
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.df.push(df);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == SPECIALS.len()
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    /// Index of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn document_frequency(&self, id: usize) -> usize {
        self.df.get(id).copied().unwrap_or(0)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins token strings with spaces, dropping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `ln((1 + D) / (1 + df)) + 1`; zero for specials.
    pub fn idf(&self, id: usize) -> f64 {
        if Self::is_special(id) || id >= self.len() {
            return 0.0;
        }
        ((1.0 + self.documents as f64) / (1.0 + self.df[id] as f64)).ln() + 1.0
    }

    /// L2-normalized TF-IDF bag of known tokens. Empty or all-unknown text
    /// maps to the zero vector.
    pub fn embed(&self, text: &str) -> EmbeddingVector {
        self.embed_ids(&self.encode(text))
    }

    pub fn embed_ids(&self, ids: &[usize]) -> EmbeddingVector {
        let mut v = vec![0.0; self.len()];
        for &id in ids {
            if !Self::is_special(id) && id < v.len() {
                v[id] += 1.0;
            }
        }
        for (id, x) in v.iter_mut().enumerate() {
            if *x != 0.0 {
                *x *= self.idf(id);
            }
        }
        EmbeddingVector::normalized(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = VocabFile {
            documents: self.documents,
            entries: self
                .tokens
                .iter()
                .enumerate()
                .map(|(index, token)| VocabEntry {
                    token: token.clone(),
                    index,
                    df: self.df[index],
                })
                .collect(),
        };
        fs::write(path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: VocabFile = serde_json::from_slice(&fs::read(path)?)?;
        let mut v = Self::empty(file.documents);
        for (pos, e) in file.entries.into_iter().enumerate() {
            if e.index != pos {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary entry `{}` has index {} at position {pos}",
                    e.token, e.index
                )));
            }
            if pos < SPECIALS.len() {
                if e.token != SPECIALS[pos] {
                    return Err(Error::InvalidArgument(format!(
                        "index {pos} must hold `{}`",
                        SPECIALS[pos]
                    )));
                }
                continue;
            }
            if e.df == 0 || v.index.contains_key(&e.token) {
                return Err(Error::InvalidArgument(format!(
                    "bad vocabulary entry `{}`",
                    e.token
                )));
            }
            v.push(e.token, e.df);
        }
        Ok(v)
    }
}

/// Dense embedding; unit L2 norm unless all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|x| *x /= norm);
        }
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|x| *x == 0.0)
    }
}

/// Dot product of two normalized embeddings; `0` whenever either is zero.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum())
}

/// Text encoder used by the local reward and reward-model features.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> EmbeddingVector;
}

impl Embedder for Vocabulary {
    fn dim(&self) -> usize {
        self.len()
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        Vocabulary::embed(self, text)
    }
}
