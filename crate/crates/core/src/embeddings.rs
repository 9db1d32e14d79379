//! Word vectors and the normalized cosine distances built on them.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::corpus::NewsArticle;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {0}: wrong number of fields for the declared dimension")]
    DimensionMismatch(usize),
    #[error("line {0}: unparseable float")]
    ParseError(usize),
    #[error("embedding dimension must be positive")]
    ZeroDim,
}

/// Token → dense vector. Tokens missing from the table get a deterministic
/// unit-norm vector derived from a hash of the token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    oov_seed: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

impl EmbeddingTable {
    /// Empty table: every token is out of vocabulary.
    pub fn hashed(dim: usize, oov_seed: u64) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        Ok(EmbeddingTable {
            dim,
            vectors: HashMap::new(),
            oov_seed,
        })
    }

    pub fn from_vectors<I>(dim: usize, entries: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut t = Self::hashed(dim, 0)?;
        for (i, (tok, v)) in entries.into_iter().enumerate() {
            if v.len() != dim {
                return Err(EmbeddingError::DimensionMismatch(i + 1));
            }
            t.vectors.entry(tok).or_insert(v);
        }
        Ok(t)
    }

    /// GloVe-style text file: a token followed by `dim` floats per line.
    /// Later duplicates are ignored.
    pub fn load(path: &Path, dim: usize) -> Result<Self, EmbeddingError> {
        let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, dim)
    }

    pub fn parse(text: &str, dim: usize) -> Result<Self, EmbeddingError> {
        let mut t = Self::hashed(dim, 0)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != dim + 1 {
                return Err(EmbeddingError::DimensionMismatch(i + 1));
            }
            let v = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| EmbeddingError::ParseError(i + 1))?;
            t.vectors.entry(fields[0].to_string()).or_insert(v);
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }

    pub fn word_vector(&self, token: &str) -> Vec<f64> {
        match self.vectors.get(token) {
            Some(v) => v.clone(),
            None => self.oov_vector(token),
        }
    }

    fn oov_vector(&self, token: &str) -> Vec<f64> {
        let seed = fnv1a(token.as_bytes()) ^ self.oov_seed.wrapping_mul(FNV_PRIME);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let v: Vec<f64> = (0..self.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = norm(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    pub fn word_distance(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 0.0;
        }
        normalized_cosine_distance(&self.word_vector(a), &self.word_vector(b))
    }

    pub fn mean_vector<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for t in tokens {
            add_assign(&mut acc, &self.word_vector(t.as_ref()));
        }
        let n = tokens.len().max(1) as f64;
        acc.iter_mut().for_each(|x| *x /= n);
        acc
    }

    /// Mean of title-token vectors.
    pub fn news_embedding(&self, article: &NewsArticle) -> Vec<f64> {
        self.mean_vector(&article.title)
    }

    pub fn news_distance(&self, a: &NewsArticle, b: &NewsArticle) -> f64 {
        normalized_cosine_distance(&self.news_embedding(a), &self.news_embedding(b))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn add_assign(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// `(1 - cos) / 2`, clamped to `[0, 1]`. A zero vector sits at 0.5 from
/// everything.
pub fn normalized_cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.5;
    }
    if a == b {
        return 0.0;
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    ((1.0 - cos) / 2.0).clamp(0.0, 1.0)
}
