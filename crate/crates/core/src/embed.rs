//! Hashed n-gram text embeddings and cosine geometry.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid embedder config: {0}")]
    Config(String),
    #[error("label count {labels} does not match matrix size {size}")]
    Labels { labels: usize, size: usize },
}

/// Fixed-length real vector in one embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    values: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![T::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.is_zero())
    }

    /// Unit-norm copy; the zero vector stays zero.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n.is_zero() {
            return self.clone();
        }
        Self { values: self.values.iter().map(|&v| v / n).collect() }
    }

    pub fn scaled(&self, c: T) -> Self {
        Self { values: self.values.iter().map(|&v| v * c).collect() }
    }

    pub fn dot(&self, other: &Self) -> Result<T, EmbedError> {
        if self.dim() != other.dim() {
            return Err(EmbedError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(self.values.iter().zip(&other.values).map(|(&a, &b)| a * b).sum())
    }

    /// Arithmetic mean of equal-dimension vectors. Empty input gives `None`.
    pub fn centroid<'a, I>(vectors: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a Self>,
        T: 'a,
    {
        let mut iter = vectors.into_iter();
        let first = iter.next()?;
        let mut acc = first.values.clone();
        let mut n = 1usize;
        for v in iter {
            for (a, &b) in acc.iter_mut().zip(&v.values) {
                *a += b;
            }
            n += 1;
        }
        let n = T::from_usize(n).unwrap();
        Some(Self { values: acc.into_iter().map(|a| a / n).collect() })
    }
}

/// Cosine similarity; zero when either side is the zero vector.
pub fn cosine_similarity<T: Scalar>(a: &Embedding<T>, b: &Embedding<T>) -> Result<T, EmbedError> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na.is_zero() || nb.is_zero() {
        return Ok(T::zero());
    }
    let c = dot / (na * nb);
    // Rounding can push |c| a hair past 1.
    Ok(c.max(-T::one()).min(T::one()))
}

/// Pairwise cosine matrix, symmetric by construction.
pub fn similarity_matrix<T: Scalar>(vs: &[Embedding<T>]) -> Result<Vec<Vec<T>>, EmbedError> {
    let n = vs.len();
    let mut m = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in i..n {
            let c = cosine_similarity(&vs[i], &vs[j])?;
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Renders a labeled similarity matrix as CSV. The header row starts with an
/// empty cell followed by the column labels.
pub fn matrix_to_csv<T: Scalar>(labels: &[String], m: &[Vec<T>]) -> Result<String, EmbedError> {
    if labels.len() != m.len() {
        return Err(EmbedError::Labels { labels: labels.len(), size: m.len() });
    }
    let mut out = String::new();
    out.push_str("label");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (l, row) in labels.iter().zip(m) {
        out.push_str(l);
        for v in row {
            let _ = write!(out, ",{:.6}", v.as_f64());
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dimension: usize,
    pub ngram_range: (usize, usize),
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { dimension: 256, ngram_range: (1, 2), seed: 0 }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension < 8 {
            return Err(EmbedError::Config(format!("dimension {} < 8", self.dimension)));
        }
        let (lo, hi) = self.ngram_range;
        if lo == 0 || lo > hi {
            return Err(EmbedError::Config(format!("bad n-gram range ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Anything that maps text into a fixed-dimension vector space.
pub trait Embedder<T: Scalar>: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Embedding<T>;
}

/// Feature-hashing embedder over word n-grams with `1 + ln(tf)` weighting
/// and a sign hash to cancel collisions in expectation.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    cfg: EmbedderConfig,
}

impl HashingEmbedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { cfg: EmbedderConfig::default() }
    }
}

impl<T: Scalar> Embedder<T> for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed(&self, text: &str) -> Embedding<T> {
        embed_text(text, &self.cfg)
    }
}

/// Lowercased alphanumeric runs; each CJK character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if is_cjk(ch) {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            tokens.push(ch.to_string());
        } else if ch.is_alphanumeric() || ch == '_' {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

fn is_cjk(ch: char) -> bool {
    matches!(ch as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0xF900..=0xFAFF)
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    // Final avalanche so low bits depend on every input byte.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

/// Deterministic, L2-normalized hashed n-gram embedding.
pub fn embed_text<T: Scalar>(text: &str, cfg: &EmbedderConfig) -> Embedding<T> {
    let tokens = tokenize(text);
    let mut counts: HashMap<String, u32> = HashMap::new();
    let (lo, hi) = cfg.ngram_range;
    for n in lo..=hi {
        if n > tokens.len() {
            break;
        }
        for w in tokens.windows(n) {
            *counts.entry(w.join("\u{1f}")).or_insert(0) += 1;
        }
    }
    let mut values = vec![T::zero(); cfg.dimension];
    // Sorted so float accumulation order is fixed.
    let mut grams: Vec<_> = counts.into_iter().collect();
    grams.sort_unstable();
    for (gram, count) in grams {
        let h = fnv1a(cfg.seed, gram.as_bytes());
        let slot = (h % cfg.dimension as u64) as usize;
        let sign = if h >> 63 == 0 { T::one() } else { -T::one() };
        let weight = T::one() + T::from_u32(count).unwrap().ln();
        values[slot] += sign * weight;
    }
    Embedding::new(values).normalized()
}
